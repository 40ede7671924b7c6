"""
Reference answers for checking fitted approximations.

Tensor-grid trapezoid quadrature gives normalizers, moments and KL(q || pi) on
one- and two-dimensional targets; a random-walk Metropolis sampler with
per-coordinate scales tuned during burn-in covers the rest.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from tqdm import tqdm

from .exceptions import EstimatorError, GridTooSmallError
from .mixture import MixtureApprox
from .models import MhChain
from .targets import TargetModel

logger = logging.getLogger("vboost")

BOUNDARY_MASS_TOLERANCE = 1e-8
TARGET_ACCEPTANCE = 0.3
TUNING_BATCH = 100


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """Tensor grid with `counts[d]` evenly spaced nodes over `bounds[d]`"""

    bounds: Tuple[Tuple[float, float], ...]
    counts: Tuple[int, ...]

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        counts = tuple(int(n) for n in self.counts)
        if len(bounds) != len(counts) or len(bounds) not in (1, 2):
            raise ValueError("a grid has one or two dimensions, with one count per bound")
        for (lo, hi), n in zip(bounds, counts):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bounds must be finite and increasing, got ({lo}, {hi})")
            if n < 11 or n % 2 == 0:
                raise ValueError(f"point counts must be odd and at least 11, got {n}")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def around(
        cls, mean: Sequence[float], std: Sequence[float], width: float = 10.0, points: int = 401
    ) -> "QuadratureGrid":
        """Grid spanning mean +/- width * std in every dimension"""
        bounds = tuple((m - width * s, m + width * s) for m, s in zip(mean, std))
        return cls(bounds, (points,) * len(bounds))

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def axes(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.linspace(lo, hi, n) for (lo, hi), n in zip(self.bounds, self.counts))

    def points(self) -> np.ndarray:
        """Nodes as rows of an (N, D) array, last axis varying fastest"""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def integrate(self, values: np.ndarray) -> float:
        """Trapezoid rule of node values given in `points()` order"""
        grid_values = np.asarray(values, dtype=float).reshape(self.counts)
        for axis in reversed(self.axes()):
            grid_values = trapezoid(grid_values, axis, axis=-1)
        return float(grid_values)

    def boundary_mask(self) -> np.ndarray:
        edges = np.zeros(self.counts, dtype=bool)
        for d in range(self.dim):
            index = [slice(None)] * self.dim
            index[d] = 0
            edges[tuple(index)] = True
            index[d] = -1
            edges[tuple(index)] = True
        return edges.ravel()


@dataclass(frozen=True, eq=False)
class QuadratureMoments:
    log_normalizer: float
    mean: np.ndarray
    cov: np.ndarray


def _check_grid(grid: QuadratureGrid, dim: int) -> None:
    if dim not in (1, 2):
        raise ValueError(f"quadrature supports 1 or 2 dimensions, target has {dim}")
    if grid.dim != dim:
        raise ValueError(f"grid has {grid.dim} dimensions, target has {dim}")


def _normalized_density(
    grid: QuadratureGrid, log_values: np.ndarray, what: str
) -> Tuple[np.ndarray, float]:
    """exp(log_values) scaled to a peak of 1, with the log of its integral"""
    log_values = np.asarray(log_values, dtype=float)
    peak = float(np.max(log_values))
    if not math.isfinite(peak):
        raise GridTooSmallError(f"{what} has no finite mass on the grid")
    density = np.exp(log_values - peak)
    total = grid.integrate(density)

    edge_mass = grid.integrate(np.where(grid.boundary_mask(), density, 0.0)) / total
    if edge_mass > BOUNDARY_MASS_TOLERANCE:
        raise GridTooSmallError(
            f"{what} keeps mass fraction {edge_mass:.3g} on the grid boundary "
            f"{grid.bounds}; widen the grid"
        )
    return density, peak + math.log(total)


def quadrature_moments(target: TargetModel, grid: QuadratureGrid) -> QuadratureMoments:
    """Normalizer, mean and covariance of exp(target.log_density) by trapezoid rule"""
    _check_grid(grid, target.dim)
    points = grid.points()
    density, log_normalizer = _normalized_density(
        grid, target.log_density(points), "target"
    )
    total = grid.integrate(density)

    mean = np.array([grid.integrate(density * points[:, d]) for d in range(grid.dim)])
    mean = mean / total
    centred = points - mean
    cov = np.empty((grid.dim, grid.dim))
    for i in range(grid.dim):
        for j in range(i, grid.dim):
            cov[i, j] = cov[j, i] = grid.integrate(density * centred[:, i] * centred[:, j]) / total
    return QuadratureMoments(log_normalizer, mean, cov)


def kl_q_to_target(mix: MixtureApprox, target: TargetModel, grid: QuadratureGrid) -> float:
    """KL(q || pi) in nats with pi normalized on the same grid"""
    _check_grid(grid, target.dim)
    if mix.dim != target.dim:
        raise ValueError(f"mixture has dimension {mix.dim}, target has {target.dim}")

    points = grid.points()
    log_target = np.asarray(target.log_density(points), dtype=float)
    _, log_normalizer = _normalized_density(grid, log_target, "target")
    log_q = mix.log_pdf(points)
    _normalized_density(grid, log_q, "approximation")

    q = np.exp(log_q)
    integrand = np.where(q > 0, q * (log_q - (log_target - log_normalizer)), 0.0)
    return grid.integrate(integrand)


def rwm_sample(
    target: TargetModel,
    n_steps: int,
    burn_in: int,
    proposal_scale,
    rng: np.random.Generator,
    x0: Optional[np.ndarray] = None,
    verbose: bool = False,
) -> MhChain:
    """
    Random-walk Metropolis with a Gaussian proposal of per-coordinate scale.

    During burn-in, every batch of steps rescales the proposal toward an
    acceptance rate of 0.3 and, once enough states are seen, shapes it to the
    running marginal standard deviations of the chain. The scale is frozen
    after burn-in; only the `n_steps - burn_in` later states are returned.

    Args:
        target (TargetModel): unnormalized log-density
        n_steps (int): total steps, burn-in included
        burn_in (int): tuning steps discarded from the output
        proposal_scale (float or np.ndarray): initial per-coordinate scale
        rng (np.random.Generator): sole source of randomness
        x0 (np.ndarray, optional): start point, the origin by default
        verbose (bool): show a progress bar
    Returns:
        MhChain: post-burn-in draws, their acceptance rate and the frozen scale
    """
    if not 0 <= burn_in < n_steps:
        raise ValueError(f"need 0 <= burn_in < n_steps, got {burn_in}, {n_steps}")
    dim = target.dim
    scale = np.broadcast_to(np.asarray(proposal_scale, dtype=float), (dim,)).copy()
    if np.any(scale <= 0):
        raise ValueError("proposal_scale must be positive")

    x = np.zeros(dim) if x0 is None else np.array(x0, dtype=float)
    log_p = float(target.log_density(x))
    if not math.isfinite(log_p):
        raise EstimatorError(f"target log-density is {log_p} at the start point", point=x)

    log_factor = 0.0
    running_mean = np.zeros(dim)
    running_sq = np.zeros(dim)
    n_seen = 0
    batch_accepts = 0
    accepts = 0
    samples = np.empty((n_steps - burn_in, dim))

    for step in tqdm(range(n_steps), disable=not verbose, desc="rwm"):
        proposal = x + math.exp(log_factor) * scale * rng.standard_normal(dim)
        log_p_new = float(target.log_density(proposal))
        if -rng.standard_exponential() < log_p_new - log_p:
            x, log_p = proposal, log_p_new
            if step >= burn_in:
                accepts += 1
            else:
                batch_accepts += 1

        if step < burn_in:
            n_seen += 1
            delta = x - running_mean
            running_mean += delta / n_seen
            running_sq += delta * (x - running_mean)

            if (step + 1) % TUNING_BATCH == 0:
                rate = batch_accepts / TUNING_BATCH
                log_factor += 2.0 * (rate - TARGET_ACCEPTANCE)
                if n_seen >= 2 * TUNING_BATCH:
                    spread = np.sqrt(running_sq / (n_seen - 1))
                    if np.all(spread > 0):
                        scale = 2.38 * spread / math.sqrt(dim)
                logger.debug(
                    f"rwm step {step + 1}: batch acceptance {rate:.2f}, "
                    f"scale factor {math.exp(log_factor):.3g}"
                )
                batch_accepts = 0
        else:
            samples[step - burn_in] = x

    rate = accepts / (n_steps - burn_in)
    logger.debug(f"rwm acceptance after burn-in: {rate:.3f}")
    return MhChain(samples, rate, math.exp(log_factor) * scale)


def effective_sample_size(draws: np.ndarray) -> float:
    """ESS of a scalar chain with initial-positive-sequence truncation"""
    draws = np.asarray(draws, dtype=float)
    n = draws.shape[0]
    centred = draws - np.mean(draws)
    if n < 4 or not np.any(centred):
        return float(n)

    spectrum = np.fft.rfft(centred, 2 * n)
    autocov = np.fft.irfft(spectrum * np.conj(spectrum))[:n] / n
    autocorr = autocov / autocov[0]

    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = autocorr[k] + autocorr[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1.0 / n))


def _standard_error(series: np.ndarray) -> float:
    return float(np.std(series, ddof=1) / math.sqrt(effective_sample_size(series)))


def moment_table(
    mean: np.ndarray, cov: np.ndarray, se: Optional[np.ndarray] = None
) -> pd.DataFrame:
    """
    Marginal means, marginal stds and pairwise covariances as rows of
    (statistic, value, se), in that order.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    dim = mean.shape[0]
    pairs = [(i, j) for i in range(dim) for j in range(i + 1, dim)]

    statistics = (
        [f"mean[{d}]" for d in range(dim)]
        + [f"std[{d}]" for d in range(dim)]
        + [f"cov[{i},{j}]" for i, j in pairs]
    )
    values = np.concatenate(
        [mean, np.sqrt(np.diag(cov)), np.array([cov[i, j] for i, j in pairs])]
    )
    if se is None:
        se = np.zeros(values.shape[0])
    return pd.DataFrame({"statistic": statistics, "value": values, "se": se})


def chain_moment_table(chain: MhChain) -> pd.DataFrame:
    """Moment table of a chain with autocorrelation-aware standard errors"""
    samples = chain.samples
    dim = samples.shape[1]
    mean = np.mean(samples, axis=0)
    centred = samples - mean
    cov = np.cov(samples, rowvar=False, ddof=1).reshape(dim, dim)
    std = np.sqrt(np.diag(cov))

    mean_se = [_standard_error(samples[:, d]) for d in range(dim)]
    # delta method: se(std) = se(var) / (2 std)
    std_se = [_standard_error(centred[:, d] ** 2) / (2.0 * std[d]) for d in range(dim)]
    cov_se = [
        _standard_error(centred[:, i] * centred[:, j])
        for i in range(dim)
        for j in range(i + 1, dim)
    ]
    return moment_table(mean, cov, np.array(mean_se + std_se + cov_se))


def quadrature_moment_table(moments: QuadratureMoments) -> pd.DataFrame:
    return moment_table(moments.mean, moments.cov)


def mixture_moment_table(mix: MixtureApprox) -> pd.DataFrame:
    return moment_table(mix.mean(), mix.cov())


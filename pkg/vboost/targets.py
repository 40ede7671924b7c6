import functools
import math
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import betaln, digamma, expit, gammaln, log_expit, logsumexp, softmax

from .exceptions import DataFormatError, TargetSpecError
from .lowrank import LOG_2PI
from .models import BinomialData, PoissonGlmData


def _rowwise(method):
    """Evaluate on a stack of rows and unwrap again when given a single point"""

    @functools.wraps(method)
    def wrapper(self, x):
        x = np.asarray(x, dtype=float)
        out = method(self, np.atleast_2d(x))
        return out[0] if x.ndim == 1 else out

    return wrapper


class TargetModel:
    """Target base class to extend with an unnormalized log-density and its gradient

    Both methods accept a single point of shape (D,) or a stack of points of
    shape (n, D) and return one value (or gradient row) per point.
    """

    dim: int
    # ln of the integral of exp(log_density), when known analytically
    log_normalizer: Optional[float] = None
    reference_mean: Optional[np.ndarray] = None
    reference_cov: Optional[np.ndarray] = None

    def log_density(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError(
            "Must implement log_density(self, x: np.ndarray) -> np.ndarray method"
        )

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError(
            "Must implement grad_log_density(self, x: np.ndarray) -> np.ndarray method"
        )


class GaussianTarget(TargetModel):
    """Normalized N(mean, cov) with a dense covariance"""

    def __init__(self, mean: Sequence[float], cov: Sequence[Sequence[float]]):
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise TargetSpecError(
                f"mean {mean.shape} and covariance {cov.shape} shapes disagree"
            )
        if not np.allclose(cov, cov.T):
            raise TargetSpecError("covariance must be symmetric")
        try:
            self._chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise TargetSpecError("covariance is not positive definite") from exc

        self.dim = mean.shape[0]
        self._log_det = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        self.log_normalizer = 0.0
        self.reference_mean = mean
        self.reference_cov = cov

    def log_density(self, x: np.ndarray) -> np.ndarray:
        delta = np.moveaxis(np.asarray(x, dtype=float) - self.reference_mean, -1, 0)
        white = linalg.solve_triangular(self._chol, delta, lower=True)
        return -0.5 * (self._log_det + self.dim * LOG_2PI + np.sum(white**2, axis=0))

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        delta = np.moveaxis(np.asarray(x, dtype=float) - self.reference_mean, -1, 0)
        return -np.moveaxis(linalg.cho_solve((self._chol, True), delta), 0, -1)


class GmmTarget(TargetModel):
    """Normalized weighted sum of dense Gaussians"""

    def __init__(self, components: Sequence[Tuple[float, Sequence[float], Sequence]]):
        if not components:
            raise TargetSpecError("a mixture target needs at least one component")
        weights = np.array([w for w, _, _ in components], dtype=float)
        if np.any(weights <= 0):
            raise TargetSpecError("mixture target weights must be positive")

        self.weights = weights / np.sum(weights)
        self.components = [GaussianTarget(mean, cov) for _, mean, cov in components]
        dims = {comp.dim for comp in self.components}
        if len(dims) != 1:
            raise TargetSpecError(f"components disagree on dimension: {sorted(dims)}")

        self.dim = dims.pop()
        self.log_normalizer = 0.0
        means = np.stack([comp.reference_mean for comp in self.components])
        self.reference_mean = self.weights @ means
        second = sum(
            w * (comp.reference_cov + np.outer(comp.reference_mean, comp.reference_mean))
            for w, comp in zip(self.weights, self.components)
        )
        self.reference_cov = second - np.outer(self.reference_mean, self.reference_mean)

    def _joint(self, x: np.ndarray) -> np.ndarray:
        return np.log(self.weights) + np.stack(
            [comp.log_density(x) for comp in self.components], axis=-1
        )

    def log_density(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self._joint(x), axis=-1)

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        resp = softmax(self._joint(x), axis=-1)
        grads = np.stack([comp.grad_log_density(x) for comp in self.components], axis=-2)
        return np.sum(resp[..., None] * grads, axis=-2)


def gauss_target(mean, cov) -> GaussianTarget:
    return GaussianTarget(mean, cov)


def gmm_target(components) -> GmmTarget:
    """Mixture target from (weight, mean, cov) triples"""
    return GmmTarget(components)


def factor_gaussian_target(
    dim: int, n_factors: int, factor_scale: float, diag: float = 1.0, seed: int = 0
) -> GaussianTarget:
    """Zero-mean Gaussian with covariance F F^T + diag * I, F ~ factor_scale * N(0, 1)"""
    if n_factors < 0 or n_factors > dim or diag <= 0:
        raise TargetSpecError(
            f"need 0 <= n_factors <= dim and diag > 0, got {n_factors}, {dim}, {diag}"
        )
    factors = factor_scale * np.random.default_rng(seed).standard_normal((dim, n_factors))
    return GaussianTarget(np.zeros(dim), factors @ factors.T + diag * np.eye(dim))


class HierarchicalBinomial(TargetModel):
    """
    Beta-binomial hierarchy on an unconstrained space.

    x = (u_phi, u_kappa, u_1, ..., u_J) with phi = logistic(u_phi),
    kappa = 1 + exp(u_kappa) and theta_j = logistic(u_j). Priors are
    phi ~ Unif(0, 1), kappa ~ Pareto(1, 1.5), theta_j ~ Beta(phi kappa, (1 - phi) kappa)
    and y_j ~ Binomial(K_j, theta_j). The log-density includes every log-Jacobian.
    """

    PARETO_SHAPE = 1.5

    def __init__(self, data: BinomialData):
        self.data = data
        self.dim = data.n_players + 2
        self._hits = data.hits.astype(float)
        self._misses = (data.at_bats - data.hits).astype(float)
        self._log_choose = float(
            np.sum(
                gammaln(data.at_bats + 1.0)
                - gammaln(self._hits + 1.0)
                - gammaln(self._misses + 1.0)
            )
        )

    @staticmethod
    def constrained(x: np.ndarray):
        """Map unconstrained points to (phi, kappa, theta)"""
        x = np.asarray(x, dtype=float)
        return expit(x[..., 0]), 1.0 + np.exp(x[..., 1]), expit(x[..., 2:])

    def _pieces(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        u_phi, u_kappa, u = x[..., 0], x[..., 1], x[..., 2:]
        phi = expit(u_phi)
        kappa = 1.0 + np.exp(u_kappa)
        return u_phi, u_kappa, u, phi, kappa, phi * kappa, (1.0 - phi) * kappa

    @_rowwise
    def log_prior(self, x: np.ndarray) -> np.ndarray:
        """Priors plus log-Jacobians, without the binomial likelihood"""
        u_phi, u_kappa, u, _, _, a, b = self._pieces(x)
        log_kappa = np.logaddexp(0.0, u_kappa)
        hyper = (
            log_expit(u_phi)
            + log_expit(-u_phi)
            + math.log(self.PARETO_SHAPE)
            - (self.PARETO_SHAPE + 1.0) * log_kappa
            + u_kappa
        )
        players = np.sum(
            a[..., None] * log_expit(u)
            + b[..., None] * log_expit(-u)
            - betaln(a, b)[..., None],
            axis=-1,
        )
        return hyper + players

    @_rowwise
    def log_density(self, x: np.ndarray) -> np.ndarray:
        u = np.asarray(x, dtype=float)[..., 2:]
        likelihood = np.sum(
            self._hits * log_expit(u) + self._misses * log_expit(-u), axis=-1
        )
        return self.log_prior(x) + likelihood + self._log_choose

    @_rowwise
    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        u_phi, u_kappa, u, phi, kappa, a, b = self._pieces(x)
        n_players = self.data.n_players
        theta = expit(u)

        common = digamma(a + b)
        grad_a = np.sum(log_expit(u), axis=-1) - n_players * (digamma(a) - common)
        grad_b = np.sum(log_expit(-u), axis=-1) - n_players * (digamma(b) - common)

        d_u = (a[..., None] + self._hits) * expit(-u) - (
            b[..., None] + self._misses
        ) * theta
        d_phi = (1.0 - 2.0 * phi) + phi * (1.0 - phi) * kappa * (grad_a - grad_b)
        d_kappa = (
            1.0
            - (self.PARETO_SHAPE + 1.0) * expit(u_kappa)
            + np.exp(u_kappa) * (phi * grad_a + (1.0 - phi) * grad_b)
        )
        return np.concatenate([d_phi[..., None], d_kappa[..., None], d_u], axis=-1)


class MultilevelPoisson(TargetModel):
    """
    Poisson GLM with ethnicity and precinct effects.

    x = (mu, ln s2_alpha, ln s2_beta, alpha_1..alpha_E, beta_1..beta_P) with
    mu, ln s2_alpha, ln s2_beta ~ N(0, 10^2), alpha_e ~ N(0, s2_alpha),
    beta_p ~ N(0, s2_beta) and Y_ep ~ Poisson(exp(mu + alpha_e + beta_p + ln N_ep)).
    """

    PRIOR_VAR = 100.0

    def __init__(self, data: PoissonGlmData):
        self.data = data
        self.n_ethnicities = data.n_ethnicities
        self.n_precincts = data.n_precincts
        self.dim = 3 + self.n_ethnicities + self.n_precincts
        self._counts = data.counts.astype(float)
        self._log_exposure = np.log(data.exposures.astype(float))
        self._log_factorial = float(np.sum(gammaln(self._counts + 1.0)))

    def _unpack(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        split = 3 + self.n_ethnicities
        return x[..., 0], x[..., 1], x[..., 2], x[..., 3:split], x[..., split:]

    def _log_rate(self, mu, alpha, beta) -> np.ndarray:
        return (
            mu[..., None, None]
            + alpha[..., :, None]
            + beta[..., None, :]
            + self._log_exposure
        )

    @_rowwise
    def log_likelihood(self, x: np.ndarray) -> np.ndarray:
        mu, _, _, alpha, beta = self._unpack(x)
        log_rate = self._log_rate(mu, alpha, beta)
        return (
            np.sum(self._counts * log_rate - np.exp(log_rate), axis=(-2, -1))
            - self._log_factorial
        )

    @_rowwise
    def log_prior(self, x: np.ndarray) -> np.ndarray:
        mu, log_var_a, log_var_b, alpha, beta = self._unpack(x)
        hyper = -0.5 * (3 * (LOG_2PI + math.log(self.PRIOR_VAR))) - 0.5 * (
            mu**2 + log_var_a**2 + log_var_b**2
        ) / self.PRIOR_VAR
        return hyper + _normal_group(alpha, log_var_a) + _normal_group(beta, log_var_b)

    @_rowwise
    def log_density(self, x: np.ndarray) -> np.ndarray:
        return self.log_prior(x) + self.log_likelihood(x)

    @_rowwise
    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        mu, log_var_a, log_var_b, alpha, beta = self._unpack(x)
        resid = self._counts - np.exp(self._log_rate(mu, alpha, beta))
        prec_a = np.exp(-log_var_a)[..., None]
        prec_b = np.exp(-log_var_b)[..., None]

        d_mu = -mu / self.PRIOR_VAR + np.sum(resid, axis=(-2, -1))
        d_log_var_a = -log_var_a / self.PRIOR_VAR + np.sum(
            0.5 * alpha**2 * prec_a - 0.5, axis=-1
        )
        d_log_var_b = -log_var_b / self.PRIOR_VAR + np.sum(
            0.5 * beta**2 * prec_b - 0.5, axis=-1
        )
        d_alpha = -alpha * prec_a + np.sum(resid, axis=-1)
        d_beta = -beta * prec_b + np.sum(resid, axis=-2)
        return np.concatenate(
            [d_mu[..., None], d_log_var_a[..., None], d_log_var_b[..., None], d_alpha, d_beta],
            axis=-1,
        )


def _normal_group(values: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """sum_k ln N(values_k; 0, exp(log_var))"""
    return np.sum(
        -0.5 * (LOG_2PI + log_var[..., None])
        - 0.5 * values**2 * np.exp(-log_var)[..., None],
        axis=-1,
    )


def hierarchical_binomial(data: BinomialData) -> HierarchicalBinomial:
    return HierarchicalBinomial(data)


def multilevel_poisson(data: PoissonGlmData) -> MultilevelPoisson:
    return MultilevelPoisson(data)


def _read_table(path: Union[str, Path], columns: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise DataFormatError(f"{path}: file is empty") from exc
    except pd.errors.ParserError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc

    if list(frame.columns) != list(columns):
        raise DataFormatError(
            f"{path}: expected header {','.join(columns)}, got {','.join(frame.columns)}"
        )
    if frame.empty:
        raise DataFormatError(f"{path}: no data rows")
    return frame


def _parse_int(path, line: int, column: str, value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise DataFormatError(
            f"{path}:{line}: column {column} must be an integer, got {value!r}"
        ) from exc


def load_binomial_csv(path: Union[str, Path]) -> BinomialData:
    """Read `name,hits,at_bats` rows (header required)

    Args:
        path (str | Path): CSV file to read
    Returns:
        BinomialData: validated per-player data
    """
    frame = _read_table(path, ["name", "hits", "at_bats"])

    names, hits, at_bats = [], [], []
    for index, row in frame.iterrows():
        line = index + 2
        y = _parse_int(path, line, "hits", row["hits"])
        k = _parse_int(path, line, "at_bats", row["at_bats"])
        if k < 1 or not 0 <= y <= k:
            raise DataFormatError(
                f"{path}:{line} ({row['name']}): need 0 <= hits <= at_bats and "
                f"at_bats >= 1, got hits={y}, at_bats={k}"
            )
        names.append(row["name"])
        hits.append(y)
        at_bats.append(k)

    return BinomialData(tuple(names), np.array(hits), np.array(at_bats))


def load_poisson_csv(path: Union[str, Path]) -> PoissonGlmData:
    """Read `ethnicity,precinct,stops,arrests` rows covering a full E x P grid"""
    frame = _read_table(path, ["ethnicity", "precinct", "stops", "arrests"])

    cells = {}
    for index, row in frame.iterrows():
        line = index + 2
        key = (
            _parse_int(path, line, "ethnicity", row["ethnicity"]),
            _parse_int(path, line, "precinct", row["precinct"]),
        )
        if key in cells:
            raise DataFormatError(f"{path}:{line}: duplicate cell {key}")
        if min(key) < 0:
            raise DataFormatError(f"{path}:{line}: indices must be non-negative")
        stops = _parse_int(path, line, "stops", row["stops"])
        arrests = _parse_int(path, line, "arrests", row["arrests"])
        if stops < 0 or arrests < 1:
            raise DataFormatError(
                f"{path}:{line}: need stops >= 0 and arrests >= 1, got {stops}, {arrests}"
            )
        cells[key] = (stops, arrests)

    n_eth = 1 + max(e for e, _ in cells)
    n_pre = 1 + max(p for _, p in cells)
    if len(cells) != n_eth * n_pre:
        raise DataFormatError(
            f"{path}: expected all {n_eth} x {n_pre} cells, found {len(cells)}"
        )

    counts = np.zeros((n_eth, n_pre), dtype=int)
    exposures = np.zeros((n_eth, n_pre), dtype=int)
    for (e, p), (stops, arrests) in cells.items():
        counts[e, p] = stops
        exposures[e, p] = arrests
    return PoissonGlmData(counts, exposures)


def save_poisson_csv(data: PoissonGlmData, path: Union[str, Path]) -> None:
    eth, pre = np.meshgrid(
        np.arange(data.n_ethnicities), np.arange(data.n_precincts), indexing="ij"
    )
    pd.DataFrame(
        {
            "ethnicity": eth.ravel(),
            "precinct": pre.ravel(),
            "stops": data.counts.ravel(),
            "arrests": data.exposures.ravel(),
        }
    ).to_csv(path, index=False)


def gen_poisson_data(
    seed: int,
    n_ethnicities: int = 3,
    n_precincts: int = 31,
    mu: float = -1.0,
    log_var_alpha: float = math.log(0.25),
    log_var_beta: float = math.log(0.5),
    alpha: Optional[Sequence[float]] = None,
    beta: Optional[Sequence[float]] = None,
    exposure_range: Tuple[int, int] = (20, 500),
) -> PoissonGlmData:
    """Draw a synthetic data set from the multilevel Poisson model itself

    Effects not given explicitly are drawn from their N(0, exp(log_var)) priors;
    exposures are uniform integers over `exposure_range` (inclusive).
    """
    rng = np.random.default_rng(seed)
    exposures = rng.integers(
        exposure_range[0], exposure_range[1] + 1, size=(n_ethnicities, n_precincts)
    )
    if alpha is None:
        alpha = rng.normal(0.0, math.exp(0.5 * log_var_alpha), size=n_ethnicities)
    if beta is None:
        beta = rng.normal(0.0, math.exp(0.5 * log_var_beta), size=n_precincts)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if alpha.shape != (n_ethnicities,) or beta.shape != (n_precincts,):
        raise ValueError("alpha and beta must match n_ethnicities and n_precincts")

    rate = np.exp(mu + alpha[:, None] + beta[None, :]) * exposures
    return PoissonGlmData(rng.poisson(rate), exposures)

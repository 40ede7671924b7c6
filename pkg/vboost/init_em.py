import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .exceptions import InitializationError
from .lowrank import LOG_2PI, GaussianComponent, LowRankDiagCov
from .mixture import MixtureApprox
from .models import WeightedSample
from .targets import TargetModel

logger = logging.getLogger("vboost")

FACTOR_INIT_SCALE = 0.01


@dataclass(frozen=True)
class EmConfig:
    """
    Settings for importance-weighted initialization and weighted EM.

    `defensive_fraction` of the first importance sample is drawn from the
    current mixture with every standard deviation widened by `defensive_scale`;
    0 draws from the mixture alone. Weighted EM restarts from the
    `n_start_points` heaviest points at the background variances scaled by
    each of `start_variance_scales`.
    """

    max_iters: int = 100
    loglik_tol: float = 1e-6
    outlier_multiplier: float = 10.0
    outlier_var_scale: float = 1.0
    variance_floor: float = 1e-8
    rho_min: float = 0.05
    rho_max: float = 0.95
    defensive_fraction: float = 0.25
    defensive_scale: float = 4.0
    n_start_points: int = 3
    start_variance_scales: Tuple[float, ...] = (1.0, 0.25, 0.0625)

    def __post_init__(self):
        if self.max_iters < 1 or self.loglik_tol <= 0 or self.variance_floor <= 0:
            raise ValueError("max_iters, loglik_tol and variance_floor must be positive")
        if self.outlier_multiplier <= 1 or self.outlier_var_scale <= 0:
            raise ValueError("outlier_multiplier must exceed 1, outlier_var_scale be positive")
        if not 0 < self.rho_min <= self.rho_max < 1:
            raise ValueError("need 0 < rho_min <= rho_max < 1")
        if not 0 <= self.defensive_fraction < 1 or self.defensive_scale < 1:
            raise ValueError("need 0 <= defensive_fraction < 1 and defensive_scale >= 1")
        scales = tuple(float(s) for s in self.start_variance_scales)
        if self.n_start_points < 1 or not scales or min(scales) <= 0:
            raise ValueError("need n_start_points >= 1 and positive start_variance_scales")
        object.__setattr__(self, "start_variance_scales", scales)


@dataclass(frozen=True, eq=False)
class EmResult:
    component: GaussianComponent
    rho: float
    log_likelihoods: Tuple[float, ...]

    def __iter__(self) -> Iterator:
        # unpacks as (component, rho)
        yield self.component
        yield self.rho


def _self_normalize(log_raw: np.ndarray) -> np.ndarray:
    log_raw = np.where(np.isnan(log_raw), -np.inf, log_raw)
    if np.any(log_raw == np.inf) or not np.any(np.isfinite(log_raw)):
        raise InitializationError("importance weights are all zero or non-finite")
    weights = np.exp(log_raw - logsumexp(log_raw))
    return weights / np.sum(weights)


def _weighted_sample(
    target: TargetModel, proposal: MixtureApprox, points: np.ndarray
) -> WeightedSample:
    with np.errstate(invalid="ignore", over="ignore"):
        log_raw = np.asarray(target.log_density(points), dtype=float) - proposal.log_pdf(
            points
        )
    return WeightedSample(points, _self_normalize(log_raw))


def importance_weights(
    target: TargetModel, mix: MixtureApprox, L: int, rng: np.random.Generator
) -> WeightedSample:
    """Draw L points from `mix` and weight them by pi / q, self-normalized"""
    if L < 2:
        raise ValueError("L must be at least 2")
    return _weighted_sample(target, mix, mix.sample(L, rng))


def outlier_indices(ws: WeightedSample, c: float = 10.0) -> np.ndarray:
    """Indices whose normalized weight exceeds c / L"""
    if c <= 1:
        raise ValueError("outlier multiplier must exceed 1")
    return np.flatnonzero(ws.weights > c / len(ws))


def build_iw_proposal(
    mix: MixtureApprox,
    ws: WeightedSample,
    outliers: Sequence[int],
    var_scale: float = 1.0,
) -> MixtureApprox:
    """p0 q(x) + sum_l w_l N(x | x_l, var_scale * diag(Cov_q)) over the outliers"""
    outliers = np.asarray(outliers, dtype=int)
    if outliers.size == 0:
        return mix

    outlier_weights = ws.weights[outliers]
    p0 = 1.0 - float(np.sum(outlier_weights))
    if p0 <= 0:
        raise InitializationError(
            f"outliers hold all the mass (p0={p0:.3g}); raise the outlier multiplier"
        )

    log_var = np.log(var_scale * mix.marginal_variances())
    bumps = tuple(
        GaussianComponent(ws.points[index], LowRankDiagCov.diagonal(log_var))
        for index in outliers
    )
    weights = np.concatenate([p0 * mix.weights, outlier_weights])
    return MixtureApprox(weights / np.sum(weights), mix.components + bumps)


def _diag_log_pdf(points: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(
        LOG_2PI + np.log(var) + (points - mean) ** 2 / var, axis=-1
    )


@dataclass(frozen=True, eq=False)
class _EmStart:
    mean: np.ndarray
    var: np.ndarray
    rho: float


def _em_starts(
    points: np.ndarray,
    weights: np.ndarray,
    background: MixtureApprox,
    cfg: EmConfig,
    rho: Optional[float],
) -> List[_EmStart]:
    """Free-block starts on the heaviest points, from the background's spread down"""
    top = np.argsort(-weights, kind="stable")[: cfg.n_start_points]
    centres = [points[index] for index in top]
    heavy = weights > cfg.outlier_multiplier / weights.shape[0]
    if np.count_nonzero(heavy) > 1:
        centres.append(weights[heavy] @ points[heavy] / np.sum(weights[heavy]))
        if rho is None:
            rho = float(np.sum(weights[heavy]))
    if rho is None:
        rho = 1.0 / (background.n_components + 1)
    rho = float(np.clip(rho, cfg.rho_min, cfg.rho_max))

    spread = background.marginal_variances()
    return [
        _EmStart(centre, np.maximum(spread * shrink, cfg.variance_floor), rho)
        for centre in centres
        for shrink in cfg.start_variance_scales
    ]


def _run_em(
    points: np.ndarray,
    weights: np.ndarray,
    log_background: Optional[np.ndarray],
    start: _EmStart,
    cfg: EmConfig,
) -> Tuple[np.ndarray, np.ndarray, float, List[float]]:
    mean, var, rho = start.mean, start.var, start.rho
    history = []
    for iteration in range(cfg.max_iters):
        log_free = _diag_log_pdf(points, mean, var)
        if log_background is None:
            log_total = log_free
            resp = np.ones_like(weights)
        else:
            with np.errstate(divide="ignore"):
                log_bg = math.log1p(-rho) + log_background if rho < 1 else np.full_like(
                    log_free, -np.inf
                )
                log_fr = math.log(rho) + log_free
            log_total = np.logaddexp(log_bg, log_fr)
            resp = np.exp(log_fr - log_total)

        history.append(float(weights @ log_total))
        logger.debug(f"weighted EM iteration {iteration}: {history[-1]:.6f}")
        if iteration > 0 and abs(history[-1] - history[-2]) < cfg.loglik_tol:
            break

        effective = weights * resp
        total = float(np.sum(effective))
        if not total > 0:
            raise InitializationError("free block received zero responsibility")
        mean = effective @ points / total
        var = np.maximum(effective @ (points - mean) ** 2 / total, cfg.variance_floor)
        if log_background is not None:
            rho = min(total, 1.0)
    return mean, var, rho, history


def weighted_em(
    points: np.ndarray,
    weights: np.ndarray,
    background: Optional[MixtureApprox],
    cfg: EmConfig = EmConfig(),
    rho: Optional[float] = None,
) -> EmResult:
    """
    Fit {clamped background, free diagonal Gaussian} to a weighted sample.

    The background block keeps its parameters; the M-step updates the free
    block's mean and variances and both block weights by weighted maximum
    likelihood. With `background=None` the free block takes all the mass and
    starts from the weighted moments.

    Against a background, EM is restarted from each of the heaviest points
    (and the weighted mean of the points above `outlier_multiplier / L`) at
    the background's marginal variances times each of `start_variance_scales`.
    The run with the largest final log-likelihood is kept.

    Args:
        rho (float, optional): starting free-block weight; defaults to the
            mass above the outlier threshold, else 1 / (C + 1)
    Returns:
        EmResult: the free component, its clipped weight, and the weighted
        log-likelihood at every iteration of the kept run
    """
    points = np.asarray(points, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if points.ndim != 2 or points.shape[0] != weights.shape[0]:
        raise ValueError(f"points {points.shape} and weights {weights.shape} disagree")
    if np.count_nonzero(weights) < 2:
        raise InitializationError("weighted EM needs at least two weighted points")

    if background is None:
        mean = weights @ points
        var = np.maximum(weights @ (points - mean) ** 2, cfg.variance_floor)
        mean, var, _, history = _run_em(points, weights, None, _EmStart(mean, var, 1.0), cfg)
        component = GaussianComponent(mean, LowRankDiagCov.diagonal(np.log(var)))
        return EmResult(component, cfg.rho_max, tuple(history))

    log_background = background.log_pdf(points)
    best = None
    for start in _em_starts(points, weights, background, cfg, rho):
        try:
            run = _run_em(points, weights, log_background, start, cfg)
        except InitializationError as err:
            logger.debug(f"weighted EM start at {start.mean} dropped: {err}")
            continue
        if best is None or run[3][-1] > best[3][-1]:
            best = run
    if best is None:
        raise InitializationError("every weighted EM start lost the free block")

    mean, var, rho, history = best
    clipped = float(np.clip(rho, cfg.rho_min, cfg.rho_max))
    if clipped != rho:
        logger.warning(f"EM mixing weight {rho:.4f} clipped to {clipped:.2f}")

    component = GaussianComponent(mean, LowRankDiagCov.diagonal(np.log(var)))
    return EmResult(component, clipped, tuple(history))


def attach_factors(
    comp: GaussianComponent,
    rank: int,
    rng: np.random.Generator,
    scale: float = FACTOR_INIT_SCALE,
) -> GaussianComponent:
    """Give a diagonal component `rank` small random factor columns"""
    factors = scale * rng.standard_normal((comp.dim, rank))
    return GaussianComponent(comp.mean, LowRankDiagCov(factors, comp.cov.log_diag))


def _defensive_proposal(mix: MixtureApprox, cfg: EmConfig) -> MixtureApprox:
    if cfg.defensive_fraction == 0:
        return mix
    log_scale = 2.0 * math.log(cfg.defensive_scale)
    widened = tuple(
        GaussianComponent(
            comp.mean,
            LowRankDiagCov(cfg.defensive_scale * comp.cov.factors, comp.cov.log_diag + log_scale),
        )
        for comp in mix.components
    )
    weights = np.concatenate(
        [(1.0 - cfg.defensive_fraction) * mix.weights, cfg.defensive_fraction * mix.weights]
    )
    return MixtureApprox(weights / np.sum(weights), mix.components + widened)


def init_component(
    target: TargetModel,
    mix: MixtureApprox,
    L: int,
    cfg: EmConfig,
    rng: np.random.Generator,
    rank: int = 0,
) -> Tuple[GaussianComponent, float]:
    """Importance-weighted initialization of a new component and its weight

    Weights an L-point sample against the target, breaks up outlier weights
    with a bump proposal, re-weights a fresh L-point sample from it, and fits
    the free block of a weighted EM against the clamped current mixture. The
    free block starts with the outlier mass as its weight.
    """
    if L < 10:
        raise ValueError("L must be at least 10")

    ws = importance_weights(target, _defensive_proposal(mix, cfg), L, rng)
    outliers = outlier_indices(ws, cfg.outlier_multiplier)
    logger.debug(f"importance sample ESS {ws.ess:.1f} of {L}, {outliers.size} outliers")

    proposal = build_iw_proposal(mix, ws, outliers, cfg.outlier_var_scale)
    resampled = _weighted_sample(target, proposal, proposal.sample(L, rng))
    logger.debug(f"re-weighted sample ESS {resampled.ess:.1f} of {L}")

    start_rho = float(np.sum(ws.weights[outliers])) if outliers.size else None
    fit = weighted_em(resampled.points, resampled.weights, mix, cfg, start_rho)
    return attach_factors(fit.component, rank, rng), fit.rho


def max_weight_init(
    target: TargetModel,
    mix: MixtureApprox,
    L: int,
    rng: np.random.Generator,
    rank: int = 0,
) -> GaussianComponent:
    """New component centred on the largest-weight draw from the current mixture"""
    if L < 1:
        raise ValueError("L must be at least 1")

    points = mix.sample(L, rng)
    with np.errstate(invalid="ignore", over="ignore"):
        log_raw = np.asarray(target.log_density(points), dtype=float) - mix.log_pdf(points)
    log_raw = np.where(np.isnan(log_raw), -np.inf, log_raw)
    best = int(np.argmax(log_raw))

    comp = GaussianComponent(
        points[best], LowRankDiagCov.diagonal(np.log(mix.marginal_variances()))
    )
    return attach_factors(comp, rank, rng)

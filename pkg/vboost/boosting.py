import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import logit

from .elbo import BoostParams, boost_grad, elbo_estimate, first_component_grad
from .exceptions import ConfigError, InitializationError, StageError, VBoostError
from .init_em import EmConfig, init_component, max_weight_init
from .lowrank import GaussianComponent, LowRankDiagCov
from .mixture import MixtureApprox
from .models import (
    ElboEstimate,
    FitTrace,
    RankSelection,
    RankSweepRecord,
    StageSummary,
    VBoostResult,
)
from .optimizer import fit
from .targets import TargetModel

# seed stream purposes: default_rng([seed, stage, purpose, ...])
OPTIMIZE, INITIALIZE, EVALUATE = 0, 1, 2

INIT_METHODS = ("alg1", "max-weight")


@dataclass(frozen=True)
class VBoostConfig:
    """
    Settings of a boosting run.

    `rank` is a fixed factor rank or "sweep" to pick it with `select_rank`;
    `rank_threshold` is the mean percent change in marginal variances below
    which the sweep stops. The first component starts at zero mean with
    log-variances `init_log_var`, gets `first_steps` Adam steps, and every
    added component gets `steps`.
    """

    max_components: int = 1
    rank: Union[int, str] = 0
    rank_threshold: float = 0.05
    max_rank: int = 10
    first_steps: int = 2000
    steps: int = 1000
    n_samples: int = 400
    n_new: int = 400
    n_old: int = 400
    init_method: str = "alg1"
    init_samples: int = 1000
    seed: int = 0
    eval_samples: int = 10000
    step_size: float = 0.01
    record_every: int = 10
    init_log_var: float = -2.0
    em: EmConfig = field(default_factory=EmConfig)

    def __post_init__(self):
        counts = (
            "max_components",
            "first_steps",
            "steps",
            "init_samples",
            "record_every",
        )
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_samples", "n_new", "n_old", "eval_samples"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be at least 2, got {getattr(self, name)}")
        if self.rank != "sweep" and not (isinstance(self.rank, int) and self.rank >= 0):
            raise ConfigError(f"rank must be a non-negative integer or 'sweep', got {self.rank!r}")
        if not 0 < self.rank_threshold <= 1:
            raise ConfigError(f"rank_threshold must lie in (0, 1], got {self.rank_threshold}")
        if self.max_rank < 0:
            raise ConfigError(f"max_rank must be non-negative, got {self.max_rank}")
        if self.init_method not in INIT_METHODS:
            raise ConfigError(f"init_method must be one of {INIT_METHODS}, got {self.init_method!r}")
        if self.init_method == "alg1" and self.init_samples < 10:
            raise ConfigError("alg1 initialization needs init_samples >= 10")
        if not self.step_size > 0 or self.seed < 0:
            raise ConfigError("step_size must be positive and seed non-negative")
        if not math.isfinite(self.init_log_var):
            raise ConfigError(f"init_log_var must be finite, got {self.init_log_var}")

    @property
    def sweep(self) -> bool:
        return self.rank == "sweep"


@dataclass(frozen=True)
class Freeze:
    """Parameters held fixed while fitting a single component"""

    mean: bool = False
    log_diag: bool = False
    factor_columns: int = 0

    def mask(self, dim: int, rank: int) -> Optional[np.ndarray]:
        if not (self.mean or self.log_diag or self.factor_columns):
            return None
        if self.factor_columns > rank:
            raise ValueError(f"cannot freeze {self.factor_columns} of {rank} factor columns")

        mean = np.full(dim, 0.0 if self.mean else 1.0)
        factors = np.ones((dim, rank))
        factors[:, : self.factor_columns] = 0.0
        log_diag = np.full(dim, 0.0 if self.log_diag else 1.0)
        return np.concatenate([mean, factors.ravel(), log_diag])


def fit_component(
    target: TargetModel,
    init: GaussianComponent,
    n_steps: int,
    rng: np.random.Generator,
    n_samples: int = 400,
    step_size: float = 0.01,
    record_every: int = 1,
    freeze: Freeze = Freeze(),
    stage: int = 1,
    verbose: bool = False,
) -> Tuple[GaussianComponent, FitTrace]:
    """Maximize the single-component ELBO starting from `init`"""
    dim, rank = init.dim, init.rank

    def objective(flat, step_rng):
        comp = GaussianComponent.from_flat(flat, dim, rank)
        estimate, grad = first_component_grad(target, comp, n_samples, step_rng)
        return estimate.value, grad.flatten()

    flat, trace = fit(
        objective,
        init.to_flat(),
        n_steps,
        rng,
        record_every=record_every,
        step_size=step_size,
        mask=freeze.mask(dim, rank),
        stage=stage,
        verbose=verbose,
    )
    trace.rank = rank
    return GaussianComponent.from_flat(flat, dim, rank), trace


def marginal_variance_pct_change(
    fit_r: GaussianComponent, fit_r1: GaussianComponent
) -> float:
    """Mean over coordinates of |var_{r+1} - var_r| / var_r"""
    if fit_r.dim != fit_r1.dim:
        raise ValueError(f"dimensions differ: {fit_r.dim} vs {fit_r1.dim}")
    before = fit_r.cov.marginal_variances()
    after = fit_r1.cov.marginal_variances()
    return float(np.mean(np.abs(after - before) / before))


def add_factor_column(
    comp: GaussianComponent, rng: np.random.Generator, scale: float = 0.01
) -> GaussianComponent:
    column = scale * rng.standard_normal((comp.dim, 1))
    factors = np.hstack([comp.cov.factors, column])
    return GaussianComponent(comp.mean, LowRankDiagCov(factors, comp.cov.log_diag))


@dataclass(frozen=True)
class FixedPointResidual:
    residual: np.ndarray
    relative: float


def rank_fixed_point_residual(
    target_cov: np.ndarray, comp: GaussianComponent
) -> FixedPointResidual:
    """
    Stationarity residual of the last factor column for a Gaussian target.

    At an optimum of the rank-r fit with every other parameter held fixed,
    Sigma^{-1} f = C^{-1} f / (1 + f^T C^{-1} f), where C is the diagonal plus
    the first r - 1 factor outer products. The residual is scaled by
    |f| |Sigma^{-1}| for `relative`.
    """
    if comp.rank < 1:
        raise ValueError("the component needs at least one factor column")
    target_cov = np.asarray(target_cov, dtype=float)
    if target_cov.shape != (comp.dim, comp.dim):
        raise ValueError(f"target covariance {target_cov.shape} does not match D={comp.dim}")

    last = comp.cov.factors[:, -1]
    rest = LowRankDiagCov(comp.cov.factors[:, :-1], comp.cov.log_diag)
    target_precision = np.linalg.inv(target_cov)

    rest_solved = rest.solve(last)
    residual = target_precision @ last - rest_solved / (1.0 + last @ rest_solved)
    scale = np.linalg.norm(last) * np.linalg.norm(target_precision, 2)
    return FixedPointResidual(residual, float(np.linalg.norm(residual) / scale))


class VariationalBoosting:
    """Grows a mixture approximation to a target one component at a time"""

    def __init__(
        self,
        target: TargetModel,
        config: VBoostConfig = VBoostConfig(),
        verbose: bool = False,
    ):
        """Initialize a boosting run

        Args:
            target (TargetModel): unnormalized log-density to approximate
            config (VBoostConfig): run settings
            verbose (bool): DEBUG logging and progress bars
        """
        self.logger = logging.getLogger("vboost")
        if verbose:
            logging.basicConfig(level=logging.DEBUG)
        else:
            logging.basicConfig(level=logging.WARNING)

        self.target = target
        self.config = config
        self.verbose = verbose

    def _rng(self, stage: int, purpose: int, *extra: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, stage, purpose, *extra])

    def _fit_single(
        self, init: GaussianComponent, rng: np.random.Generator, stage: int
    ) -> Tuple[GaussianComponent, FitTrace]:
        cfg = self.config
        return fit_component(
            self.target,
            init,
            cfg.first_steps,
            rng,
            n_samples=cfg.n_samples,
            step_size=cfg.step_size,
            record_every=cfg.record_every,
            stage=stage,
            verbose=self.verbose,
        )

    def fit_first(self, rank: int) -> Tuple[MixtureApprox, FitTrace]:
        """Fit the single-component approximation at a fixed factor rank

        Starts from zero mean, diagonal exp(init_log_var) and N(0, 0.01^2) factors.
        """
        if not 0 <= rank <= self.target.dim:
            raise ConfigError(f"rank must lie in [0, {self.target.dim}], got {rank}")
        init = GaussianComponent.initial(
            self.target.dim, rank, self._rng(1, INITIALIZE), log_var=self.config.init_log_var
        )
        comp, trace = self._fit_single(init, self._rng(1, OPTIMIZE), stage=1)
        return MixtureApprox.single(comp), trace

    def select_rank(self) -> RankSelection:
        """Sweep r = 0, 1, ... on a single component

        Rank r+1 starts from the rank-r fit with one small random column
        appended. Stops at the first r whose step to r+1 changes the marginal
        variances by less than `rank_threshold` on average. Rank D - 1 is the
        last rank the sweep can select.
        """
        cfg = self.config
        dim = self.target.dim
        dim_cap = max(dim - 1, 0)
        max_rank = min(cfg.max_rank, dim_cap)

        init = GaussianComponent.initial(dim, 0, log_var=cfg.init_log_var)
        comp, trace = self._fit_single(init, self._rng(0, OPTIMIZE, 0), stage=0)
        fits = [comp]
        traces = [trace]
        records = [RankSweepRecord(0, comp.cov.marginal_variances())]

        for rank in range(max_rank):
            init = add_factor_column(fits[-1], self._rng(0, INITIALIZE, rank + 1))
            comp, trace = self._fit_single(init, self._rng(0, OPTIMIZE, rank + 1), stage=0)
            pct = marginal_variance_pct_change(fits[-1], comp)
            fits.append(comp)
            traces.append(trace)
            records.append(RankSweepRecord(rank + 1, comp.cov.marginal_variances(), pct))
            self.logger.info(f"rank {rank} -> {rank + 1}: mean variance change {pct:.2%}")

            if pct < cfg.rank_threshold:
                return RankSelection(rank, fits, records, traces)

        if cfg.max_rank < dim_cap:
            self.logger.warning(
                f"rank sweep reached max_rank={max_rank} without a change below "
                f"{cfg.rank_threshold:.2%}"
            )
            return RankSelection(max_rank, fits, records, traces, reached_max_rank=True)
        self.logger.info(f"rank sweep stopped at the dimension cap, rank {max_rank}")
        return RankSelection(max_rank, fits, records, traces)

    def add_component(
        self, mix: MixtureApprox, rank: int, stage: int
    ) -> Tuple[MixtureApprox, FitTrace]:
        """Initialize, then optimize, a new component and its weight against a frozen mixture

        Args:
            mix (MixtureApprox): current approximation; its components are not modified
            rank (int): factor rank of the new component
            stage (int): index of the stage, equal to the new component count
        Returns:
            (MixtureApprox, FitTrace): the extended mixture and the optimization trace
        """
        cfg = self.config
        dim = self.target.dim
        init_rng = self._rng(stage, INITIALIZE)

        rho = 1.0 / (mix.n_components + 1)
        if cfg.init_method == "alg1":
            try:
                comp, rho = init_component(
                    self.target, mix, cfg.init_samples, cfg.em, init_rng, rank
                )
            except InitializationError as err:
                self.logger.warning(
                    f"stage {stage}: importance-weighted init failed ({err}); "
                    "using the max-weight draw"
                )
                comp = max_weight_init(self.target, mix, cfg.init_samples, init_rng, rank)
        else:
            comp = max_weight_init(self.target, mix, cfg.init_samples, init_rng, rank)
        self.logger.debug(f"stage {stage}: initial weight {rho:.3f}")

        def objective(flat, step_rng):
            params = BoostParams.from_flat(flat, dim, rank)
            estimate, grad = boost_grad(
                self.target, mix, params, cfg.n_new, cfg.n_old, step_rng
            )
            return estimate.value, grad.flatten()

        flat, trace = fit(
            objective,
            BoostParams(comp, float(logit(rho))).to_flat(),
            cfg.steps,
            self._rng(stage, OPTIMIZE),
            record_every=cfg.record_every,
            step_size=cfg.step_size,
            stage=stage,
            verbose=self.verbose,
        )
        trace.rank = rank
        best = BoostParams.from_flat(flat, dim, rank)
        return mix.extend(best.new_comp, best.rho), trace

    def evaluate(self, mix: MixtureApprox, stage: int) -> ElboEstimate:
        """Evaluation-grade ELBO on a stream separate from optimization noise"""
        per_component = max(2, math.ceil(self.config.eval_samples / mix.n_components))
        return elbo_estimate(self.target, mix, per_component, self._rng(stage, EVALUATE))

    def _summarize(self, mix: MixtureApprox, rank: int, stage: int) -> StageSummary:
        estimate = self.evaluate(mix, stage)
        self.logger.info(f"stage {stage}: {mix.n_components} components, ELBO {estimate}")
        return StageSummary(stage, mix.n_components, rank, estimate)

    def run(self) -> VBoostResult:
        """Rank selection (if requested), the first component, then each added component

        With a rank sweep every sweep fit's trace is kept as a stage-0 trace
        and the selected fit's trace is repeated as the stage-1 trace.

        Returns:
            VBoostResult: the final mixture with per-stage traces and evaluations
        """
        cfg = self.config
        if not cfg.sweep and cfg.rank > self.target.dim:
            raise ConfigError(f"rank {cfg.rank} exceeds the target dimension {self.target.dim}")

        selection = None
        traces = []
        stage = 0
        try:
            if cfg.sweep:
                selection = self.select_rank()
                rank = selection.rank
                self.logger.info(f"selected rank {rank}")
                traces.extend(selection.traces)

                stage = 1
                mix = MixtureApprox.single(selection.fits[rank])
                first_trace = FitTrace(1, list(selection.traces[rank].records), rank)
            else:
                rank = cfg.rank
                stage = 1
                mix, first_trace = self.fit_first(rank)

            traces.append(first_trace)
            stages = [self._summarize(mix, rank, 1)]

            for stage in range(2, cfg.max_components + 1):
                self.logger.info(f"stage {stage}: adding component")
                mix, trace = self.add_component(mix, rank, stage)
                traces.append(trace)
                stages.append(self._summarize(mix, rank, stage))
        except StageError:
            raise
        except VBoostError as err:
            raise StageError(f"stage {stage}: {err}", stage) from err

        return VBoostResult(mix, traces, stages, selection)

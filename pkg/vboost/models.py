from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import DataFormatError
from .lowrank import GaussianComponent
from .mixture import MixtureApprox


@dataclass(frozen=True)
class ElboEstimate:
    """
    Monte Carlo ELBO estimate in nats with its standard error
    """

    value: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if not self.std_error >= 0:
            raise ValueError(f"std_error must be non-negative, got {self.std_error}")

    def __str__(self) -> str:
        return f"{self.value:.4f} +/- {self.std_error:.4f} (n={self.n_samples})"


@dataclass(frozen=True)
class TraceRecord:
    step: int
    objective: float
    grad_norm: float


@dataclass
class FitTrace:
    stage: int = 0
    records: List[TraceRecord] = field(default_factory=list)
    # factor rank of the fitted component; sweep traces share stage 0
    rank: Optional[int] = None

    def add_record(self, record: TraceRecord) -> None:
        assert not self.records or record.step > self.records[-1].step

        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True, eq=False)
class WeightedSample:
    """
    Points with self-normalized importance weights
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[0] != self.weights.shape[0]:
            raise ValueError(
                f"points {self.points.shape} and weights {self.weights.shape} disagree"
            )
        if np.any(self.weights < 0) or abs(float(np.sum(self.weights)) - 1.0) > 1e-12:
            raise ValueError("importance weights must be self-normalized")

    @property
    def ess(self) -> float:
        """Kish effective sample size"""
        return float(1.0 / np.sum(self.weights**2))

    def __len__(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class BinomialData:
    """
    Per-player hits and at-bats for the hierarchical binomial model
    """

    names: Tuple[str, ...]
    hits: np.ndarray
    at_bats: np.ndarray

    def __post_init__(self):
        if not (len(self.names) == self.hits.shape[0] == self.at_bats.shape[0]):
            raise DataFormatError("names, hits and at_bats must have equal length")
        for name, y, k in zip(self.names, self.hits, self.at_bats):
            if k < 1:
                raise DataFormatError(f"{name}: at_bats must be at least 1, got {k}")
            if not 0 <= y <= k:
                raise DataFormatError(f"{name}: hits {y} outside [0, at_bats={k}]")

    @property
    def n_players(self) -> int:
        return len(self.names)


@dataclass(frozen=True, eq=False)
class PoissonGlmData:
    """
    Event counts and exposures indexed by (ethnicity, precinct)
    """

    counts: np.ndarray
    exposures: np.ndarray

    def __post_init__(self):
        if self.counts.ndim != 2 or self.counts.shape != self.exposures.shape:
            raise DataFormatError(
                f"counts {self.counts.shape} and exposures {self.exposures.shape} "
                "must be matching E x P tables"
            )
        if np.any(self.counts < 0):
            raise DataFormatError("counts must be non-negative")
        if np.any(self.exposures < 1):
            raise DataFormatError("exposures must be at least 1")

    @property
    def n_ethnicities(self) -> int:
        return self.counts.shape[0]

    @property
    def n_precincts(self) -> int:
        return self.counts.shape[1]


@dataclass(frozen=True, eq=False)
class MhChain:
    """
    Post-burn-in random-walk Metropolis draws
    """

    samples: np.ndarray
    acceptance_rate: float
    proposal_scale: np.ndarray

    def __post_init__(self):
        assert 0.0 <= self.acceptance_rate <= 1.0


@dataclass(frozen=True, eq=False)
class RankSweepRecord:
    rank: int
    marginal_variances: np.ndarray
    pct_change: Optional[float] = None

    @property
    def mean_marginal_variance(self) -> float:
        return float(np.mean(self.marginal_variances))


@dataclass
class RankSelection:
    rank: int
    fits: List[GaussianComponent]
    records: List[RankSweepRecord]
    traces: List[FitTrace]
    reached_max_rank: bool = False


@dataclass(frozen=True)
class StageSummary:
    stage: int
    n_components: int
    rank: int
    evaluation: ElboEstimate


@dataclass
class VBoostResult:
    mixture: MixtureApprox
    traces: List[FitTrace]
    stages: List[StageSummary]
    rank_selection: Optional[RankSelection] = None

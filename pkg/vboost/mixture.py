import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import logsumexp, softmax

from .lowrank import LOG_2PI, GaussianComponent, LowRankDiagCov, _readonly

WEIGHT_TOLERANCE = 1e-12


def _log_weights(weights: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(weights)


@dataclass(frozen=True, eq=False)
class MixtureApprox:
    """
    Mixture q(x) = sum_c rho_c q_c(x) of low-rank-plus-diagonal Gaussians.

    Weights are stored as proportions; any logit parameterization belongs to
    whoever optimizes them.
    """

    weights: np.ndarray
    components: Tuple[GaussianComponent, ...]

    def __post_init__(self):
        weights = _readonly(self.weights, 1, "weights")
        components = tuple(self.components)
        if len(components) == 0:
            raise ValueError("a mixture needs at least one component")
        if len(components) != weights.shape[0]:
            raise ValueError(
                f"{weights.shape[0]} weights for {len(components)} components"
            )
        if np.any(weights < 0) or abs(float(np.sum(weights)) - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError(f"weights must lie on the simplex, got {weights}")
        dims = {comp.dim for comp in components}
        if len(dims) != 1:
            raise ValueError(f"components disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "components", components)

    @classmethod
    def single(cls, component: GaussianComponent) -> "MixtureApprox":
        return cls(np.ones(1), (component,))

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    def component_log_pdfs(self, x: np.ndarray) -> np.ndarray:
        """ln q_c(x) for every component, stacked on the last axis"""
        return np.stack([comp.log_pdf(x) for comp in self.components], axis=-1)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        joint = _log_weights(self.weights) + self.component_log_pdfs(x)
        return logsumexp(joint, axis=-1)

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        joint = _log_weights(self.weights) + self.component_log_pdfs(x)
        return softmax(joint, axis=-1)

    def grad_x_log_pdf(self, x: np.ndarray) -> np.ndarray:
        resp = self.responsibilities(x)
        grads = np.stack([comp.grad_x_log_pdf(x) for comp in self.components], axis=-2)
        return np.sum(resp[..., None] * grads, axis=-2)

    def sample(
        self, count: int, rng: np.random.Generator, return_indices: bool = False
    ):
        """Draw `count` points: a categorical component index, then fresh noise

        Args:
            count (int): number of points
            rng (np.random.Generator): source of all randomness
            return_indices (bool): also return the drawn component indices
        Returns:
            np.ndarray: (count, D) samples, optionally with the (count,) indices
        """
        if count < 1:
            raise ValueError("count must be at least 1")

        indices = rng.choice(self.n_components, size=count, p=self.weights)
        points = np.empty((count, self.dim))
        for c, comp in enumerate(self.components):
            chosen = np.flatnonzero(indices == c)
            if chosen.size:
                points[chosen] = comp.sample(chosen.size, rng)

        if return_indices:
            return points, indices
        return points

    def mean(self) -> np.ndarray:
        return self.weights @ np.stack([comp.mean for comp in self.components])

    def cov(self) -> np.ndarray:
        """Law of total variance: sum_c rho_c (Sigma_c + mu_c mu_c^T) - mu mu^T"""
        mean = self.mean()
        second = sum(
            w * (comp.cov.dense() + np.outer(comp.mean, comp.mean))
            for w, comp in zip(self.weights, self.components)
        )
        cov = second - np.outer(mean, mean)
        return 0.5 * (cov + cov.T)

    def marginal_variances(self) -> np.ndarray:
        mean = self.mean()
        second = sum(
            w * (comp.cov.marginal_variances() + comp.mean**2)
            for w, comp in zip(self.weights, self.components)
        )
        return second - mean**2

    def marginal(self, dims: Sequence[int]) -> "MarginalMixture":
        dims = np.asarray(dims, dtype=int).ravel()
        if dims.size == 0:
            raise ValueError("marginal needs at least one dimension")
        if np.any(dims < 0) or np.any(dims >= self.dim):
            raise ValueError(f"dimensions {dims.tolist()} out of range [0, {self.dim})")

        means = np.stack([comp.mean[dims] for comp in self.components])
        covs = np.stack(
            [comp.cov.dense()[np.ix_(dims, dims)] for comp in self.components]
        )
        return MarginalMixture(self.weights, dims, means, covs)

    def extend(self, new_component: GaussianComponent, rho_new: float) -> "MixtureApprox":
        """(1 - rho_new) q(x) + rho_new q_new(x); existing components are reused as-is"""
        if not 0.0 <= rho_new <= 1.0:
            raise ValueError(f"rho_new must lie in [0, 1], got {rho_new}")
        if new_component.dim != self.dim:
            raise ValueError(
                f"new component has dimension {new_component.dim}, mixture has {self.dim}"
            )
        weights = np.append((1.0 - rho_new) * self.weights, rho_new)
        return MixtureApprox(weights, self.components + (new_component,))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dim": self.dim,
            "components": [
                {
                    "weight": float(w),
                    "mean": comp.mean.tolist(),
                    "factors": comp.cov.factors.ravel().tolist(),
                    "log_diag": comp.cov.log_diag.tolist(),
                }
                for w, comp in zip(self.weights, self.components)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MixtureApprox":
        try:
            dim = int(data["dim"])
            weights = []
            components = []
            for entry in data["components"]:
                factors = np.asarray(entry["factors"], dtype=float)
                if factors.size % dim:
                    raise ValueError(
                        f"{factors.size} factor entries do not fill rows of length {dim}"
                    )
                weights.append(float(entry["weight"]))
                components.append(
                    GaussianComponent(
                        entry["mean"],
                        LowRankDiagCov(factors.reshape(dim, -1), entry["log_diag"]),
                    )
                )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed mixture document: {exc!r}") from exc
        return cls(np.asarray(weights), tuple(components))


@dataclass(frozen=True, eq=False)
class MarginalMixture:
    """Mixture restricted to `dims`; weights are the parent's"""

    weights: np.ndarray
    dims: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def cov(self) -> np.ndarray:
        mean = self.mean()
        second = np.einsum("c,cij->ij", self.weights, self.covs) + np.einsum(
            "c,ci,cj->ij", self.weights, self.means, self.means
        )
        cov = second - np.outer(mean, mean)
        return 0.5 * (cov + cov.T)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = self.dims.shape[0]
        joint = []
        for w, mean, cov in zip(self.weights, self.means, self.covs):
            chol = linalg.cholesky(cov, lower=True)
            delta = np.moveaxis(x - mean, -1, 0)
            white = linalg.solve_triangular(chol, delta, lower=True)
            log_det = 2.0 * np.sum(np.log(np.diag(chol)))
            with np.errstate(divide="ignore"):
                log_w = np.log(w)
            joint.append(
                log_w - 0.5 * (log_det + k * LOG_2PI + np.sum(white**2, axis=0))
            )
        return logsumexp(np.stack(joint, axis=-1), axis=-1)


def save_mixture(mix: MixtureApprox, path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        json.dump(mix.to_dict(), f, indent=2, allow_nan=False)
        f.write("\n")


def load_mixture(path: Union[str, Path]) -> MixtureApprox:
    with open(path, "r") as f:
        return MixtureApprox.from_dict(json.load(f))

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import linalg

from .exceptions import FactorizationError

LOG_2PI = math.log(2.0 * math.pi)


def _readonly(values, ndim: int, name: str) -> np.ndarray:
    out = np.array(values, dtype=float)
    if out.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimension(s), got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LowRankDiagCov:
    """
    Covariance of the form F F^T + diag(exp(v)).

    `factors` is the D x r matrix F and `log_diag` the log-variances v. Rank 0
    is an empty factor block; every operation then reduces to the diagonal case.
    Determinants and solves only ever factorize the r x r matrix
    I_r + F^T diag(exp(-v)) F.
    """

    factors: np.ndarray
    log_diag: np.ndarray

    def __post_init__(self):
        log_diag = _readonly(self.log_diag, 1, "log_diag")
        factors = np.array(self.factors, dtype=float)
        if factors.size == 0:
            factors = factors.reshape(log_diag.shape[0], 0)
        if factors.ndim != 2 or factors.shape[0] != log_diag.shape[0]:
            raise ValueError(
                f"factors must be {log_diag.shape[0]} x r, got shape {factors.shape}"
            )
        factors.setflags(write=False)
        object.__setattr__(self, "log_diag", log_diag)
        object.__setattr__(self, "factors", factors)

    @classmethod
    def diagonal(cls, log_diag) -> "LowRankDiagCov":
        log_diag = np.asarray(log_diag, dtype=float)
        return cls(np.zeros((log_diag.shape[0], 0)), log_diag)

    @property
    def dim(self) -> int:
        return self.log_diag.shape[0]

    @property
    def rank(self) -> int:
        return self.factors.shape[1]

    @cached_property
    def _inv_diag(self) -> np.ndarray:
        return np.exp(-self.log_diag)

    @cached_property
    def _inner_cholesky(self) -> np.ndarray:
        # lower Cholesky factor of I_r + F^T A F, A = diag(exp(-v))
        inner = np.eye(self.rank) + self.factors.T @ (
            self._inv_diag[:, None] * self.factors
        )
        try:
            return np.linalg.cholesky(inner)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(
                "inner r x r factorization failed; log_diag is likely overflowing"
            ) from exc

    def log_det(self) -> float:
        """ln|F F^T + diag(exp(v))| via the matrix determinant lemma"""
        inner = 0.0
        if self.rank > 0:
            inner = 2.0 * float(np.sum(np.log(np.diag(self._inner_cholesky))))
        return float(np.sum(self.log_diag)) + inner

    def solve(self, y: np.ndarray) -> np.ndarray:
        """Apply the inverse covariance to `y` (shape (..., D)) via Woodbury

        Args:
            y (np.ndarray): a single vector or a stack of row vectors
        Returns:
            np.ndarray: Sigma^{-1} y with the same shape as `y`
        """
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.dim:
            raise ValueError(f"expected trailing dimension {self.dim}, got {y.shape}")

        a_y = y * self._inv_diag
        if self.rank == 0:
            return a_y

        projected = a_y @ self.factors
        inner = linalg.cho_solve((self._inner_cholesky, True), projected.T).T
        return a_y - (inner @ self.factors.T) * self._inv_diag

    def inverse_diagonal(self) -> np.ndarray:
        """Diagonal of Sigma^{-1} without forming any D x D matrix"""
        if self.rank == 0:
            return self._inv_diag.copy()
        whitened = linalg.solve_triangular(
            self._inner_cholesky, self.factors.T, lower=True
        )
        return self._inv_diag - self._inv_diag**2 * np.sum(whitened**2, axis=0)

    def marginal_variances(self) -> np.ndarray:
        return np.sum(self.factors**2, axis=1) + np.exp(self.log_diag)

    def dense(self) -> np.ndarray:
        """Explicit D x D covariance. Test and reporting use only."""
        low_rank = self.factors @ self.factors.T
        return 0.5 * (low_rank + low_rank.T) + np.diag(np.exp(self.log_diag))


@dataclass(frozen=True, eq=False)
class ComponentGradient:
    """
    Gradient with respect to a component's (mean, factors, log_diag).

    Arrays may carry one leading batch axis (one gradient per sample).
    """

    d_mean: np.ndarray
    d_factors: np.ndarray
    d_log_diag: np.ndarray

    @property
    def is_batch(self) -> bool:
        return self.d_mean.ndim == 2

    def flatten(self) -> np.ndarray:
        """Concatenate in the order of `GaussianComponent.to_flat`"""
        batch_shape = self.d_mean.shape[:-1]
        return np.concatenate(
            [
                self.d_mean,
                self.d_factors.reshape(batch_shape + (-1,)),
                self.d_log_diag,
            ],
            axis=-1,
        )

    def mean(self) -> "ComponentGradient":
        """Average over the batch axis"""
        return ComponentGradient(
            self.d_mean.mean(axis=0),
            self.d_factors.mean(axis=0),
            self.d_log_diag.mean(axis=0),
        )

    def scale(self, factor: float) -> "ComponentGradient":
        return ComponentGradient(
            factor * self.d_mean, factor * self.d_factors, factor * self.d_log_diag
        )

    def __add__(self, other: "ComponentGradient") -> "ComponentGradient":
        return ComponentGradient(
            self.d_mean + other.d_mean,
            self.d_factors + other.d_factors,
            self.d_log_diag + other.d_log_diag,
        )

    def __sub__(self, other: "ComponentGradient") -> "ComponentGradient":
        return self + other.scale(-1.0)


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    """
    Multivariate normal N(mean, F F^T + diag(exp(v))).

    Samples are written as x = F z_lo + mean + exp(v / 2) * z_hi with
    z_lo ~ N(0, I_r) and z_hi ~ N(0, I_D), so every parameter gradient flows
    through `sample_map`.
    """

    mean: np.ndarray
    cov: LowRankDiagCov

    def __post_init__(self):
        mean = _readonly(self.mean, 1, "mean")
        if mean.shape[0] != self.cov.dim:
            raise ValueError(
                f"mean has dimension {mean.shape[0]}, covariance has {self.cov.dim}"
            )
        object.__setattr__(self, "mean", mean)

    @classmethod
    def initial(
        cls,
        dim: int,
        rank: int,
        rng: Optional[np.random.Generator] = None,
        factor_scale: float = 0.01,
        log_var: float = 0.0,
    ) -> "GaussianComponent":
        """Zero mean, diagonal exp(log_var), factors drawn i.i.d. N(0, factor_scale^2)"""
        factors = np.zeros((dim, rank))
        if rank > 0:
            if rng is None:
                raise ValueError("an rng is needed to initialize factors")
            factors = factor_scale * rng.standard_normal((dim, rank))
        return cls(np.zeros(dim), LowRankDiagCov(factors, np.full(dim, float(log_var))))

    @property
    def dim(self) -> int:
        return self.cov.dim

    @property
    def rank(self) -> int:
        return self.cov.rank

    @property
    def n_params(self) -> int:
        return self.dim * (self.rank + 2)

    def to_flat(self) -> np.ndarray:
        return np.concatenate(
            [self.mean, self.cov.factors.ravel(), self.cov.log_diag]
        )

    @classmethod
    def from_flat(cls, flat: np.ndarray, dim: int, rank: int) -> "GaussianComponent":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (dim * (rank + 2),):
            raise ValueError(
                f"expected {dim * (rank + 2)} parameters, got shape {flat.shape}"
            )
        mean = flat[:dim]
        factors = flat[dim : dim + dim * rank].reshape(dim, rank)
        log_diag = flat[dim + dim * rank :]
        return cls(mean, LowRankDiagCov(factors, log_diag))

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        """Log-density at a point (D,) or at each row of (n, D)"""
        delta = np.asarray(x, dtype=float) - self.mean
        quad = np.sum(delta * self.cov.solve(delta), axis=-1)
        return -0.5 * (self.cov.log_det() + self.dim * LOG_2PI + quad)

    def grad_x_log_pdf(self, x: np.ndarray) -> np.ndarray:
        return -self.cov.solve(np.asarray(x, dtype=float) - self.mean)

    def sample_map(self, z_lo: np.ndarray, z_hi: np.ndarray) -> np.ndarray:
        z_lo = np.asarray(z_lo, dtype=float)
        z_hi = np.asarray(z_hi, dtype=float)
        if z_lo.shape[-1] != self.rank or z_hi.shape[-1] != self.dim:
            raise ValueError(
                f"noise shapes {z_lo.shape}, {z_hi.shape} do not match rank "
                f"{self.rank} and dimension {self.dim}"
            )
        return (
            z_lo @ self.cov.factors.T
            + self.mean
            + np.exp(0.5 * self.cov.log_diag) * z_hi
        )

    def draw_noise(self, count: int, rng: np.random.Generator):
        """Base noise (z_lo, z_hi) for `count` samples; z_lo is drawn first"""
        z_lo = rng.standard_normal((count, self.rank))
        z_hi = rng.standard_normal((count, self.dim))
        return z_lo, z_hi

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_map(*self.draw_noise(count, rng))

    def pathwise_param_grad(
        self, z_lo: np.ndarray, z_hi: np.ndarray, upstream: np.ndarray
    ) -> ComponentGradient:
        """Chain `upstream` = dh/dx through `sample_map` to the parameters"""
        upstream = np.asarray(upstream, dtype=float)
        z_lo = np.asarray(z_lo, dtype=float)
        z_hi = np.asarray(z_hi, dtype=float)
        return ComponentGradient(
            d_mean=upstream.copy(),
            d_factors=upstream[..., :, None] * z_lo[..., None, :],
            d_log_diag=0.5 * upstream * np.exp(0.5 * self.cov.log_diag) * z_hi,
        )

    def direct_param_grad_log_pdf(self, x: np.ndarray) -> ComponentGradient:
        """Gradient of ln q(x; mean, F, v) in the parameters with x held fixed

        With s = Sigma^{-1}(x - mean) and G = -Sigma^{-1}/2 + s s^T/2 the
        derivative in Sigma, the factor gradient is 2 G F and the log-diagonal
        gradient is diag(G) * exp(v).
        """
        factors = self.cov.factors
        scaled = self.cov.solve(np.asarray(x, dtype=float) - self.mean)
        inv_factors = self.cov.solve(factors.T).T

        d_factors = -inv_factors + scaled[..., :, None] * (scaled @ factors)[..., None, :]
        d_log_diag = 0.5 * (scaled**2 - self.cov.inverse_diagonal()) * np.exp(
            self.cov.log_diag
        )
        return ComponentGradient(scaled, d_factors, d_log_diag)

"""
Monte Carlo ELBO estimates and reparameterization gradients.

Every estimator comes in two forms: one that draws its own base noise from an
explicit generator, and one taking frozen noise (`NoiseDraw`). With the noise
frozen the estimate is a smooth deterministic function of the parameters, and
the returned gradients are its exact gradients.
"""
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .exceptions import EstimatorError
from .lowrank import ComponentGradient, GaussianComponent
from .mixture import MixtureApprox
from .models import ElboEstimate
from .targets import TargetModel

DEFAULT_SAMPLES = 400


@dataclass(frozen=True, eq=False)
class NoiseDraw:
    """Base noise for one component: z_lo is (n, r), z_hi is (n, D)"""

    z_lo: np.ndarray
    z_hi: np.ndarray

    @property
    def count(self) -> int:
        return self.z_hi.shape[0]


@dataclass(frozen=True, eq=False)
class BoostParams:
    """New component plus the unconstrained logit of its mixing weight"""

    new_comp: GaussianComponent
    rho_logit: float

    @property
    def rho(self) -> float:
        return float(expit(self.rho_logit))

    def to_flat(self) -> np.ndarray:
        return np.append(self.new_comp.to_flat(), self.rho_logit)

    @classmethod
    def from_flat(cls, flat: np.ndarray, dim: int, rank: int) -> "BoostParams":
        return cls(GaussianComponent.from_flat(flat[:-1], dim, rank), float(flat[-1]))


@dataclass(frozen=True, eq=False)
class BoostGradient:
    component: ComponentGradient
    d_rho_logit: float

    def flatten(self) -> np.ndarray:
        return np.append(self.component.flatten(), self.d_rho_logit)


def draw_noise(comp: GaussianComponent, n: int, rng: np.random.Generator) -> NoiseDraw:
    return NoiseDraw(*comp.draw_noise(n, rng))


def draw_stratified_noise(
    mix: MixtureApprox, n_per_component: int, rng: np.random.Generator
) -> List[NoiseDraw]:
    """`n_per_component` draws for every component, in component order"""
    return [draw_noise(comp, n_per_component, rng) for comp in mix.components]


def _checked_log_density(target: TargetModel, points: np.ndarray) -> np.ndarray:
    values = np.asarray(target.log_density(points), dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EstimatorError(
            f"target log-density is {values[bad[0]]} at a drawn point",
            point=points[bad[0]],
        )
    return values


def _checked_grad(target: TargetModel, points: np.ndarray) -> np.ndarray:
    grads = np.asarray(target.grad_log_density(points), dtype=float)
    bad = np.flatnonzero(~np.all(np.isfinite(grads), axis=-1))
    if bad.size:
        raise EstimatorError(
            "target gradient is not finite at a drawn point", point=points[bad[0]]
        )
    return grads


def _stratified_combine(
    weights: Sequence[float], terms: Sequence[np.ndarray]
) -> Tuple[float, float]:
    """Weighted sum of per-component means and the variance of that sum"""
    value = 0.0
    variance = 0.0
    for w, per_sample in zip(weights, terms):
        value += w * float(np.mean(per_sample))
        variance += w**2 * float(np.var(per_sample, ddof=1)) / per_sample.shape[0]
    return value, variance


def _weight_rows(grad: ComponentGradient, weights: np.ndarray) -> ComponentGradient:
    return ComponentGradient(
        grad.d_mean * weights[:, None],
        grad.d_factors * weights[:, None, None],
        grad.d_log_diag * weights[:, None],
    )


def stratified_elbo(
    target: TargetModel, mix: MixtureApprox, noise: Sequence[NoiseDraw]
) -> ElboEstimate:
    """ELBO as sum_c rho_c E_{q_c}[ln pi - ln q] on frozen per-component noise"""
    terms = []
    for comp, draw in zip(mix.components, noise):
        x = comp.sample_map(draw.z_lo, draw.z_hi)
        terms.append(_checked_log_density(target, x) - mix.log_pdf(x))

    value, variance = _stratified_combine(mix.weights, terms)
    return ElboEstimate(value, math.sqrt(variance), sum(t.shape[0] for t in terms))


def elbo_estimate(
    target: TargetModel,
    mix: MixtureApprox,
    n_per_component: int,
    rng: np.random.Generator,
) -> ElboEstimate:
    if n_per_component < 2:
        raise ValueError("n_per_component must be at least 2")
    return stratified_elbo(target, mix, draw_stratified_noise(mix, n_per_component, rng))


def first_component_objective(
    target: TargetModel, comp: GaussianComponent, noise: NoiseDraw
) -> Tuple[ElboEstimate, ComponentGradient]:
    """E_q[ln pi(x) - ln q(x)] and its pathwise gradient on frozen noise"""
    x = comp.sample_map(noise.z_lo, noise.z_hi)
    terms = _checked_log_density(target, x) - comp.log_pdf(x)
    upstream = _checked_grad(target, x) - comp.grad_x_log_pdf(x)

    grad = comp.pathwise_param_grad(noise.z_lo, noise.z_hi, upstream)
    grad = (grad - comp.direct_param_grad_log_pdf(x)).mean()

    n = terms.shape[0]
    estimate = ElboEstimate(
        float(np.mean(terms)), float(np.std(terms, ddof=1)) / math.sqrt(n), n
    )
    return estimate, grad


def first_component_grad(
    target: TargetModel,
    comp: GaussianComponent,
    n: int,
    rng: np.random.Generator,
) -> Tuple[ElboEstimate, ComponentGradient]:
    if n < 2:
        raise ValueError("n must be at least 2")
    return first_component_objective(target, comp, draw_noise(comp, n, rng))


def boost_objective(
    target: TargetModel,
    fixed_mix: MixtureApprox,
    new_comp: GaussianComponent,
    rho: float,
    old_noise: Sequence[NoiseDraw],
    new_noise: NoiseDraw,
) -> Tuple[ElboEstimate, ComponentGradient, float]:
    """
    (1 - rho) E_{q^(C)}[ln pi - ln q^(C+1)] + rho E_{q_new}[ln pi - ln q^(C+1)].

    The q^(C) expectation is stratified over the fixed components using
    `old_noise`; those samples do not move with the new parameters and only
    contribute through ln q^(C+1) and the (1 - rho) weight. `rho` is taken as
    given, so rho = 0 and rho = 1 can be evaluated directly.

    Returns:
        (ElboEstimate, ComponentGradient, float): the estimate, its gradient in
        the new component's parameters, and its derivative in rho
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    log_rho = math.log(rho) if rho > 0 else -np.inf
    log_keep = math.log1p(-rho) if rho < 1 else -np.inf

    def blend(x):
        log_fixed = fixed_mix.log_pdf(x)
        log_new = new_comp.log_pdf(x)
        log_blend = np.logaddexp(log_keep + log_fixed, log_rho + log_new)
        resp_new = np.exp(log_rho + log_new - log_blend)
        d_blend_d_rho = np.exp(log_new - log_blend) - np.exp(log_fixed - log_blend)
        return log_blend, resp_new, d_blend_d_rho

    old_terms = []
    old_direct = None
    old_d_rho = 0.0
    for weight, comp, draw in zip(fixed_mix.weights, fixed_mix.components, old_noise):
        x = comp.sample_map(draw.z_lo, draw.z_hi)
        log_blend, resp_new, d_blend_d_rho = blend(x)
        old_terms.append(_checked_log_density(target, x) - log_blend)

        direct = _weight_rows(new_comp.direct_param_grad_log_pdf(x), resp_new).mean()
        direct = direct.scale(weight)
        old_direct = direct if old_direct is None else old_direct + direct
        old_d_rho += weight * float(np.mean(d_blend_d_rho))
    old_value, old_variance = _stratified_combine(fixed_mix.weights, old_terms)

    x = new_comp.sample_map(new_noise.z_lo, new_noise.z_hi)
    log_blend, resp_new, d_blend_d_rho = blend(x)
    new_terms = _checked_log_density(target, x) - log_blend
    grad_blend_x = (1.0 - resp_new)[:, None] * fixed_mix.grad_x_log_pdf(
        x
    ) + resp_new[:, None] * new_comp.grad_x_log_pdf(x)
    upstream = _checked_grad(target, x) - grad_blend_x
    new_grad = new_comp.pathwise_param_grad(new_noise.z_lo, new_noise.z_hi, upstream)
    new_grad = (
        new_grad - _weight_rows(new_comp.direct_param_grad_log_pdf(x), resp_new)
    ).mean()
    new_value = float(np.mean(new_terms))
    new_variance = float(np.var(new_terms, ddof=1)) / new_terms.shape[0]

    value = (1.0 - rho) * old_value + rho * new_value
    std_error = math.sqrt((1.0 - rho) ** 2 * old_variance + rho**2 * new_variance)
    grad = old_direct.scale(-(1.0 - rho)) + new_grad.scale(rho)
    d_rho = (
        new_value
        - old_value
        - (1.0 - rho) * old_d_rho
        - rho * float(np.mean(d_blend_d_rho))
    )

    n_samples = sum(t.shape[0] for t in old_terms) + new_terms.shape[0]
    return ElboEstimate(value, std_error, n_samples), grad, d_rho


def boost_grad(
    target: TargetModel,
    fixed_mix: MixtureApprox,
    params: BoostParams,
    n_new: int = DEFAULT_SAMPLES,
    n_old: int = DEFAULT_SAMPLES,
    rng: np.random.Generator = None,
) -> Tuple[ElboEstimate, BoostGradient]:
    """Boosting objective and its gradient in (mean, factors, log_diag, rho_logit)

    Draws `n_old` samples from every fixed component (stratified), then
    `n_new` pathwise samples from the new component.
    """
    if n_new < 2 or n_old < 2:
        raise ValueError("n_new and n_old must be at least 2")
    if rng is None:
        raise ValueError("boost_grad needs an explicit rng")

    old_noise = draw_stratified_noise(fixed_mix, n_old, rng)
    new_noise = draw_noise(params.new_comp, n_new, rng)
    rho = params.rho
    estimate, grad, d_rho = boost_objective(
        target, fixed_mix, params.new_comp, rho, old_noise, new_noise
    )
    return estimate, BoostGradient(grad, d_rho * rho * (1.0 - rho))

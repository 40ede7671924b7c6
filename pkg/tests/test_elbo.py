import numpy as np
import pytest

from tests.fixtures.target_fixtures import (
    assert_grad_close,
    finite_difference_grad,
    random_component,
    random_mixture,
    rng,
)
from vboost import (
    GaussianComponent,
    LowRankDiagCov,
    MixtureApprox,
    boost_grad,
    elbo_estimate,
    gauss_target,
)
from vboost.elbo import (
    BoostParams,
    boost_objective,
    draw_noise,
    draw_stratified_noise,
    first_component_grad,
    first_component_objective,
    stratified_elbo,
)
from vboost.exceptions import EstimatorError
from vboost.targets import TargetModel


def gaussian_kl(comp, mean, cov):
    """KL(q || N(mean, cov)) in closed form"""
    dim = comp.dim
    q_cov = comp.cov.dense()
    delta = mean - comp.mean
    _, log_det_p = np.linalg.slogdet(cov)
    return 0.5 * (
        np.trace(np.linalg.solve(cov, q_cov))
        + delta @ np.linalg.solve(cov, delta)
        - dim
        + log_det_p
        - comp.cov.log_det()
    )


def correlated_target():
    cov = np.array([[1.5, 0.4, 0.0], [0.4, 1.0, -0.3], [0.0, -0.3, 0.8]])
    return gauss_target([0.5, -1.0, 0.2], cov)


class HalfSpaceTarget(TargetModel):
    """Standard normal restricted to x_0 < 0"""

    dim = 1

    def log_density(self, x):
        x = np.atleast_2d(x)
        return np.where(x[:, 0] < 0, -0.5 * x[:, 0] ** 2, -np.inf)

    def grad_log_density(self, x):
        return -np.atleast_2d(x)


def test_elbo_of_exact_fit_is_zero(rng):
    comp = random_component(rng, 3, 1)
    target = gauss_target(comp.mean, comp.cov.dense())
    estimate = elbo_estimate(target, MixtureApprox.single(comp), 200, np.random.default_rng(1))
    assert estimate.value == pytest.approx(0.0, abs=1e-10)
    assert estimate.std_error <= 1e-10
    assert estimate.n_samples == 200


def test_elbo_matches_closed_form_kl(rng):
    target = correlated_target()
    comp = random_component(rng, 3, 1)
    estimate = elbo_estimate(target, MixtureApprox.single(comp), 20_000, rng)
    expected = -gaussian_kl(comp, target.reference_mean, target.reference_cov)
    assert abs(estimate.value - expected) <= 4.0 * estimate.std_error


def test_stratified_elbo_is_deterministic_on_frozen_noise(rng):
    target = correlated_target()
    mix = random_mixture(rng, 3, 3, 1)
    noise = draw_stratified_noise(mix, 50, rng)
    first = stratified_elbo(target, mix, noise)
    second = stratified_elbo(target, mix, noise)
    assert first == second
    assert first.n_samples == 150


def test_elbo_estimate_reproducible():
    target = correlated_target()
    mix = random_mixture(np.random.default_rng(3), 2, 3, 1)
    first = elbo_estimate(target, mix, 100, np.random.default_rng(42))
    second = elbo_estimate(target, mix, 100, np.random.default_rng(42))
    assert first == second


def test_elbo_estimate_needs_two_samples(rng):
    mix = random_mixture(rng, 1, 3, 0)
    with pytest.raises(ValueError):
        elbo_estimate(correlated_target(), mix, 1, rng)


def test_non_finite_target_raises(rng):
    comp = GaussianComponent([0.0], LowRankDiagCov.diagonal([0.0]))
    with pytest.raises(EstimatorError) as excinfo:
        first_component_grad(HalfSpaceTarget(), comp, 200, rng)
    assert excinfo.value.point[0] >= 0


def test_first_component_gradient_against_finite_differences(rng):
    target = correlated_target()
    comp = random_component(rng, 3, 2)
    noise = draw_noise(comp, 64, rng)

    def objective(flat):
        return first_component_objective(
            target, GaussianComponent.from_flat(flat, 3, 2), noise
        )[0].value

    _, grad = first_component_objective(target, comp, noise)
    assert_grad_close(grad.flatten(), finite_difference_grad(objective, comp.to_flat()))


def test_boost_gradient_against_finite_differences(rng):
    target = correlated_target()
    fixed = random_mixture(rng, 2, 3, 1)
    new = random_component(rng, 3, 1)
    old_noise = draw_stratified_noise(fixed, 32, rng)
    new_noise = draw_noise(new, 32, rng)
    rho = 0.35

    def objective(flat):
        return boost_objective(
            target, fixed, GaussianComponent.from_flat(flat, 3, 1), rho, old_noise, new_noise
        )[0].value

    def objective_in_rho(values):
        return boost_objective(target, fixed, new, values[0], old_noise, new_noise)[0].value

    _, grad, d_rho = boost_objective(target, fixed, new, rho, old_noise, new_noise)
    assert_grad_close(grad.flatten(), finite_difference_grad(objective, new.to_flat()))
    assert_grad_close([d_rho], finite_difference_grad(objective_in_rho, np.array([rho])))


def test_boost_gradient_in_logit(rng):
    target = correlated_target()
    fixed = random_mixture(rng, 2, 3, 0)
    params = BoostParams(random_component(rng, 3, 0), -0.4)

    def objective(flat):
        reseeded = np.random.default_rng(8)
        return boost_grad(
            target, fixed, BoostParams.from_flat(flat, 3, 0), 16, 16, reseeded
        )[0].value

    _, grad = boost_grad(target, fixed, params, 16, 16, np.random.default_rng(8))
    assert_grad_close(grad.flatten(), finite_difference_grad(objective, params.to_flat()))


def test_boost_objective_at_rho_zero_is_fixed_elbo(rng):
    target = correlated_target()
    fixed = random_mixture(rng, 3, 3, 1)
    new = random_component(rng, 3, 1)
    old_noise = draw_stratified_noise(fixed, 40, rng)
    new_noise = draw_noise(new, 40, rng)

    estimate, _, _ = boost_objective(target, fixed, new, 0.0, old_noise, new_noise)
    assert estimate.value == stratified_elbo(target, fixed, old_noise).value


def test_boost_objective_at_rho_one_is_new_component_elbo(rng):
    target = correlated_target()
    fixed = random_mixture(rng, 2, 3, 1)
    new = random_component(rng, 3, 1)
    old_noise = draw_stratified_noise(fixed, 40, rng)
    new_noise = draw_noise(new, 40, rng)

    estimate, grad, _ = boost_objective(target, fixed, new, 1.0, old_noise, new_noise)
    single, single_grad = first_component_objective(target, new, new_noise)
    assert estimate.value == single.value
    np.testing.assert_allclose(grad.flatten(), single_grad.flatten(), rtol=1e-14, atol=1e-15)


def test_boost_objective_rejects_rho_outside_unit_interval(rng):
    fixed = random_mixture(rng, 1, 3, 0)
    new = random_component(rng, 3, 0)
    with pytest.raises(ValueError):
        boost_objective(
            correlated_target(),
            fixed,
            new,
            1.5,
            draw_stratified_noise(fixed, 4, rng),
            draw_noise(new, 4, rng),
        )


def test_boost_grad_needs_rng(rng):
    fixed = random_mixture(rng, 1, 3, 0)
    params = BoostParams(random_component(rng, 3, 0), 0.0)
    with pytest.raises(ValueError):
        boost_grad(correlated_target(), fixed, params)

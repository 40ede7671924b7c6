import logging
import math

import numpy as np
import pytest

from tests.fixtures.target_fixtures import bimodal_1d, diag_component, random_mixture, rng
from vboost import EmConfig, MixtureApprox, init_component, max_weight_init, weighted_em
from vboost.exceptions import InitializationError
from vboost.init_em import (
    _defensive_proposal,
    attach_factors,
    build_iw_proposal,
    importance_weights,
    outlier_indices,
)
from vboost.models import WeightedSample
from vboost.targets import TargetModel


class NowhereTarget(TargetModel):
    dim = 1

    def log_density(self, x):
        return np.full(np.atleast_2d(x).shape[0], -np.inf)

    def grad_log_density(self, x):
        return np.zeros_like(np.atleast_2d(x))


def uniform_sample(points):
    points = np.asarray(points, dtype=float)
    return WeightedSample(points, np.full(points.shape[0], 1.0 / points.shape[0]))


@pytest.mark.parametrize(
    "settings",
    [
        {"max_iters": 0},
        {"outlier_multiplier": 1.0},
        {"rho_min": 0.0},
        {"rho_min": 0.6, "rho_max": 0.4},
        {"defensive_fraction": 1.0},
        {"defensive_scale": 0.5},
        {"n_start_points": 0},
        {"start_variance_scales": ()},
        {"start_variance_scales": (1.0, -0.5)},
    ],
)
def test_em_config_validation(settings):
    with pytest.raises(ValueError):
        EmConfig(**settings)


def test_importance_weights_are_self_normalized(bimodal_1d, rng):
    mix = MixtureApprox.single(diag_component([0.0], 4.0))
    ws = importance_weights(bimodal_1d, mix, 500, rng)
    assert len(ws) == 500
    assert np.all(ws.weights >= 0)
    assert np.sum(ws.weights) == pytest.approx(1.0, abs=1e-12)
    assert 1.0 <= ws.ess <= 500.0


def test_importance_weights_uniform_when_proposal_is_target(bimodal_1d, rng):
    mix = MixtureApprox(
        np.array([0.5, 0.5]), (diag_component([-2.0], 0.25), diag_component([2.0], 0.25))
    )
    ws = importance_weights(bimodal_1d, mix, 100, rng)
    np.testing.assert_allclose(ws.weights, np.full(100, 0.01), rtol=1e-10)
    assert ws.ess == pytest.approx(100.0, rel=1e-8)


def test_importance_weights_reject_degenerate_input(rng):
    mix = MixtureApprox.single(diag_component([0.0], 1.0))
    with pytest.raises(ValueError):
        importance_weights(NowhereTarget(), mix, 1, rng)
    with pytest.raises(InitializationError):
        importance_weights(NowhereTarget(), mix, 50, rng)


def test_outlier_indices():
    points = np.arange(10.0)[:, None]
    weights = np.full(10, 0.5 / 9)
    weights[3] = 0.5
    ws = WeightedSample(points, weights)

    np.testing.assert_array_equal(outlier_indices(ws, c=2.0), [3])
    assert outlier_indices(ws, c=10.0).size == 0
    assert outlier_indices(uniform_sample(points)).size == 0
    with pytest.raises(ValueError):
        outlier_indices(ws, c=1.0)


def test_build_iw_proposal_without_outliers_is_identity(rng):
    mix = random_mixture(rng, 2, 3, 1)
    ws = uniform_sample(rng.standard_normal((20, 3)))
    assert build_iw_proposal(mix, ws, []) is mix


def test_build_iw_proposal_bumps(rng):
    mix = random_mixture(rng, 2, 2, 1)
    points = rng.standard_normal((4, 2))
    ws = WeightedSample(points, np.array([0.1, 0.5, 0.1, 0.3]))

    proposal = build_iw_proposal(mix, ws, [1, 3], var_scale=2.0)
    assert proposal.n_components == 4
    np.testing.assert_allclose(proposal.weights[:2], 0.2 * mix.weights, rtol=1e-12)
    np.testing.assert_allclose(proposal.weights[2:], [0.5, 0.3], rtol=1e-12)
    for bump, index in zip(proposal.components[2:], [1, 3]):
        np.testing.assert_array_equal(bump.mean, points[index])
        assert bump.rank == 0
        np.testing.assert_allclose(
            bump.cov.marginal_variances(), 2.0 * mix.marginal_variances(), rtol=1e-12
        )


def test_build_iw_proposal_rejects_all_mass_on_outliers(rng):
    mix = random_mixture(rng, 1, 1, 0)
    ws = WeightedSample(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    with pytest.raises(InitializationError):
        build_iw_proposal(mix, ws, [0, 1])


def test_weighted_em_single_block_is_weighted_moments(rng):
    points = rng.standard_normal((200, 2)) * [1.0, 3.0] + [1.0, -1.0]
    weights = rng.dirichlet(np.ones(200))
    result = weighted_em(points, weights, None)

    mean = weights @ points
    np.testing.assert_allclose(result.component.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(
        result.component.cov.marginal_variances(), weights @ (points - mean) ** 2, rtol=1e-12
    )
    assert result.rho == 0.95
    assert len(result.log_likelihoods) == 2


def test_weighted_em_recovers_free_cluster():
    rng = np.random.default_rng(4)
    points = np.concatenate(
        [rng.normal(-3.0, 0.5, size=(300, 1)), rng.normal(3.0, 1.0, size=(700, 1))]
    )
    weights = np.full(1000, 1e-3)
    background = MixtureApprox.single(diag_component([3.0], 1.0))

    component, rho = weighted_em(points, weights, background)
    assert component.mean[0] == pytest.approx(-3.0, abs=0.1)
    assert math.sqrt(component.cov.marginal_variances()[0]) == pytest.approx(0.5, abs=0.1)
    assert rho == pytest.approx(0.3, abs=0.05)


def test_weighted_em_log_likelihood_never_decreases():
    rng = np.random.default_rng(6)
    points = np.concatenate([rng.normal(-1.0, 1.0, (150, 2)), rng.normal(2.0, 0.5, (150, 2))])
    weights = rng.dirichlet(np.full(300, 5.0))
    background = MixtureApprox.single(diag_component([2.0, 2.0], 0.3))

    history = weighted_em(points, weights, background).log_likelihoods
    assert len(history) >= 2
    assert np.all(np.diff(history) >= -1e-10)


def test_weighted_em_leaves_symmetric_start(bimodal_1d):
    # grid weighted by the target: the global moments sit midway between the modes
    points = np.linspace(-6.0, 6.0, 601)[:, None]
    weights = np.exp(bimodal_1d.log_density(points))
    weights /= np.sum(weights)
    straddle = MixtureApprox.single(diag_component([0.0], 4.25))

    result = weighted_em(points, weights, straddle)
    assert abs(result.component.mean[0]) == pytest.approx(2.0, abs=0.2)
    assert result.component.cov.marginal_variances()[0] < 1.0
    assert 0.3 <= result.rho <= 0.7
    assert np.all(np.diff(result.log_likelihoods) >= -1e-10)


def test_weighted_em_start_weight():
    rng = np.random.default_rng(4)
    points = np.concatenate(
        [rng.normal(-3.0, 0.5, size=(300, 1)), rng.normal(3.0, 1.0, size=(700, 1))]
    )
    weights = np.full(1000, 1e-3)
    background = MixtureApprox.single(diag_component([3.0], 1.0))

    one_step = EmConfig(max_iters=1)
    assert weighted_em(points, weights, background, one_step, rho=0.2).log_likelihoods != (
        weighted_em(points, weights, background, one_step, rho=0.8).log_likelihoods
    )
    converged = weighted_em(points, weights, background, rho=0.8)
    assert converged.rho == pytest.approx(0.3, abs=0.05)


def test_weighted_em_clips_weight_and_warns(caplog):
    rng = np.random.default_rng(2)
    points = rng.normal(0.0, 1.0, size=(200, 1))
    background = MixtureApprox.single(diag_component([40.0], 1.0))

    with caplog.at_level(logging.WARNING, logger="vboost"):
        result = weighted_em(points, np.full(200, 0.005), background)
    assert result.rho == 0.95
    assert "clipped" in caplog.text


def test_weighted_em_rejects_degenerate_weights():
    points = np.arange(6.0).reshape(3, 2)
    with pytest.raises(InitializationError):
        weighted_em(points, np.array([1.0, 0.0, 0.0]), None)
    with pytest.raises(ValueError):
        weighted_em(points, np.ones(2) / 2, None)


def test_attach_factors(rng):
    comp = diag_component([0.0, 1.0, 2.0], 2.0)
    wide = attach_factors(comp, 2, rng)
    assert wide.rank == 2
    assert np.max(np.abs(wide.cov.factors)) < 0.1
    np.testing.assert_array_equal(wide.mean, comp.mean)
    np.testing.assert_array_equal(wide.cov.log_diag, comp.cov.log_diag)
    assert attach_factors(comp, 0, rng).rank == 0


def test_defensive_proposal():
    mix = MixtureApprox(
        np.array([0.4, 0.6]), (diag_component([0.0], 1.0), diag_component([5.0], 2.0))
    )
    assert _defensive_proposal(mix, EmConfig(defensive_fraction=0.0)) is mix

    proposal = _defensive_proposal(mix, EmConfig(defensive_fraction=0.25, defensive_scale=3.0))
    np.testing.assert_allclose(proposal.weights, [0.3, 0.45, 0.1, 0.15], rtol=1e-12)
    np.testing.assert_allclose(
        proposal.components[3].cov.marginal_variances(), [18.0], rtol=1e-12
    )


def test_init_component_finds_missing_mode(bimodal_1d):
    collapsed = MixtureApprox.single(diag_component([2.0], 0.25))
    component, rho = init_component(
        bimodal_1d, collapsed, 1000, EmConfig(), np.random.default_rng(0), rank=1
    )
    assert component.mean[0] == pytest.approx(-2.0, abs=0.3)
    assert component.rank == 1
    assert 0.3 <= rho <= 0.7


def test_init_component_from_straddling_fit(bimodal_1d):
    straddle = MixtureApprox.single(diag_component([0.0], 5.0))
    for seed in range(3):
        component, rho = init_component(
            bimodal_1d, straddle, 1000, EmConfig(), np.random.default_rng(seed)
        )
        assert abs(component.mean[0]) == pytest.approx(2.0, abs=0.5)
        assert component.cov.marginal_variances()[0] < 2.0
        assert EmConfig().rho_min <= rho <= EmConfig().rho_max


def test_init_component_needs_ten_samples(bimodal_1d, rng):
    collapsed = MixtureApprox.single(diag_component([2.0], 0.25))
    with pytest.raises(ValueError):
        init_component(bimodal_1d, collapsed, 9, EmConfig(), rng)


def test_max_weight_init(bimodal_1d):
    wide = MixtureApprox.single(diag_component([2.0], 9.0))
    component = max_weight_init(bimodal_1d, wide, 1000, np.random.default_rng(0), rank=2)
    assert component.mean[0] == pytest.approx(-2.1, abs=0.3)
    assert component.cov.log_diag[0] == pytest.approx(math.log(9.0), rel=1e-12)
    assert component.rank == 2

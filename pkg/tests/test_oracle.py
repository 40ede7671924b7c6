import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import norm

from tests.fixtures.target_fixtures import bimodal_1d, diag_component, random_mixture, rng
from vboost import MixtureApprox, gauss_target
from vboost.exceptions import EstimatorError, GridTooSmallError
from vboost.models import MhChain
from vboost.oracle import (
    QuadratureGrid,
    chain_moment_table,
    effective_sample_size,
    kl_q_to_target,
    mixture_moment_table,
    moment_table,
    quadrature_moments,
    rwm_sample,
)
from vboost.targets import TargetModel

CORRELATED_COV = np.array([[1.0, 0.6], [0.6, 2.0]])


class ShiftedGaussian(TargetModel):
    """Standard normal density times e^3"""

    dim = 1

    def log_density(self, x):
        x = np.atleast_2d(x)
        return 3.0 - 0.5 * (math.log(2.0 * math.pi) + x[:, 0] ** 2)

    def grad_log_density(self, x):
        return -np.atleast_2d(x)


@pytest.mark.parametrize(
    "bounds, counts",
    [
        (((0.0, 1.0),), (10,)),
        (((0.0, 1.0),), (9,)),
        (((1.0, 0.0),), (11,)),
        (((0.0, np.inf),), (11,)),
        (((0.0, 1.0),) * 3, (11,) * 3),
        (((0.0, 1.0),), (11, 11)),
    ],
)
def test_grid_validation(bounds, counts):
    with pytest.raises(ValueError):
        QuadratureGrid(bounds, counts)


def test_grid_layout():
    grid = QuadratureGrid(((0.0, 2.0), (0.0, 3.0)), (11, 13))
    points = grid.points()
    assert points.shape == (143, 2)
    np.testing.assert_array_equal(points[0], [0.0, 0.0])
    np.testing.assert_allclose(points[1], [0.0, 0.25])
    assert grid.integrate(np.ones(143)) == pytest.approx(6.0, rel=1e-14)
    assert np.count_nonzero(grid.boundary_mask()) == 143 - 9 * 11


def test_grid_around():
    grid = QuadratureGrid.around([1.0, -2.0], [0.5, 2.0], width=4.0, points=21)
    assert grid.bounds == ((-1.0, 3.0), (-10.0, 6.0))
    assert grid.counts == (21, 21)


def test_quadrature_moments_of_gaussian():
    target = gauss_target([0.5, -1.0], CORRELATED_COV)
    grid = QuadratureGrid.around(target.reference_mean, np.sqrt(np.diag(CORRELATED_COV)))
    moments = quadrature_moments(target, grid)
    assert moments.log_normalizer == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(moments.mean, [0.5, -1.0], atol=1e-8)
    np.testing.assert_allclose(moments.cov, CORRELATED_COV, atol=1e-6)


def test_quadrature_moments_of_bimodal(bimodal_1d):
    moments = quadrature_moments(bimodal_1d, QuadratureGrid.around([0.0], [1.0]))
    assert moments.mean[0] == pytest.approx(0.0, abs=1e-10)
    assert moments.cov[0, 0] == pytest.approx(4.25, rel=1e-6)


def test_quadrature_recovers_log_normalizer():
    moments = quadrature_moments(ShiftedGaussian(), QuadratureGrid.around([0.0], [1.0]))
    assert moments.log_normalizer == pytest.approx(3.0, abs=1e-8)


def test_quadrature_rejects_narrow_grid(bimodal_1d):
    with pytest.raises(GridTooSmallError):
        quadrature_moments(bimodal_1d, QuadratureGrid(((-1.0, 1.0),), (101,)))


def test_quadrature_rejects_mismatched_dimension(bimodal_1d):
    with pytest.raises(ValueError):
        quadrature_moments(bimodal_1d, QuadratureGrid.around([0.0, 0.0], [1.0, 1.0]))


def test_kl_of_exact_fit_is_zero():
    target = gauss_target([0.0], [[2.0]])
    q = MixtureApprox.single(diag_component([0.0], 2.0))
    grid = QuadratureGrid.around([0.0], [math.sqrt(2.0)])
    assert kl_q_to_target(q, target, grid) == pytest.approx(0.0, abs=1e-10)


def test_kl_matches_closed_form():
    target = gauss_target([1.0], [[4.0]])
    q = MixtureApprox.single(diag_component([0.0], 1.0))
    expected = math.log(2.0) + (1.0 + 1.0) / 8.0 - 0.5
    grid = QuadratureGrid.around([0.5], [2.0], points=2001)
    assert kl_q_to_target(q, target, grid) == pytest.approx(expected, abs=1e-6)


def test_kl_is_invariant_to_target_normalizer():
    q = MixtureApprox.single(diag_component([0.3], 0.8))
    grid = QuadratureGrid.around([0.0], [1.0])
    normalized = kl_q_to_target(q, gauss_target([0.0], [[1.0]]), grid)
    assert kl_q_to_target(q, ShiftedGaussian(), grid) == pytest.approx(normalized, abs=1e-10)


def test_kl_of_mode_collapse(bimodal_1d):
    collapsed = MixtureApprox.single(diag_component([2.0], 0.25))
    grid = QuadratureGrid.around([0.0], [1.0])
    kl = kl_q_to_target(collapsed, bimodal_1d, grid)

    # the far mode adds a little mass under q, so the exact value sits just below ln 2
    x = np.linspace(-10.0, 10.0, 400_001)
    log_q = norm.logpdf(x, 2.0, 0.5)
    log_target = np.logaddexp(norm.logpdf(x, -2.0, 0.5), norm.logpdf(x, 2.0, 0.5)) - math.log(2.0)
    brute_force = trapezoid(np.exp(log_q) * (log_q - log_target), x)

    assert kl == pytest.approx(brute_force, abs=1e-6)
    assert math.log(2.0) - 1e-3 < kl < math.log(2.0)


def test_rwm_sample_moments():
    target = gauss_target([1.0, -1.0], CORRELATED_COV)
    chain = rwm_sample(target, 60_000, 10_000, 0.1, np.random.default_rng(0))
    assert chain.samples.shape == (50_000, 2)
    assert 0.15 <= chain.acceptance_rate <= 0.5

    table = chain_moment_table(chain)
    expected = moment_table([1.0, -1.0], CORRELATED_COV)
    deviation = np.abs(table["value"] - expected["value"])
    assert np.all(deviation <= 5.0 * table["se"] + 1e-3)


def test_rwm_sample_is_deterministic():
    target = gauss_target([0.0], [[1.0]])
    first = rwm_sample(target, 500, 200, 0.5, np.random.default_rng(3))
    second = rwm_sample(target, 500, 200, 0.5, np.random.default_rng(3))
    np.testing.assert_array_equal(first.samples, second.samples)


def test_rwm_sample_validation():
    target = gauss_target([0.0], [[1.0]])
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        rwm_sample(target, 100, 100, 0.5, rng)
    with pytest.raises(ValueError):
        rwm_sample(target, 100, 10, 0.0, rng)

    class Nowhere(ShiftedGaussian):
        def log_density(self, x):
            return np.full(np.atleast_2d(x).shape[0], -np.inf)

    with pytest.raises(EstimatorError):
        rwm_sample(Nowhere(), 100, 10, 0.5, rng)


def test_effective_sample_size_of_independent_draws(rng):
    draws = rng.standard_normal(20_000)
    assert effective_sample_size(draws) == pytest.approx(20_000, rel=0.15)


def test_effective_sample_size_of_autocorrelated_draws(rng):
    phi = 0.9
    noise = rng.standard_normal(100_000)
    draws = np.empty_like(noise)
    draws[0] = noise[0]
    for t in range(1, draws.shape[0]):
        draws[t] = phi * draws[t - 1] + noise[t]
    expected = draws.shape[0] * (1.0 - phi) / (1.0 + phi)
    assert effective_sample_size(draws) == pytest.approx(expected, rel=0.25)


def test_effective_sample_size_of_constant_chain():
    assert effective_sample_size(np.ones(50)) == 50.0


def test_moment_table_layout():
    dim = 20
    table = moment_table(np.zeros(dim), np.eye(dim))
    assert list(table.columns) == ["statistic", "value", "se"]
    assert len(table) == 2 * dim + dim * (dim - 1) // 2 == 230
    assert table["statistic"].iloc[0] == "mean[0]"
    assert table["statistic"].iloc[dim] == "std[0]"
    assert table["statistic"].iloc[2 * dim] == "cov[0,1]"
    assert table["statistic"].iloc[-1] == "cov[18,19]"


def test_chain_moment_table_standard_errors(rng):
    chain = MhChain(rng.standard_normal((4000, 3)), 0.3, np.ones(3))
    table = chain_moment_table(chain)
    assert len(table) == 9
    assert np.all(table["se"] > 0)
    mean_se = table.loc[table["statistic"] == "mean[0]", "se"].iloc[0]
    assert mean_se == pytest.approx(1.0 / math.sqrt(4000), rel=0.25)


def test_mixture_moment_table(rng):
    mix = random_mixture(rng, 2, 3, 1)
    table = mixture_moment_table(mix)
    np.testing.assert_allclose(table["value"].iloc[:3], mix.mean(), rtol=1e-14)
    np.testing.assert_allclose(
        table["value"].iloc[3:6], np.sqrt(mix.marginal_variances()), rtol=1e-10
    )
    assert np.all(table["se"] == 0.0)

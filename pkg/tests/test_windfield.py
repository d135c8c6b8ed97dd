import math
from collections import Counter

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gamma as gamma_fn
from scipy.spatial import cKDTree
from scipy.stats import spearmanr

from config import WindfieldSection
from windstorm.ellipse import Ellipse, FootprintFeatures
from windstorm.errors import FitError
from windstorm.kde import build_kde
from windstorm.windfield import (AlphaModel, FootprintBank, FootprintDistribution, GpParams, anisotropic_distance,
                                 empirical_variogram, estimate_alpha, fit_footprint_distribution, matern,
                                 normal_scores, simulate_conditional_field, simulate_gaussian_field)


def _grid_cells(n_x: int, n_y: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n_y, 0:n_x]
    return np.column_stack([xx.ravel(), yy.ravel()]).astype(float)


def test_matern_half_is_exponential():
    assert matern(2.0, alpha=2.0, kappa=0.5) == pytest.approx(math.exp(-1.0))


def test_matern_matches_integral_representation():
    kappa, u, alpha = 0.6, 3.0, 2.0
    x = u / alpha
    bessel, _ = quad(lambda s: math.exp(-x * math.cosh(s)) * math.cosh(kappa * s), 0.0, np.inf)
    expected = 2 ** (1 - kappa) / gamma_fn(kappa) * x ** kappa * bessel
    assert matern(u, alpha, kappa) == pytest.approx(expected, rel=1e-8)


def test_matern_at_zero_and_vectorised():
    assert matern(0.0, alpha=5.0) == 1.0
    values = matern(np.array([0.0, 1.0, 10.0]), alpha=2.0)
    assert values[0] == 1.0
    assert np.all(np.diff(values) < 0)


def test_matern_rejects_bad_parameters():
    with pytest.raises(ValueError):
        matern(1.0, alpha=0.0)
    with pytest.raises(ValueError):
        matern(1.0, alpha=1.0, kappa=-0.5)


def test_anisotropic_distance():
    assert anisotropic_distance([1.0, 0.0], [0.0, 0.0], psi=0.0, zeta=2.0) == pytest.approx(1.0)
    assert anisotropic_distance([0.0, 1.0], [0.0, 0.0], psi=0.0, zeta=2.0) == pytest.approx(2.0)
    assert anisotropic_distance([1.0, 0.0], [0.0, 0.0], psi=math.pi / 2, zeta=2.0) == pytest.approx(2.0)
    assert anisotropic_distance([3.0, 4.0], [0.0, 0.0], psi=0.7, zeta=1.0) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        anisotropic_distance([1.0, 0.0], [0.0, 0.0], psi=0.0, zeta=0.5)


def test_gp_params_follow_footprint():
    features = FootprintFeatures(t=1, a=6.0, b=2.0, w=5.0, r_e=3.0, theta_e=0.4, r_w=0.0, theta_w=0.0, gamma=0.1)
    gp = GpParams.for_footprint(features, 3.0, WindfieldSection())
    assert (gp.kappa, gp.alpha, gp.psi, gp.zeta) == (0.6, 3.0, 0.4, 3.0)


def test_variogram_of_a_linear_trend():
    cells = np.column_stack([np.arange(100.0), np.zeros(100)])
    lags, semivariance, counts = empirical_variogram(cells[:, 0], cells, psi=0.0, zeta=1.0, n_bins=15)
    assert counts.sum() == 3675
    assert np.all(np.diff(semivariance) > 0)
    assert semivariance[0] == pytest.approx(0.5 * np.mean(np.arange(1, 4) ** 2), rel=0.2)
    assert lags[0] < lags[-1]


def test_variogram_of_constant_field_is_zero():
    cells = _grid_cells(10, 10)
    _, semivariance, _ = empirical_variogram(np.full(100, 2.5), cells, psi=0.0, zeta=1.0)
    np.testing.assert_allclose(semivariance[np.isfinite(semivariance)], 0.0)


def test_alpha_is_recovered_from_simulated_fields():
    cells = _grid_cells(30, 30)
    gp = GpParams(kappa=0.6, alpha=3.0, psi=0.0, zeta=1.0)
    estimates = []
    for seed in range(3):
        field = simulate_gaussian_field(cells, gp, np.random.default_rng(seed))
        estimates.append(estimate_alpha(field, cells, psi=0.0, zeta=1.0))
    assert 1.5 < np.median(estimates) < 6.0


def test_alpha_needs_structure_and_cells(rng):
    cells = _grid_cells(20, 20)
    with pytest.raises(FitError):
        estimate_alpha(np.full(400, 1.0), cells, psi=0.0, zeta=1.0)
    with pytest.raises(FitError):
        estimate_alpha(rng.normal(size=50), cells[:50], psi=0.0, zeta=1.0)


def test_conditioning_values_are_kept():
    cells = _grid_cells(12, 12)
    gp = GpParams(kappa=0.6, alpha=2.0, psi=0.3, zeta=1.5)
    conditions = (np.array([0, 50, 143]), np.array([1.5, -0.5, 0.2]))
    field = simulate_gaussian_field(cells, gp, np.random.default_rng(1), conditions)
    np.testing.assert_allclose(field[[0, 50, 143]], [1.5, -0.5, 0.2])
    coarse = simulate_gaussian_field(cells, gp, np.random.default_rng(1), conditions, exact_max_cells=40)
    np.testing.assert_allclose(coarse[[0, 50, 143]], [1.5, -0.5, 0.2])
    assert np.isfinite(coarse).all()


def test_invalid_cells_are_rejected(rng):
    gp = GpParams(kappa=0.6, alpha=2.0, psi=0.0, zeta=1.0)
    with pytest.raises(ValueError):
        simulate_gaussian_field(np.empty((0, 2)), gp, rng)


def test_distribution_midpoint_cdf():
    dist = FootprintDistribution.from_weighted_sample([3.0, 1.0, 2.0], [1.0, 1.0, 1.0])
    assert dist.cdf(2.0) == pytest.approx(0.5)
    assert dist.quantile(0.5) == pytest.approx(2.0)
    assert dist.top_probability == pytest.approx(5 / 6)
    assert dist.cdf(dist.nodes[0]) == 0.0


def test_distribution_is_bounded_by_the_maximum():
    dist = FootprintDistribution.from_weighted_sample([1.0, 2.0, 5.0], [1.0, 1.0, 1.0], upper=3.0)
    assert dist.values.tolist() == [1.0, 2.0]
    assert dist.nodes[-1] == 3.0
    assert dist.cdf(3.0) == 1.0


def test_distribution_merges_ties_and_handles_empty_input():
    dist = FootprintDistribution.from_weighted_sample([2.0, 2.0, 4.0], [1.0, 1.0, 2.0])
    assert dist.values.tolist() == [2.0, 4.0]
    np.testing.assert_allclose(dist.weights, [0.5, 0.5])
    only = FootprintDistribution.from_weighted_sample([9.0], [1.0], upper=4.0)
    assert only.values.tolist() == [4.0]
    with pytest.raises(ValueError):
        FootprintDistribution.from_weighted_sample([], [])


def _bank() -> FootprintBank:
    values = np.array([1.0, 2.0, 3.0, 7.0, 8.0])
    owners = np.array([0, 0, 0, 1, 1])
    covariates = np.array([[5.0, 10.0, 0.5], [9.0, 40.0, 1.0]])
    return FootprintBank(values, owners, covariates)


def test_bank_weights_similar_footprints():
    dist = fit_footprint_distribution(_bank(), w=5.0, delta=10.0, omega=0.5)
    assert dist.values.tolist() == [1.0, 2.0, 3.0]


def test_bank_falls_back_to_nearest_footprint():
    counters = Counter()
    dist = fit_footprint_distribution(_bank(), w=1000.0, delta=10.0, omega=0.5, counters=counters)
    assert dist.values.tolist() == [7.0, 8.0]
    assert counters["bank_nearest"] == 1


def test_bank_round_trip():
    bank = _bank()
    copy = FootprintBank.from_arrays(bank.to_arrays())
    np.testing.assert_array_equal(copy.values, bank.values)
    assert copy.n_footprints == 2
    with pytest.raises(ValueError):
        FootprintBank(np.ones(2), np.zeros(2), np.ones((1, 2)))


def test_normal_scores_are_symmetric():
    scores = normal_scores([3.0, 1.0, 2.0])
    assert scores[2] == pytest.approx(0.0)
    assert scores[0] == pytest.approx(-scores[1])


def test_alpha_model_samples_positive_ranges(rng):
    pairs = np.column_stack([rng.uniform(2.0, 6.0, 40), rng.uniform(20.0, 80.0, 40)])
    model = AlphaModel(build_kde(pairs, labels=("alpha", "delta")))
    draws = [model.sample(50.0, rng) for _ in range(50)]
    assert min(draws) > 0


@pytest.fixture
def conditional_setup():
    ellipse = Ellipse.from_geometry((20.0, 15.0), 8.0, 5.0, 0.3)
    features = FootprintFeatures(t=1, a=8.0, b=5.0, w=6.0, r_e=13.0, theta_e=0.0, r_w=2.0, theta_w=0.0, gamma=0.3)
    sample = np.random.default_rng(3).exponential(size=500)
    dist = FootprintDistribution.from_weighted_sample(sample, np.ones(500), upper=6.0)
    gp = GpParams(kappa=0.6, alpha=3.0, psi=0.0, zeta=1.6)
    return ellipse, features, dist, gp


def test_conditional_field_pins_the_maximum(conditional_setup):
    ellipse, features, dist, gp = conditional_setup
    counters = Counter()
    cells, values = simulate_conditional_field(ellipse, features, gp, dist, (20.0, 2.0), np.random.default_rng(5),
                                               shape=(30, 40), counters=counters)
    i_max = cells.tolist().index([20, 13])
    assert values[i_max] == 6.0
    assert values.max() == 6.0
    assert values.min() >= dist.lower - 1e-9
    _, perimeter = cKDTree(cells).query(ellipse.boundary(720))
    perimeter = np.setdiff1d(perimeter, [i_max])
    np.testing.assert_allclose(values[perimeter], dist.lower, atol=1e-6)


def test_conditional_field_is_reproducible(conditional_setup):
    ellipse, features, dist, gp = conditional_setup
    first = simulate_conditional_field(ellipse, features, gp, dist, (20.0, 2.0), np.random.default_rng(9),
                                       shape=(30, 40))
    second = simulate_conditional_field(ellipse, features, gp, dist, (20.0, 2.0), np.random.default_rng(9),
                                        shape=(30, 40))
    np.testing.assert_array_equal(first[1], second[1])


def test_storm_inside_the_footprint_adds_a_low_region(conditional_setup):
    ellipse, features, dist, gp = conditional_setup
    config = WindfieldSection(min_region_a=3.0, min_region_b=3.0, min_region_rate=100.0)
    cells, values = simulate_conditional_field(ellipse, features, gp, dist, (20.0, 17.0), np.random.default_rng(2),
                                               shape=(30, 40), config=config)
    centre = cells.tolist().index([20, 17])
    assert values[centre] == pytest.approx(dist.lower, abs=1e-6)


def test_alpha_model_follows_a_planted_association(rng):
    delta = rng.uniform(20.0, 80.0, 150)
    alpha = 1.0 + 0.05 * delta + rng.normal(scale=0.3, size=150)
    model = AlphaModel(build_kde(np.column_stack([alpha, delta]), labels=("alpha", "delta")))
    grid = np.repeat(np.linspace(25.0, 75.0, 11), 20)
    draws = [model.sample(d, rng) for d in grid]
    assert spearmanr(grid, draws).correlation > 0.5


@pytest.mark.slow
def test_replicates_match_the_matern_correlation():
    cells = _grid_cells(10, 10)
    gp = GpParams(kappa=0.6, alpha=3.0, psi=0.0, zeta=1.0)
    rng = np.random.default_rng(17)
    fields = np.array([simulate_gaussian_field(cells, gp, rng) for _ in range(2000)])
    first, second = 4 * 10 + 3, 4 * 10 + 6
    empirical = np.corrcoef(fields[:, first], fields[:, second])[0, 1]
    assert abs(empirical - matern(3.0, 3.0, 0.6)) < 0.05
    interior = ((cells[:, 0] >= 2) & (cells[:, 0] <= 7) & (cells[:, 1] >= 2) & (cells[:, 1] <= 7))
    variances = fields[:, interior].var(axis=0)
    assert np.all(np.abs(variances - 1.0) < 0.15)

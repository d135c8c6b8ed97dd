import math
from collections import Counter

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import chisquare, norm

from windstorm.kde import (KdeModel, build_kde, conditional_density, conditional_mean, conditional_sample,
                           conditional_weights, kde_density, scott_bandwidth)


def test_scott_bandwidth_one_dimension(rng):
    data = rng.standard_normal(10_000)
    expected = 10_000 ** (-2 / 5) * np.var(data, ddof=1)
    assert scott_bandwidth(data)[0, 0] == pytest.approx(expected, rel=1e-12)


def test_zero_factor_is_rejected(rng):
    with pytest.raises(ValueError):
        scott_bandwidth(rng.standard_normal(50), factor=0.0)


def test_bandwidth_follows_covariance(rng):
    data = rng.standard_normal((20_000, 2)) * [2.0, 1.0]
    h = scott_bandwidth(data)
    assert h[0, 0] / h[1, 1] == pytest.approx(4.0, rel=0.05)
    assert abs(h[0, 1]) < 0.05 * h[1, 1]


def test_singular_covariance_gets_a_ridge():
    data = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
    h = scott_bandwidth(data)
    assert np.linalg.eigvalsh(h).min() > 0


def test_kernel_at_zero_for_single_point():
    h = np.array([[2.0, 0.3], [0.3, 1.0]])
    model = KdeModel(np.array([[1.0, -1.0]]), h)
    expected = (2 * math.pi) ** -1 * np.linalg.det(h) ** -0.5
    assert kde_density(model, [1.0, -1.0]) == pytest.approx(expected)


def test_two_point_density():
    model = KdeModel(np.array([[-1.0], [1.0]]), np.array([[1.0]]))
    assert kde_density(model, [0.0]) == pytest.approx(norm.pdf(1.0))
    assert kde_density(model, [0.0]) == pytest.approx(0.2420, abs=1e-4)


def test_density_integrates_to_one(rng):
    model = build_kde(rng.normal(size=200))
    grid = np.linspace(-10, 10, 4001)
    values = [kde_density(model, [x]) for x in grid]
    assert trapezoid(values, grid) == pytest.approx(1.0, abs=1e-3)


def test_diagonal_bandwidth_conditional_mean_is_data_value():
    data = np.array([[0.0, 5.0], [10.0, -3.0]])
    model = KdeModel(data, np.diag([1.0, 0.5]))
    np.testing.assert_allclose(conditional_mean(model, [0], [0.0]), [5.0], atol=1e-12)


def test_single_point_conditional_matches_bivariate_gaussian():
    h = np.array([[1.0, 0.6], [0.6, 2.0]])
    model = KdeModel(np.array([[0.0, 1.0]]), h)
    rng = np.random.default_rng(5)
    draws = np.array([conditional_sample(model, [0], [1.5], rng)[0] for _ in range(20_000)])
    mean = 1.0 + 0.6 / 1.0 * 1.5
    sd = math.sqrt(2.0 - 0.6 ** 2 / 1.0)
    assert abs(draws.mean() - mean) < 3 * sd / math.sqrt(draws.size)
    assert draws.std() == pytest.approx(sd, rel=0.03)


def test_weights_sum_to_one(rng):
    model = build_kde(rng.normal(size=(100, 3)))
    rows, weights = conditional_weights(model, [0, 2], [0.1, -0.2])
    assert rows.size == 100
    assert weights.sum() == pytest.approx(1.0)
    assert (weights >= 0).all()


def test_far_conditioning_point_uses_nearest_component():
    data = np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 3.0]])
    model = KdeModel(data, np.diag([1e-4, 1.0]))
    counters = Counter()
    rows, weights = conditional_weights(model, [0], [50.0], counters=counters)
    assert rows.tolist() == [2]
    assert weights.tolist() == [1.0]
    assert counters["kde_nearest"] == 1


def test_subset_restricts_components():
    data = np.array([[0.0, 10.0], [0.1, 20.0], [0.2, 30.0]])
    model = KdeModel(data, np.diag([1.0, 1e-6]))
    rng = np.random.default_rng(0)
    draws = [conditional_sample(model, [0], [0.1], rng, subset=np.array([1]))[0] for _ in range(20)]
    np.testing.assert_allclose(draws, 20.0, atol=0.01)


def test_samples_match_conditional_density():
    rng = np.random.default_rng(11)
    data = rng.normal(size=(30, 2)) @ np.array([[1.0, 0.5], [0.0, 1.0]])
    model = build_kde(data)
    draws = np.array([conditional_sample(model, [0], [0.3], rng)[0] for _ in range(20_000)])
    edges = np.quantile(draws, np.linspace(0, 1, 21))
    observed, _ = np.histogram(draws, edges)
    expected = []
    for lower, upper in zip(edges[:-1], edges[1:]):
        grid = np.linspace(lower, upper, 41)
        expected.append(trapezoid([conditional_density(model, [0], [0.3], [z]) for z in grid], grid))
    expected = np.asarray(expected) / np.sum(expected) * observed.sum()
    assert chisquare(observed, expected).pvalue > 0.01


def test_circular_dimension_is_shift_invariant(rng):
    angles = rng.vonmises(0.5, 2.0, size=50)
    other = rng.normal(size=50)
    shift = 2.0
    model = build_kde(np.column_stack([angles, other]), circular_dims=[0])
    shifted = build_kde(np.column_stack([angles + shift, other]), circular_dims=[0])
    assert kde_density(model, [0.2, 0.1]) == pytest.approx(kde_density(shifted, [0.2 + shift, 0.1]), rel=1e-9)


def test_circular_samples_are_wrapped():
    model = KdeModel(np.array([[0.0, 3.1]]), np.diag([1.0, 0.5]), circular_dims=(1,))
    rng = np.random.default_rng(3)
    draws = np.array([conditional_sample(model, [0], [0.0], rng)[0] for _ in range(200)])
    assert (draws > -math.pi).all() and (draws <= math.pi).all()


def test_model_arrays_round_trip(rng):
    model = build_kde(rng.normal(size=(20, 3)), circular_dims=[1], labels=("a", "b", "c"))
    copy = KdeModel.from_arrays(model.to_arrays())
    assert copy.labels == ("a", "b", "c")
    assert copy.circular_dims == (1,)
    assert kde_density(copy, [0.0, 0.1, 0.2]) == pytest.approx(kde_density(model, [0.0, 0.1, 0.2]))


def test_conditioner_is_cached(rng):
    model = build_kde(rng.normal(size=(20, 3)))
    assert model.conditioner((0, 1)) is model.conditioner((0, 1))


def test_conditioning_on_every_dimension_is_rejected(rng):
    model = build_kde(rng.normal(size=(20, 2)))
    with pytest.raises(ValueError):
        model.conditioner((0, 1))


def test_weights_follow_a_permutation_of_the_data(rng):
    data = rng.normal(size=(60, 3))
    bandwidth = scott_bandwidth(data)
    perm = rng.permutation(60)
    _, weights = conditional_weights(KdeModel(data, bandwidth), [0], [0.3])
    _, permuted = conditional_weights(KdeModel(data[perm], bandwidth), [0], [0.3])
    np.testing.assert_allclose(permuted, weights[perm], rtol=1e-10, atol=1e-15)


def test_narrow_bandwidth_reproduces_a_single_trajectory():
    t = np.arange(31)
    series = 0.2 * t + 0.05 * np.sin(t)
    model = build_kde(np.column_stack([series[:-1], series[1:]]), factor=1e-3)
    rng = np.random.default_rng(8)
    path = [series[0]]
    for _ in range(30):
        path.append(conditional_sample(model, [0], [path[-1]], rng)[0])
    np.testing.assert_allclose(path, series, atol=1e-2)

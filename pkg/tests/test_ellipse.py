import math

import numpy as np
import pytest
from scipy.optimize import minimize

from windstorm.ellipse import Ellipse, ellipse_to_features, khachiyan_mvee
from windstorm.errors import ExtractionError
from windstorm.utils import bearing_from_south, offset_from_bearing, wrap_angle, wrap_axial


def test_circle_is_its_own_enclosing_ellipse():
    phi = np.linspace(0, 2 * math.pi, 16, endpoint=False)
    points = np.column_stack([5 + np.cos(phi), 5 + np.sin(phi)])
    ellipse = khachiyan_mvee(points, tol=1e-7)
    np.testing.assert_allclose(ellipse.centre, [5.0, 5.0], atol=1e-3)
    np.testing.assert_allclose(ellipse.shape, np.eye(2), atol=1e-2)


def test_rectangle_corners():
    points = np.array([[-1.0, -2.0], [1.0, -2.0], [1.0, 2.0], [-1.0, 2.0]])
    ellipse = khachiyan_mvee(points, tol=1e-7)
    a, b, gamma = ellipse.geometry()
    np.testing.assert_allclose(ellipse.centre, [0.0, 0.0], atol=1e-6)
    assert a == pytest.approx(2 * math.sqrt(2), rel=0.01)
    assert b == pytest.approx(math.sqrt(2), rel=0.01)
    assert abs(gamma) < 1e-3


def _brute_force_area(points):
    """Minimiza el área de elipses (centro, factor de Cholesky) que contienen los puntos"""
    def unpack(params):
        centre = params[:2]
        lower = np.array([[math.exp(params[2]), 0.0], [params[3], math.exp(params[4])]])
        return centre, lower @ lower.T

    def objective(params):
        centre, shape = unpack(params)
        q = np.einsum("ij,jk,ik->i", points - centre, shape, points - centre)
        penalty = np.sum(np.clip(q - 1.0, 0.0, None) ** 2)
        return math.pi / math.sqrt(np.linalg.det(shape)) + 1e4 * penalty

    scale = np.ptp(points, axis=0).max()
    start = np.r_[points.mean(axis=0), -math.log(scale), 0.0, -math.log(scale)]
    best = minimize(objective, start, method="Nelder-Mead",
                    options={"maxiter": 40000, "xatol": 1e-10, "fatol": 1e-12})
    centre, shape = unpack(best.x)
    worst = np.einsum("ij,jk,ik->i", points - centre, shape, points - centre).max()
    return math.pi / math.sqrt(np.linalg.det(shape / max(worst, 1.0)))


@pytest.mark.parametrize("seed", range(10))
def test_area_matches_direct_minimization(seed):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(int(rng.integers(5, 13)), 2)) * [3.0, 1.5]
    ellipse = khachiyan_mvee(points, tol=1e-7)
    assert ellipse.contains(points, tol=1e-6).all()
    assert ellipse.area <= _brute_force_area(points) * 1.005


def test_collinear_points_are_padded():
    points = np.column_stack([np.arange(6.0), np.zeros(6)])
    ellipse = khachiyan_mvee(points)
    assert ellipse.contains(points).all()
    a, b, _ = ellipse.geometry()
    assert a > 2.5
    assert b > 0.45


def test_single_point():
    ellipse = khachiyan_mvee(np.array([[3.0, 4.0]]))
    np.testing.assert_allclose(ellipse.centre, [3.0, 4.0], atol=1e-6)


def test_empty_input_is_rejected():
    with pytest.raises(ValueError):
        khachiyan_mvee(np.empty((0, 2)))


def test_geometry_round_trip():
    gamma = math.radians(30)
    ellipse = Ellipse.from_geometry((0.0, 0.0), 4.0, 2.0, gamma)
    a, b, recovered = ellipse.geometry()
    assert a == pytest.approx(4.0, abs=1e-9)
    assert b == pytest.approx(2.0, abs=1e-9)
    assert recovered == pytest.approx(gamma, abs=1e-6)
    assert ellipse.delta == pytest.approx(8.0)


def test_major_axis_points_north_when_gamma_is_zero():
    ellipse = Ellipse.from_geometry((0.0, 0.0), 5.0, 1.0, 0.0)
    assert ellipse.contains([[0.0, 4.9]])[0]
    assert not ellipse.contains([[4.9, 0.0]])[0]


def test_boundary_points_lie_on_the_ellipse():
    ellipse = Ellipse.from_geometry((2.0, 3.0), 6.0, 2.5, 0.4)
    np.testing.assert_allclose(ellipse.quadratic_form(ellipse.boundary(72)), 1.0, atol=1e-9)


def test_cells_inside_are_clipped_to_grid():
    ellipse = Ellipse.from_geometry((0.0, 0.0), 3.0, 3.0, 0.0)
    cells = ellipse.cells_inside((10, 10))
    assert (cells >= 0).all()
    assert len(cells) == len({tuple(c) for c in cells})
    assert [0, 0] in cells.tolist()


def test_circle_centred_on_storm_has_zero_bearing():
    ellipse = Ellipse(np.array([4.0, 4.0]), np.eye(2))
    features = ellipse_to_features(ellipse, (4.0, 4.0), (4.0, 4.0), 3.0, t=1)
    assert features.r_e == 0.0
    assert features.a == pytest.approx(1.0)
    assert features.b == pytest.approx(1.0)
    assert features.gamma == 0.0


def test_ellipse_due_south_of_storm():
    ellipse = Ellipse(np.array([4.0, 3.0]), np.eye(2))
    features = ellipse_to_features(ellipse, (4.0, 4.0), (4.0, 3.0), 3.0, t=2)
    assert features.r_e == pytest.approx(1.0)
    assert features.theta_e == pytest.approx(0.0)


def test_features_rebuild_the_ellipse():
    ellipse = Ellipse.from_geometry((12.0, 7.0), 6.0, 3.0, -0.7)
    storm = np.array([9.0, 11.0])
    features = ellipse_to_features(ellipse, storm, (13.0, 8.0), 4.2, t=3)
    rebuilt = features.ellipse(storm)
    np.testing.assert_allclose(rebuilt.centre, ellipse.centre, atol=1e-9)
    np.testing.assert_allclose(rebuilt.shape, ellipse.shape, atol=1e-9)
    np.testing.assert_allclose(features.max_location(rebuilt.centre), [13.0, 8.0], atol=1e-9)


def test_max_outside_the_ellipse_is_an_error():
    ellipse = Ellipse(np.array([0.0, 0.0]), np.eye(2))
    with pytest.raises(ExtractionError):
        ellipse_to_features(ellipse, (0.0, 0.0), (3.0, 0.0), 1.0, t=1)


def test_bearing_conventions():
    assert bearing_from_south(0.0, -2.0) == pytest.approx((2.0, 0.0))
    assert bearing_from_south(1.0, 0.0)[1] == pytest.approx(math.pi / 2)
    assert bearing_from_south(-1.0, 0.0)[1] == pytest.approx(-math.pi / 2)
    np.testing.assert_allclose(offset_from_bearing(2.0, math.pi / 2), [2.0, 0.0], atol=1e-12)


def test_angle_wrapping():
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_axial(math.pi / 2 + 0.1) == pytest.approx(-math.pi / 2 + 0.1)


@pytest.mark.parametrize("seed", range(5))
def test_enclosing_ellipse_follows_rigid_motions(seed):
    rng = np.random.default_rng(100 + seed)
    points = rng.normal(size=(int(rng.integers(6, 13)), 2)) * [4.0, 1.5]
    angle = float(rng.uniform(-math.pi, math.pi))
    rotation = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    shift = rng.uniform(-50.0, 50.0, size=2)
    original = khachiyan_mvee(points, tol=1e-9)
    moved = khachiyan_mvee(points @ rotation.T + shift, tol=1e-9)
    assert moved.area == pytest.approx(original.area, rel=1e-3)
    np.testing.assert_allclose(moved.centre, rotation @ original.centre + shift, atol=1e-2)
    np.testing.assert_allclose(moved.shape, rotation @ original.shape @ rotation.T, rtol=1e-2, atol=1e-4)

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial import QhullError

from windstorm.errors import ConvergenceError, ExtractionError
from windstorm.utils import bearing_from_south, offset_from_bearing, wrap_axial

logger = logging.getLogger(__name__)

COLLINEAR_PAD = 0.5
MEMBERSHIP_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Ellipse:
    """Elipse {s : (s-c)^T E (s-c) <= 1} en coordenadas de celda (x este, y norte)"""
    centre: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        centre = np.asarray(self.centre, dtype=float).reshape(2)
        shape = np.asarray(self.shape, dtype=float).reshape(2, 2)
        shape = 0.5 * (shape + shape.T)
        if np.linalg.eigvalsh(shape).min() <= 0:
            raise ValueError(f"Matriz de forma no definida positiva: {shape.tolist()}")
        object.__setattr__(self, "centre", centre)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def from_geometry(cls, centre, a: float, b: float, gamma: float) -> "Ellipse":
        """Construye la elipse a partir de semiejes y orientación respecto al norte"""
        major = np.array([-math.sin(gamma), math.cos(gamma)])
        minor = np.array([math.cos(gamma), math.sin(gamma)])
        shape = np.outer(major, major) / a ** 2 + np.outer(minor, minor) / b ** 2
        return cls(np.asarray(centre, dtype=float), shape)

    def quadratic_form(self, points) -> np.ndarray:
        diff = np.atleast_2d(np.asarray(points, dtype=float)) - self.centre
        return np.einsum("ij,jk,ik->i", diff, self.shape, diff)

    def contains(self, points, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
        return self.quadratic_form(points) <= 1.0 + tol

    def geometry(self) -> Tuple[float, float, float]:
        """(A, B, Gamma): semiejes mayor/menor y orientación del eje mayor"""
        eigvals, eigvecs = np.linalg.eigh(self.shape)
        a = 1.0 / math.sqrt(eigvals[0])
        b = 1.0 / math.sqrt(eigvals[1])
        if math.isclose(a, b, rel_tol=1e-12):
            return a, b, 0.0
        vx, vy = eigvecs[:, 0]
        return a, b, wrap_axial(math.atan2(-vx, vy))

    @property
    def delta(self) -> float:
        """Delta = A*B (área proporcional, sin el factor pi)"""
        return 1.0 / math.sqrt(np.linalg.det(self.shape))

    @property
    def area(self) -> float:
        return math.pi * self.delta

    def boundary(self, n: int = 720) -> np.ndarray:
        a, b, gamma = self.geometry()
        phi = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        major = np.array([-math.sin(gamma), math.cos(gamma)])
        minor = np.array([math.cos(gamma), math.sin(gamma)])
        return self.centre + np.outer(a * np.cos(phi), major) + np.outer(b * np.sin(phi), minor)

    def cells_inside(self, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
        """Celdas enteras (x, y) dentro de la elipse, recortadas a la rejilla si se indica"""
        a, _, _ = self.geometry()
        x0, y0 = np.floor(self.centre - a).astype(int)
        x1, y1 = np.ceil(self.centre + a).astype(int)
        if shape is not None:
            n_y, n_x = shape
            x0, y0 = max(x0, 0), max(y0, 0)
            x1, y1 = min(x1, n_x - 1), min(y1, n_y - 1)
            if x0 > x1 or y0 > y1:
                return np.empty((0, 2), dtype=int)
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        cells = np.column_stack([xs.ravel(), ys.ravel()])
        return cells[self.contains(cells)]


@dataclass(frozen=True)
class FootprintFeatures:
    t: int
    a: float
    b: float
    w: float
    r_e: float
    theta_e: float
    r_w: float
    theta_w: float
    gamma: float

    @property
    def delta(self) -> float:
        return self.a * self.b

    def ellipse(self, storm_centre) -> Ellipse:
        """Reconstruye la elipse a partir del centro de la tormenta"""
        centre = np.asarray(storm_centre, dtype=float) + offset_from_bearing(self.r_e, self.theta_e)
        return Ellipse.from_geometry(centre, self.a, self.b, self.gamma)

    def max_location(self, ellipse_centre) -> np.ndarray:
        return np.asarray(ellipse_centre, dtype=float) + offset_from_bearing(self.r_w, self.theta_w)


def _pad_points(points: np.ndarray) -> np.ndarray:
    phi = np.linspace(0.0, 2 * math.pi, 8, endpoint=False)
    ring = COLLINEAR_PAD * np.column_stack([np.cos(phi), np.sin(phi)])
    return (points[:, None, :] + ring[None, :, :]).reshape(-1, 2)


def _hull_points(points: np.ndarray) -> Optional[np.ndarray]:
    unique = np.unique(points, axis=0)
    if unique.shape[0] < 3:
        return None
    centred = unique - unique.mean(axis=0)
    singular = np.linalg.svd(centred, compute_uv=False)
    if singular[-1] <= 1e-9 * max(singular[0], 1.0):
        return None
    try:
        hull = ConvexHull(unique)
    except QhullError:
        return None
    return unique[hull.vertices]


def khachiyan_mvee(points, tol: float = 1e-4, max_iter: int = 100000) -> Ellipse:
    """Elipse de área mínima que contiene los puntos (Khachiyan con pasos de alejamiento)"""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if points.shape[0] == 0:
        raise ValueError("No hay puntos para la elipse")
    if not tol > 0:
        raise ValueError(f"Tolerancia inválida: {tol}")
    hull = _hull_points(points)
    if hull is None:
        logger.debug(f"Cluster colineal de {points.shape[0]} puntos: se rellena con {COLLINEAR_PAD} celdas")
        hull = _hull_points(_pad_points(np.unique(points, axis=0)))

    n, d = hull.shape
    lifted = np.vstack([hull.T, np.ones(n)])
    u = np.full(n, 1.0 / n)
    target = d + 1.0
    for iteration in range(1, max_iter + 1):
        x_mat = (lifted * u) @ lifted.T
        m = np.einsum("ij,ji->i", lifted.T, np.linalg.solve(x_mat, lifted))
        j_up = int(np.argmax(m))
        support = np.flatnonzero(u > 0)
        j_down = support[int(np.argmin(m[support]))]
        if m[j_up] <= (1.0 + tol) * target and m[j_down] >= (1.0 - tol) * target:
            break
        if m[j_up] - target >= target - m[j_down]:
            j = j_up
            step = (m[j] - target) / (target * (m[j] - 1.0))
        else:
            j = j_down
            step = max((m[j] - target) / (target * (m[j] - 1.0)), -u[j] / (1.0 - u[j]))
        u *= 1.0 - step
        u[j] += step
        u = np.clip(u, 0.0, None)
        u /= u.sum()
    else:
        raise ConvergenceError("Khachiyan no convergió", iterations=max_iter)

    centre = hull.T @ u
    scatter = (hull.T * u) @ hull - np.outer(centre, centre)
    shape = np.linalg.inv(scatter) / d
    # Escala final para garantizar la pertenencia exacta de todos los puntos
    worst = Ellipse(centre, shape).quadratic_form(points).max()
    if worst > 1.0:
        shape = shape / worst
    return Ellipse(centre, shape)


def ellipse_to_features(ellipse: Ellipse, storm_centre, max_loc, max_val: float, t: int) -> FootprintFeatures:
    """Deriva el vector de rasgos Z_t de la elipse, el centro de la tormenta y el máximo"""
    if not ellipse.contains(np.asarray(max_loc, dtype=float))[0]:
        raise ExtractionError(f"t={t}: la posición del máximo {tuple(max_loc)} está fuera de la elipse")
    a, b, gamma = ellipse.geometry()
    storm_centre = np.asarray(storm_centre, dtype=float)
    r_e, theta_e = bearing_from_south(*(ellipse.centre - storm_centre))
    r_w, theta_w = bearing_from_south(*(np.asarray(max_loc, dtype=float) - ellipse.centre))
    return FootprintFeatures(t=t, a=a, b=b, w=float(max_val), r_e=r_e, theta_e=theta_e,
                             r_w=r_w, theta_w=theta_w, gamma=gamma)

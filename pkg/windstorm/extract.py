import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.cluster import DBSCAN

from config import ExtractSection
from windstorm.ellipse import Ellipse, FootprintFeatures, ellipse_to_features, khachiyan_mvee
from windstorm.fields import CellMask, GriddedFieldStack, ScaleTag
from windstorm.tracks import StormTrack

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Footprint:
    ellipse: Ellipse
    features: FootprintFeatures


@dataclass(frozen=True, eq=False)
class WindstormRecord:
    """Huellas activas de una tormenta, indexadas por paso de tiempo 1..duration"""
    track_id: str
    duration: int
    footprints: Dict[int, Footprint] = field(default_factory=dict)

    def __post_init__(self):
        bad = [t for t in self.footprints if not 1 <= t <= self.duration]
        if bad:
            raise ValueError(f"Pasos fuera de la trayectoria {self.track_id}: {bad}")

    def is_active(self, t: int) -> bool:
        return t in self.footprints

    @property
    def phases(self) -> List[Tuple[int, int]]:
        """Fases activas como intervalos disjuntos [t_S, t_T]"""
        phases = []
        for t in sorted(self.footprints):
            if phases and phases[-1][1] == t - 1:
                phases[-1] = (phases[-1][0], t)
            else:
                phases.append((t, t))
        return phases

    def features(self) -> List[FootprintFeatures]:
        return [self.footprints[t].features for t in sorted(self.footprints)]


def gaussian_filter_st(stack: GriddedFieldStack, sigma_space: float, sigma_time: float) -> GriddedFieldStack:
    """Filtro gaussiano separable en (t, y, x) con bordes reflejados; NaN cuenta como 0"""
    if sigma_space < 0 or sigma_time < 0:
        raise ValueError(f"Sigmas negativos: espacio={sigma_space}, tiempo={sigma_time}")
    values = np.nan_to_num(stack.values, nan=0.0)
    filtered = gaussian_filter(values, sigma=(sigma_time, sigma_space, sigma_space), mode="reflect")
    return stack.with_values(filtered, stack.scale_tag)


def dbscan_exceedances(filtered: np.ndarray, v: float, eps: float, min_pts: int,
                       allowed: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """Clusters DBSCAN de las celdas con valor > v; cada cluster es un array (k, 2) de (x, y)"""
    if not eps > 0:
        raise ValueError(f"eps debe ser positivo: {eps}")
    if min_pts < 1:
        raise ValueError(f"min_pts debe ser al menos 1: {min_pts}")
    exceed = np.asarray(filtered) > v
    if allowed is not None:
        exceed &= allowed
    iy, ix = np.nonzero(exceed)
    if iy.size == 0:
        return []
    points = np.column_stack([ix, iy])
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(points.astype(float))
    clusters = [points[labels == label] for label in np.unique(labels) if label >= 0]
    # Orden estable según la primera celda de cada cluster en el barrido del ráster
    clusters.sort(key=lambda c: (int(c[:, 1].min()), int(c[c[:, 1] == c[:, 1].min(), 0].min())))
    return clusters


def _largest_cluster(clusters: List[np.ndarray], storm_centre: np.ndarray) -> np.ndarray:
    def rank(cluster):
        return -cluster.shape[0], float(np.linalg.norm(cluster.mean(axis=0) - storm_centre))
    return min(clusters, key=rank)


def _window(shape: Tuple[int, int], centre: np.ndarray, half: float) -> np.ndarray:
    n_y, n_x = shape
    ys, xs = np.mgrid[0:n_y, 0:n_x]
    return (np.abs(xs - centre[0]) <= half) & (np.abs(ys - centre[1]) <= half)


def _step_footprint(raw: np.ndarray, filtered: np.ndarray, allowed: np.ndarray, storm_centre: np.ndarray,
                    t: int, config: ExtractSection) -> Optional[Footprint]:
    clusters = dbscan_exceedances(filtered, config.v, config.eps, config.min_pts, allowed)
    if not clusters:
        return None
    cluster = _largest_cluster(clusters, storm_centre)
    ellipse = khachiyan_mvee(cluster, tol=config.mvee_tol)
    cells = ellipse.cells_inside(raw.shape)
    if cells.shape[0] == 0:
        return None
    values = raw[cells[:, 1], cells[:, 0]]
    finite = np.isfinite(values)
    if not finite.any():
        return None
    best = int(np.argmax(np.where(finite, values, -np.inf)))
    max_val = float(values[best])
    if not max_val > 0:
        return None
    features = ellipse_to_features(ellipse, storm_centre, cells[best].astype(float), max_val, t)
    if features.r_e > config.r_max or math.sqrt(features.delta) < config.area_min:
        logger.debug(f"t={t}: huella espuria descartada (R_E={features.r_e:.1f}, "
                     f"sqrt(Delta)={math.sqrt(features.delta):.1f})")
        return None
    return Footprint(ellipse, features)


def extract_windstorm(stack: GriddedFieldStack, track: StormTrack, config: ExtractSection,
                      mask: Optional[CellMask] = None) -> WindstormRecord:
    """Extrae la huella de cada paso: filtro, umbral, DBSCAN, elipse mínima y rechazo de espurias"""
    if stack.scale_tag is not ScaleTag.EXP1:
        raise ValueError(f"Se esperaba una pila Exp(1), no {stack.scale_tag.name}")
    if list(stack.times) != list(range(1, track.duration + 1)):
        raise ValueError(f"La pila y la trayectoria {track.id} no están alineadas en el tiempo")
    grid = stack.grid
    allowed = mask.included if mask is not None else np.ones(grid.shape, dtype=bool)
    allowed = allowed & np.isfinite(stack.values).any(axis=0)
    filtered = gaussian_filter_st(stack, config.sigma_space, config.sigma_time)
    half = 0.5 * config.window_km / grid.cell_size
    xs, ys = grid.lonlat_to_cell(track.lon, track.lat)

    footprints: Dict[int, Footprint] = {}
    for i, point in enumerate(track.points):
        storm_centre = np.array([xs[i], ys[i]])
        window = allowed & _window(grid.shape, storm_centre, half)
        footprint = _step_footprint(stack.values[i], filtered.values[i], window, storm_centre,
                                    point.t, config)
        if footprint is not None:
            footprints[point.t] = footprint
    record = WindstormRecord(track.id, track.duration, footprints)
    logger.debug(f"Trayectoria {track.id}: {len(footprints)}/{track.duration} pasos activos, "
                 f"{len(record.phases)} fases")
    return record

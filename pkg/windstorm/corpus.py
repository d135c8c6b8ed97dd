import logging
import math
from dataclasses import dataclass
from typing import Dict, List

import numpy as np
from scipy.ndimage import gaussian_filter

from config import CorpusSection
from windstorm.ellipse import Ellipse
from windstorm.fields import CellMask, Grid, GriddedFieldStack, ScaleTag
from windstorm.tracks import StormTrack, TrackPoint
from windstorm.utils import derive_rng, log_progress

logger = logging.getLogger(__name__)

NOISE_SMOOTHING = 3.0
MIN_TRACK_LENGTH = 6
EDGE_MARGIN = 6
MASK_BLOCK = 4


@dataclass(frozen=True)
class PlantedFootprint:
    """Huella sembrada en el corpus: verdad de referencia para la extracción"""
    track_id: str
    t: int
    active: bool
    storm_x: float
    storm_y: float
    cx: float
    cy: float
    a: float
    b: float
    gamma: float


@dataclass(frozen=True, eq=False)
class SyntheticCorpus:
    grid: Grid
    tracks: List[StormTrack]
    stacks: Dict[str, GriddedFieldStack]
    background: GriddedFieldStack
    mask: CellMask
    truth: List[PlantedFootprint]


def _base_level(grid: Grid, config: CorpusSection) -> np.ndarray:
    """Nivel medio de viento por celda, con contraste espacial suave"""
    ys, xs = np.mgrid[0:grid.n_y, 0:grid.n_x]
    pattern = np.sin(2 * math.pi * xs / grid.n_x) * np.cos(math.pi * ys / grid.n_y)
    return config.background_scale * (1.0 + config.background_contrast * pattern)


def _background_raster(base: np.ndarray, config: CorpusSection, rng: np.random.Generator) -> np.ndarray:
    noise = gaussian_filter(rng.standard_normal(base.shape), NOISE_SMOOTHING, mode="wrap")
    noise /= noise.std()
    return np.abs(base + config.noise_sigma * noise)


def _band(grid: Grid, ellipse: Ellipse, boost: float) -> np.ndarray:
    """Banda elíptica de vientos altos, máxima en el centro y nula en el borde"""
    ys, xs = np.mgrid[0:grid.n_y, 0:grid.n_x]
    q = ellipse.quadratic_form(np.column_stack([xs.ravel(), ys.ravel()])).reshape(grid.shape)
    return boost * np.clip(1.0 - q, 0.0, None)


def _make_track(track_id: str, grid: Grid, config: CorpusSection, rng: np.random.Generator):
    length = max(MIN_TRACK_LENGTH, int(rng.poisson(config.mean_track_length)))
    x0 = rng.uniform(EDGE_MARGIN + 10, 0.4 * grid.n_x)
    y0 = rng.uniform(EDGE_MARGIN + 10, 0.5 * grid.n_y)
    vx = rng.uniform(1.0, 2.5)
    vy = rng.uniform(0.2, 1.2)
    steps_x = (grid.n_x - EDGE_MARGIN - x0) / vx
    steps_y = (grid.n_y - EDGE_MARGIN - y0) / vy
    length = max(MIN_TRACK_LENGTH, min(length, int(min(steps_x, steps_y))))

    peak = rng.uniform(0.5, 1.3)
    t_peak = rng.uniform(0.3, 0.7) * (length - 1)
    width = max(2.0, length / 3.0)
    ts = np.arange(length)
    xs = x0 + vx * ts
    ys = y0 + vy * ts
    vorticity = 0.1 + peak * np.exp(-((ts - t_peak) / width) ** 2)
    lon, lat = grid.cell_to_lonlat(xs, ys)
    points = tuple(
        TrackPoint(t=int(i + 1), lon=float(lon[i]), lat=float(lat[i]), vorticity=float(vorticity[i]))
        for i in range(length)
    )
    return StormTrack(track_id, points), xs, ys, math.atan2(vx, vy)


def _planted_footprint(track_id: str, t: int, storm: np.ndarray, heading: float,
                       vorticity: float, config: CorpusSection) -> PlantedFootprint:
    active = vorticity > config.activation_vorticity
    strength = min(1.0, max(0.0, (vorticity - config.activation_vorticity) / 0.6))
    scale = 0.8 + 0.4 * strength
    # La banda se sitúa al sureste del centro, alineada con la dirección de avance
    offset = config.band_offset * np.array([math.cos(heading), -math.sin(heading)])
    centre = storm + offset
    return PlantedFootprint(
        track_id=track_id, t=t, active=active,
        storm_x=float(storm[0]), storm_y=float(storm[1]),
        cx=float(centre[0]), cy=float(centre[1]),
        a=config.band_a * scale, b=config.band_b * scale, gamma=-heading,
    )


def generate_synthetic_corpus(config: CorpusSection, seed: int) -> SyntheticCorpus:
    """Genera pilas de viento, trayectorias y verdad sembrada, deterministas en (config, semilla)"""
    if config.n_tracks <= 0:
        raise ValueError(f"Se requiere al menos una trayectoria (n_tracks={config.n_tracks})")
    if config.quiet_steps <= 0:
        raise ValueError(f"quiet_steps debe ser positivo: {config.quiet_steps}")
    grid = Grid(config.n_x, config.n_y, config.cell_size, config.origin_lon, config.origin_lat)
    base = _base_level(grid, config)

    rng = derive_rng(seed, "background")
    quiet = np.stack([_background_raster(base, config, rng) for _ in range(config.quiet_steps)])
    background = GriddedFieldStack(grid, np.arange(1, config.quiet_steps + 1), quiet, ScaleTag.OBSERVED)

    tracks: List[StormTrack] = []
    stacks: Dict[str, GriddedFieldStack] = {}
    truth: List[PlantedFootprint] = []
    for i in range(config.n_tracks):
        track_id = f"T{i + 1:04d}"
        rng = derive_rng(seed, "track", track_id)
        track, xs, ys, heading = _make_track(track_id, grid, config, rng)
        rasters = []
        for point in track.points:
            raster = _background_raster(base, config, rng)
            planted = _planted_footprint(track_id, point.t, np.array([xs[point.t - 1], ys[point.t - 1]]),
                                         heading, point.vorticity, config)
            if planted.active:
                ellipse = Ellipse.from_geometry((planted.cx, planted.cy), planted.a, planted.b, planted.gamma)
                strength = config.band_boost * (0.6 + 0.4 * min(point.vorticity, 1.3) / 1.3)
                raster = raster + _band(grid, ellipse, strength)
            rasters.append(raster)
            truth.append(planted)
        tracks.append(track)
        stacks[track_id] = GriddedFieldStack(grid, np.arange(1, track.duration + 1),
                                             np.stack(rasters), ScaleTag.OBSERVED)
        log_progress(i + 1, config.n_tracks, "Corpus sintético")

    included = np.ones(grid.shape, dtype=bool)
    included[:MASK_BLOCK, :MASK_BLOCK] = False
    mask = CellMask(grid, included)
    logger.info(f"Corpus generado: {len(tracks)} trayectorias, {sum(t.duration for t in tracks)} pasos")
    return SyntheticCorpus(grid, tracks, stacks, background, mask, truth)

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackPoint:
    t: int
    lon: float
    lat: float
    vorticity: float

    def __post_init__(self):
        if not self.vorticity > 0:
            raise ValueError(f"Vorticidad no positiva en t={self.t}: {self.vorticity}")


@dataclass(frozen=True)
class StormTrack:
    id: str
    points: Tuple[TrackPoint, ...]

    def __post_init__(self):
        points = tuple(self.points)
        if not points:
            raise ValueError(f"Trayectoria {self.id} vacía")
        expected = list(range(1, len(points) + 1))
        if [p.t for p in points] != expected:
            raise ValueError(f"Trayectoria {self.id}: tiempos no consecutivos desde 1")
        object.__setattr__(self, "points", points)

    @property
    def duration(self) -> int:
        return len(self.points)

    @property
    def lon(self) -> np.ndarray:
        return np.array([p.lon for p in self.points])

    @property
    def lat(self) -> np.ndarray:
        return np.array([p.lat for p in self.points])

    @property
    def vorticity(self) -> np.ndarray:
        return np.array([p.vorticity for p in self.points])

    @property
    def t_max_vorticity(self) -> int:
        """Paso de máxima vorticidad (el primero en caso de empate)"""
        return int(np.argmax(self.vorticity)) + 1

    def point(self, t: int) -> TrackPoint:
        return self.points[t - 1]


def interpolate_track(track: StormTrack, factor: int = 3) -> StormTrack:
    """Interpola linealmente lon, lat y vorticidad entre puntos (p.ej. 3-horario a horario)"""
    if factor < 1:
        raise ValueError(f"Factor de interpolación inválido: {factor}")
    if factor == 1 or track.duration == 1:
        return track
    coarse = np.arange(track.duration) * factor
    fine = np.arange(coarse[-1] + 1)
    lon = np.interp(fine, coarse, track.lon)
    lat = np.interp(fine, coarse, track.lat)
    vort = np.interp(fine, coarse, track.vorticity)
    points = tuple(
        TrackPoint(t=i + 1, lon=float(lon[i]), lat=float(lat[i]), vorticity=float(vort[i]))
        for i in range(fine.size)
    )
    return StormTrack(track.id, points)

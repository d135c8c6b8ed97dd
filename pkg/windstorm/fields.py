import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

KM_PER_DEGREE = 111.2


class ScaleTag(IntEnum):
    OBSERVED = 0
    EXP1 = 1
    GAUSS = 2
    MASK = 255


@dataclass(frozen=True)
class Grid:
    n_x: int
    n_y: int
    cell_size: float
    origin_lon: float
    origin_lat: float

    def __post_init__(self):
        if self.n_x <= 0 or self.n_y <= 0:
            raise ValueError(f"Dimensiones de rejilla inválidas: {self.n_x}x{self.n_y}")
        if not self.cell_size > 0:
            raise ValueError(f"Tamaño de celda inválido: {self.cell_size}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_y, self.n_x

    def _km_per_degree_lon(self) -> float:
        return KM_PER_DEGREE * math.cos(math.radians(self.origin_lat))

    def lonlat_to_cell(self, lon, lat):
        """Convierte lon/lat a coordenadas (x, y) en celdas; y crece hacia el norte"""
        x = (np.asarray(lon, dtype=float) - self.origin_lon) * self._km_per_degree_lon() / self.cell_size
        y = (np.asarray(lat, dtype=float) - self.origin_lat) * KM_PER_DEGREE / self.cell_size
        return x, y

    def cell_to_lonlat(self, x, y):
        lon = self.origin_lon + np.asarray(x, dtype=float) * self.cell_size / self._km_per_degree_lon()
        lat = self.origin_lat + np.asarray(y, dtype=float) * self.cell_size / KM_PER_DEGREE
        return lon, lat


@dataclass(frozen=True, eq=False)
class GriddedFieldStack:
    grid: Grid
    times: np.ndarray
    values: np.ndarray
    scale_tag: ScaleTag

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[1:] != self.grid.shape:
            raise ValueError(f"Rásters {values.shape} no coinciden con la rejilla {self.grid.shape}")
        if times.shape != (values.shape[0],):
            raise ValueError(f"Se esperaban {values.shape[0]} pasos de tiempo, hay {times.shape}")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("Los pasos de tiempo deben ser estrictamente crecientes")
        tag = ScaleTag(self.scale_tag)
        if tag in (ScaleTag.OBSERVED, ScaleTag.EXP1) and np.nanmin(values, initial=0.0) < 0:
            raise ValueError(f"Valores negativos en una pila con escala {tag.name}")
        if tag is ScaleTag.EXP1 and np.isinf(values).any():
            raise ValueError("Valores no finitos en una pila Exp(1)")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scale_tag", tag)

    @property
    def n_t(self) -> int:
        return self.values.shape[0]

    def raster(self, t: int) -> np.ndarray:
        """Ráster del paso de tiempo `t`"""
        idx = int(np.searchsorted(self.times, t))
        if idx >= self.n_t or self.times[idx] != t:
            raise KeyError(f"Paso de tiempo {t} ausente")
        return self.values[idx]

    def with_values(self, values: np.ndarray, scale_tag: ScaleTag) -> "GriddedFieldStack":
        return GriddedFieldStack(self.grid, self.times, values, scale_tag)


@dataclass(frozen=True, eq=False)
class CellMask:
    grid: Grid
    included: np.ndarray

    def __post_init__(self):
        included = np.asarray(self.included, dtype=bool)
        if included.shape != self.grid.shape:
            raise ValueError(f"Máscara {included.shape} no coincide con la rejilla {self.grid.shape}")
        included.setflags(write=False)
        object.__setattr__(self, "included", included)

    @classmethod
    def everything(cls, grid: Grid) -> "CellMask":
        return cls(grid, np.ones(grid.shape, dtype=bool))


def concat_stacks(stacks: Sequence[GriddedFieldStack]) -> GriddedFieldStack:
    """Concatena pilas en el tiempo y renumera los pasos 1..N"""
    if not stacks:
        raise ValueError("No hay pilas que concatenar")
    grid, tag = stacks[0].grid, stacks[0].scale_tag
    for stack in stacks[1:]:
        if stack.grid != grid or stack.scale_tag != tag:
            raise ValueError("Las pilas deben compartir rejilla y escala")
    values = np.concatenate([s.values for s in stacks], axis=0)
    return GriddedFieldStack(grid, np.arange(1, values.shape[0] + 1), values, tag)

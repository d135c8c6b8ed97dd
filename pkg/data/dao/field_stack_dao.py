"""Contenedor binario WSFSTK01 para pilas de campos, máscaras y rásters de densidad.

Disposición (little-endian):
    magic  b"WSFSTK01"
    u32 n_x, u32 n_y, f64 cell_size, f64 origin_lon, f64 origin_lat, u32 n_t, u8 scale_tag
    f32 values[n_t][n_y][n_x]
    i64 times[n_t]   (extensión opcional)

El bloque final de tiempos es una extensión del formato base: el escritor siempre lo añade y el
lector lo acepta ausente, en cuyo caso los pasos son 1..n_t.
"""
import logging
import struct
from pathlib import Path
from typing import List, Union

import numpy as np

from windstorm.errors import FieldFormatError
from windstorm.fields import CellMask, Grid, GriddedFieldStack, ScaleTag

logger = logging.getLogger(__name__)

MAGIC = b"WSFSTK01"
_HEADER = struct.Struct("<IIdddIB")
_HEADER_END = len(MAGIC) + _HEADER.size
SUFFIX = ".wsf"

PathLike = Union[str, Path]


def _encode(grid: Grid, times: np.ndarray, values: np.ndarray, tag: int) -> bytes:
    header = _HEADER.pack(grid.n_x, grid.n_y, grid.cell_size, grid.origin_lon,
                          grid.origin_lat, values.shape[0], int(tag))
    rasters = np.ascontiguousarray(values, dtype="<f4").tobytes()
    trailer = np.ascontiguousarray(times, dtype="<i8").tobytes()
    return MAGIC + header + rasters + trailer


def _decode(payload: bytes):
    if len(payload) < len(MAGIC) or payload[:len(MAGIC)] != MAGIC:
        raise FieldFormatError("Cabecera mágica inválida", offset=0)
    if len(payload) < _HEADER_END:
        raise FieldFormatError("Cabecera truncada", offset=len(payload))
    n_x, n_y, cell_size, origin_lon, origin_lat, n_t, tag = _HEADER.unpack_from(payload, len(MAGIC))
    if n_x == 0 or n_y == 0:
        raise FieldFormatError(f"Dimensiones nulas {n_x}x{n_y}", offset=len(MAGIC))
    try:
        tag = int(ScaleTag(tag))
    except ValueError:
        raise FieldFormatError(f"Etiqueta de escala desconocida {tag}", offset=_HEADER_END - 1)
    raster_bytes = n_t * n_y * n_x * 4
    end = _HEADER_END + raster_bytes
    if len(payload) < end:
        raise FieldFormatError(f"Carga truncada: se esperaban {raster_bytes} bytes de rásters",
                               offset=len(payload))
    values = np.frombuffer(payload, dtype="<f4", count=n_t * n_y * n_x, offset=_HEADER_END)
    values = values.reshape(n_t, n_y, n_x).astype(np.float64)
    rest = len(payload) - end
    if rest == 0:
        times = np.arange(1, n_t + 1, dtype=np.int64)
    elif rest == n_t * 8:
        times = np.frombuffer(payload, dtype="<i8", count=n_t, offset=end).astype(np.int64)
    else:
        raise FieldFormatError(f"{rest} bytes sobrantes no coinciden con {n_t} pasos de tiempo", offset=end)
    try:
        grid = Grid(n_x, n_y, cell_size, origin_lon, origin_lat)
    except ValueError as e:
        raise FieldFormatError(f"Rejilla inválida: {e}", offset=len(MAGIC))
    return grid, times, values, tag


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No existe el archivo: {path}")
    return path.read_bytes()


def read_field_stack(path: PathLike) -> GriddedFieldStack:
    """Lee una pila de campos del contenedor binario WSFSTK01"""
    grid, times, values, tag = _decode(_read_bytes(path))
    if tag == ScaleTag.MASK:
        raise FieldFormatError(f"{path} contiene una máscara, no una pila de campos", offset=_HEADER_END - 1)
    try:
        return GriddedFieldStack(grid, times, values, ScaleTag(tag))
    except ValueError as e:
        raise FieldFormatError(f"Contenido inválido en {path}: {e}", offset=_HEADER_END)


def write_field_stack(path: PathLike, stack: GriddedFieldStack) -> None:
    Path(path).write_bytes(_encode(stack.grid, stack.times, stack.values, stack.scale_tag))


def read_mask(path: PathLike) -> CellMask:
    grid, _, values, tag = _decode(_read_bytes(path))
    if tag != ScaleTag.MASK or values.shape[0] != 1:
        raise FieldFormatError(f"{path} no es un archivo de máscara", offset=_HEADER_END - 1)
    if not np.isin(values, (0.0, 1.0)).all():
        raise FieldFormatError("La máscara solo admite valores 0/1", offset=_HEADER_END)
    return CellMask(grid, values[0] > 0.5)


def write_mask(path: PathLike, mask: CellMask) -> None:
    values = mask.included.astype(np.float64)[None]
    Path(path).write_bytes(_encode(mask.grid, np.array([1]), values, ScaleTag.MASK))


class FieldStackDAO:
    """Acceso a un directorio de pilas con nombre (`<nombre>.wsf`)"""

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)

    def path(self, name: str) -> Path:
        return self.directory / f"{name}{SUFFIX}"

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def names(self) -> List[str]:
        if not self.directory.is_dir():
            raise FileNotFoundError(f"No existe el directorio de campos: {self.directory}")
        return sorted(p.stem for p in self.directory.glob(f"*{SUFFIX}"))

    def get(self, name: str) -> GriddedFieldStack:
        try:
            return read_field_stack(self.path(name))
        except FieldFormatError as e:
            logger.error(f"Error leyendo la pila {name}: {e}")
            raise

    def save(self, name: str, stack: GriddedFieldStack) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path(name)
        write_field_stack(path, stack)
        return path

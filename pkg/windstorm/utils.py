import hashlib
import logging
import math
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


# RNG Helpers

def stable_key(*parts) -> int:
    """Hash estable (independiente de PYTHONHASHSEED) de una tupla de claves"""
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Flujo aleatorio independiente para (semilla, pista, paso, ...)"""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stable_key(*keys)]))


# Angle Helpers

def wrap_angle(theta):
    """Envuelve ángulos a (-pi, pi]"""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), 2 * np.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def wrap_axial(gamma):
    """Envuelve orientaciones de eje (periodo pi) a [-pi/2, pi/2)"""
    wrapped = np.mod(np.asarray(gamma, dtype=float) + np.pi / 2, np.pi) - np.pi / 2
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def bearing_from_south(dx: float, dy: float) -> Tuple[float, float]:
    """Distancia y rumbo desde el sur (antihorario positivo) del vector (dx, dy)"""
    r = math.hypot(dx, dy)
    if r == 0.0:
        return 0.0, 0.0
    return r, math.atan2(dx, -dy)


def offset_from_bearing(r: float, theta: float) -> np.ndarray:
    return np.array([r * math.sin(theta), -r * math.cos(theta)])


# Format Helpers

def parse_sites(text: str) -> List[Tuple[int, int]]:
    """Interpreta sitios como 'x1,y1;x2,y2' en coordenadas de celda"""
    sites = []
    for chunk in text.replace(" ", "").split(";"):
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ValueError(f"Sitio mal formado: {chunk!r}")
        sites.append((int(parts[0]), int(parts[1])))
    if not sites:
        raise ValueError("No se indicaron sitios")
    return sites


def file_sha256(path: Union[str, Path]) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            sha.update(block)
    return sha.hexdigest()


def log_progress(done: int, total: int, label: str = "") -> None:
    """Registra una barra de progreso en el log"""
    if total <= 0:
        return
    percentage = int(100 * done / total)
    bars = "▰" * (percentage // 20) + "▱" * (5 - percentage // 20)
    logger.info(f"{label} {bars} {percentage}% ({done}/{total})")

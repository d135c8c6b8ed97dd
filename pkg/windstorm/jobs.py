import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

from windstorm.utils import log_progress

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def run_track_jobs(func: Callable[[T], R], items: Sequence[T], threads: int = 1, label: str = "") -> List[R]:
    """Ejecuta `func` por trayectoria; los resultados conservan el orden de entrada"""
    if threads < 1:
        raise ValueError(f"Número de hilos inválido: {threads}")
    total = len(items)
    results: List[R] = []
    if threads == 1 or total <= 1:
        for i, item in enumerate(items):
            results.append(func(item))
            log_progress(i + 1, total, label)
        return results
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for i, result in enumerate(pool.map(func, items)):
            results.append(result)
            log_progress(i + 1, total, label)
    logger.debug(f"{label}: {total} trabajos en {threads} hilos")
    return results

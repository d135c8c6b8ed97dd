import logging
import math
import threading
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from cachetools import LRUCache, cachedmethod
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import logsumexp

from windstorm.utils import wrap_angle

logger = logging.getLogger(__name__)

RIDGE = 1e-8
UNDERFLOW_LOG = -745.0
CACHE_SIZE = 64


def _wrap_columns(values: np.ndarray, circular: Sequence[int]) -> np.ndarray:
    values = np.array(values, dtype=float, copy=True)
    for j in circular:
        values[..., j] = wrap_angle(values[..., j])
    return values


def scott_bandwidth(data, factor: float = 1.0, oriented: bool = True,
                    circular_dims: Sequence[int] = ()) -> np.ndarray:
    """H = factor^2 n^(-2/(d+4)) Sigma (orientada) o su diagonal"""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    n, d = data.shape
    if n < 2:
        raise ValueError(f"Se necesitan al menos 2 observaciones para el ancho de banda (n={n})")
    if not factor > 0:
        raise ValueError(f"Factor de ancho de banda no positivo: {factor}")
    centred = data - data.mean(axis=0)
    for j in circular_dims:
        mean = math.atan2(np.sin(data[:, j]).mean(), np.cos(data[:, j]).mean())
        centred[:, j] = wrap_angle(data[:, j] - mean)
    sigma = np.atleast_2d(centred.T @ centred / (n - 1))
    if not oriented:
        sigma = np.diag(np.diag(sigma))
    bandwidth = factor ** 2 * n ** (-2.0 / (d + 4)) * sigma
    trace = float(np.trace(bandwidth))
    if np.linalg.eigvalsh(bandwidth).min() <= 1e-12 * max(trace, 1e-300):
        ridge = RIDGE * trace if trace > 0 else RIDGE
        logger.warning(f"Covarianza singular en el ancho de banda: se añade una cresta de {ridge:.3g}")
        bandwidth = bandwidth + ridge * np.eye(d)
    return bandwidth


@dataclass(frozen=True)
class Conditioner:
    """Factorizaciones del condicionamiento sobre `cond_dims`"""
    cond_dims: Tuple[int, ...]
    free_dims: Tuple[int, ...]
    cond_chol: np.ndarray
    cond_log_norm: float
    regression: np.ndarray
    free_chol: np.ndarray
    free_log_norm: float


@dataclass(frozen=True, eq=False)
class KdeModel:
    """Estimador de densidad con núcleo gaussiano multivariante y ancho de banda H"""
    data: np.ndarray
    bandwidth: np.ndarray
    circular_dims: Tuple[int, ...] = ()
    labels: Tuple[str, ...] = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] < 1:
            raise ValueError("El KDE necesita al menos una observación")
        d = data.shape[1]
        bandwidth = np.atleast_2d(np.asarray(self.bandwidth, dtype=float))
        if bandwidth.shape != (d, d) or not np.allclose(bandwidth, bandwidth.T):
            raise ValueError(f"Ancho de banda con forma {bandwidth.shape} inválido para d={d}")
        try:
            chol = np.linalg.cholesky(bandwidth)
        except np.linalg.LinAlgError:
            raise ValueError("El ancho de banda no es definido positivo")
        circular = tuple(sorted(int(j) for j in self.circular_dims))
        if any(not 0 <= j < d for j in circular):
            raise ValueError(f"Dimensiones circulares fuera de rango: {circular}")
        labels = tuple(self.labels) or tuple(f"z{j}" for j in range(d))
        if len(labels) != d:
            raise ValueError(f"Se esperaban {d} etiquetas, hay {len(labels)}")
        data = _wrap_columns(data, circular)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "bandwidth", bandwidth)
        object.__setattr__(self, "circular_dims", circular)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_cache", LRUCache(maxsize=CACHE_SIZE))
        object.__setattr__(self, "_lock", threading.RLock())

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def dims(self, *labels: str) -> Tuple[int, ...]:
        return tuple(self.labels.index(label) for label in labels)

    def differences(self, z, dims: Sequence[int], rows=None) -> np.ndarray:
        """z - z^(i) sobre `dims`, con diferencias envueltas en las dimensiones circulares"""
        data = self.data if rows is None else self.data[rows]
        diff = np.asarray(z, dtype=float)[None, :] - data[:, list(dims)]
        for k, j in enumerate(dims):
            if j in self.circular_dims:
                diff[:, k] = wrap_angle(diff[:, k])
        return diff

    @cachedmethod(lambda self: self._cache, lock=lambda self: self._lock)
    def conditioner(self, cond_dims: Tuple[int, ...]) -> Conditioner:
        cond = tuple(sorted(cond_dims))
        free = tuple(j for j in range(self.d) if j not in cond)
        if not cond or not free:
            raise ValueError(f"El condicionamiento debe ser un subconjunto propio: {cond_dims}")
        h = self.bandwidth
        h_cc = h[np.ix_(cond, cond)]
        h_fc = h[np.ix_(free, cond)]
        cond_chol = cho_factor(h_cc, lower=True)
        regression = cho_solve(cond_chol, h_fc.T).T
        schur = h[np.ix_(free, free)] - regression @ h_fc.T
        free_chol = np.linalg.cholesky(0.5 * (schur + schur.T))
        cond_log_norm = -0.5 * len(cond) * math.log(2 * math.pi) - np.log(np.diag(cond_chol[0])).sum()
        free_log_norm = -0.5 * len(free) * math.log(2 * math.pi) - np.log(np.diag(free_chol)).sum()
        return Conditioner(cond, free, np.tril(cond_chol[0]), float(cond_log_norm),
                           regression, free_chol, float(free_log_norm))

    def to_arrays(self) -> dict:
        return {
            "data": np.asarray(self.data),
            "bandwidth": self.bandwidth,
            "circular_dims": np.asarray(self.circular_dims, dtype=np.int64),
            "labels": np.asarray(self.labels),
        }

    @classmethod
    def from_arrays(cls, arrays) -> "KdeModel":
        return cls(np.asarray(arrays["data"]), np.asarray(arrays["bandwidth"]),
                   tuple(int(j) for j in arrays["circular_dims"]),
                   tuple(str(label) for label in arrays["labels"]))


def build_kde(data, factor: float = 1.0, oriented: bool = True, circular_dims: Sequence[int] = (),
              labels: Sequence[str] = ()) -> KdeModel:
    data = _wrap_columns(np.atleast_2d(np.asarray(data, dtype=float).T).T, circular_dims)
    bandwidth = scott_bandwidth(data, factor, oriented, circular_dims)
    return KdeModel(data, bandwidth, tuple(circular_dims), tuple(labels))


def kde_density(model: KdeModel, z) -> float:
    """f(z) = (1/n) sum_i K_H(z - z^(i))"""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (model.d,) or not np.all(np.isfinite(z)):
        raise ValueError(f"Punto inválido para un KDE de dimensión {model.d}: {z}")
    diff = model.differences(z, range(model.d))
    y = solve_triangular(model._chol, diff.T, lower=True)
    log_norm = -0.5 * model.d * math.log(2 * math.pi) - np.log(np.diag(model._chol)).sum()
    log_k = log_norm - 0.5 * (y ** 2).sum(axis=0)
    return float(np.exp(logsumexp(log_k) - math.log(model.n)))


def _log_kernel(model: KdeModel, cond: Conditioner, cond_values, rows) -> np.ndarray:
    diff = model.differences(cond_values, cond.cond_dims, rows)
    y = solve_triangular(cond.cond_chol, diff.T, lower=True)
    return cond.cond_log_norm - 0.5 * (y ** 2).sum(axis=0)


def conditional_weights(model: KdeModel, cond_dims: Sequence[int], cond_values,
                        subset: Optional[np.ndarray] = None,
                        counters: Optional[Counter] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Pesos w_i del estimador condicional; devuelve (índices, pesos) que suman 1"""
    cond = model.conditioner(tuple(sorted(cond_dims)))
    order = np.argsort(np.asarray(cond_dims))
    values = np.asarray(cond_values, dtype=float)[order]
    rows = np.arange(model.n) if subset is None else np.asarray(subset, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("Subconjunto de entrenamiento vacío")
    log_k = _log_kernel(model, cond, values, rows)
    if log_k.max() < UNDERFLOW_LOG:
        # Punto de condicionamiento lejos de los datos: componente del vecino más cercano
        if counters is not None:
            counters["kde_nearest"] += 1
        logger.debug(f"Pesos nulos en el KDE condicional ({model.labels}): vecino más cercano")
        best = rows[int(np.argmax(log_k))]
        return np.array([best]), np.array([1.0])
    weights = np.exp(log_k - logsumexp(log_k))
    return rows, weights / weights.sum()


def _conditional_means(model: KdeModel, cond: Conditioner, values: np.ndarray, rows: np.ndarray) -> np.ndarray:
    diff = model.differences(values, cond.cond_dims, rows)
    return model.data[np.ix_(rows, cond.free_dims)] + diff @ cond.regression.T


def conditional_sample(model: KdeModel, cond_dims: Sequence[int], cond_values, rng: np.random.Generator,
                       subset: Optional[np.ndarray] = None, counters: Optional[Counter] = None) -> np.ndarray:
    """Muestra de las dimensiones libres (en orden creciente de índice) dada z_{-m}"""
    cond = model.conditioner(tuple(sorted(cond_dims)))
    order = np.argsort(np.asarray(cond_dims))
    values = np.asarray(cond_values, dtype=float)[order]
    rows, weights = conditional_weights(model, cond_dims, cond_values, subset, counters)
    chosen = rows[int(rng.choice(rows.size, p=weights))]
    mean = _conditional_means(model, cond, values, np.array([chosen]))[0]
    draw = mean + cond.free_chol @ rng.standard_normal(len(cond.free_dims))
    for k, j in enumerate(cond.free_dims):
        if j in model.circular_dims:
            draw[k] = wrap_angle(draw[k])
    return draw


def conditional_mean(model: KdeModel, cond_dims: Sequence[int], cond_values,
                     subset: Optional[np.ndarray] = None) -> np.ndarray:
    """Media de la mezcla condicional: sum_i w_i mu_i"""
    cond = model.conditioner(tuple(sorted(cond_dims)))
    values = np.asarray(cond_values, dtype=float)[np.argsort(np.asarray(cond_dims))]
    rows, weights = conditional_weights(model, cond_dims, cond_values, subset)
    return weights @ _conditional_means(model, cond, values, rows)


def conditional_density(model: KdeModel, cond_dims: Sequence[int], cond_values, z_free,
                        subset: Optional[np.ndarray] = None) -> float:
    """Densidad de la mezcla condicional evaluada en las dimensiones libres"""
    cond = model.conditioner(tuple(sorted(cond_dims)))
    values = np.asarray(cond_values, dtype=float)[np.argsort(np.asarray(cond_dims))]
    rows, weights = conditional_weights(model, cond_dims, cond_values, subset)
    means = _conditional_means(model, cond, values, rows)
    diff = np.atleast_1d(np.asarray(z_free, dtype=float))[None, :] - means
    for k, j in enumerate(cond.free_dims):
        if j in model.circular_dims:
            diff[:, k] = wrap_angle(diff[:, k])
    y = solve_triangular(cond.free_chol, diff.T, lower=True)
    log_k = cond.free_log_norm - 0.5 * (y ** 2).sum(axis=0)
    return float(np.exp(logsumexp(log_k, b=weights)))

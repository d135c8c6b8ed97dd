import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from windstorm.errors import ConvergenceError, FitError
from windstorm.fields import CellMask, Grid, GriddedFieldStack, ScaleTag
from windstorm.utils import log_progress

logger = logging.getLogger(__name__)

XI_MIN = -0.95
XI_MAX = 1.0
XI_GRID = 24
XI_ZERO = 1e-8
BISECTION_STEPS = 48
GOLDEN_STEPS = 32
CHUNK_CELLS = 4096
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class GpdFit:
    sigma: float
    xi: float
    threshold: float
    exceed_rate: float
    n_exceed: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"Escala GPD no positiva: {self.sigma}")
        if not 0 < self.exceed_rate < 1:
            raise ValueError(f"Tasa de excedencia fuera de (0, 1): {self.exceed_rate}")

    @property
    def endpoint(self) -> float:
        """Extremo superior del soporte (inf si xi >= 0)"""
        if self.xi < 0:
            return self.threshold - self.sigma / self.xi
        return math.inf


# GPD Helpers

def gpd_loglik(sigma: float, xi: float, excesses) -> float:
    """Log-verosimilitud GPD de los excesos; -inf fuera del soporte"""
    x = np.asarray(excesses, dtype=float)
    if not sigma > 0:
        return -math.inf
    if abs(xi) < XI_ZERO:
        return float(-x.size * math.log(sigma) - x.sum() / sigma)
    z = 1.0 + xi * x / sigma
    if np.any(z <= 0):
        return -math.inf
    return float(-x.size * math.log(sigma) - (1.0 + 1.0 / xi) * np.log(z).sum())


def gpd_survival(fit: GpdFit, x):
    """(1 + xi x / sigma)_+^(-1/xi), con el límite exponencial cuando |xi| < 1e-8"""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("El exceso debe ser no negativo")
    if abs(fit.xi) < XI_ZERO:
        result = np.exp(-x / fit.sigma)
    else:
        # Forma log1p, estable para |xi| justo por encima de XI_ZERO
        s = fit.xi * x / fit.sigma
        inside = s > -1.0
        result = np.where(inside, np.exp(-np.log1p(np.where(inside, s, 0.0)) / fit.xi), 0.0)
    return float(result) if result.ndim == 0 else result


def _score(s: np.ndarray, xi: np.ndarray, x: np.ndarray, n: np.ndarray) -> np.ndarray:
    xs = x * s[:, None]
    return (1.0 + xi) * (xs / (1.0 + xi[:, None] * xs)).sum(axis=1) - n


def _profile_rate(xi: np.ndarray, x: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Raíz única s = 1/sigma de la ecuación de verosimilitud para xi fijo por fila (bisección)"""
    negative = xi < 0
    with np.errstate(divide="ignore"):
        pole = 1.0 / (-np.where(negative, xi, -1.0) * x.max(axis=1))
    hi = np.where(negative, pole, 2.0 * n / x.sum(axis=1))
    for _ in range(64):
        low = ~negative & (_score(hi, xi, x, n) <= 0)
        if not low.any():
            break
        hi = np.where(low, hi * 4.0, hi)
    lo = np.zeros_like(hi)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        below = _score(mid, xi, x, n) < 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def _loglik_rows(s: np.ndarray, xi: np.ndarray, x: np.ndarray, n: np.ndarray) -> np.ndarray:
    near_zero = np.abs(xi) < XI_ZERO
    safe = np.where(near_zero, 1.0, xi)
    z = 1.0 + safe[:, None] * x * s[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        general = n * np.log(s) - (1.0 + 1.0 / safe) * np.log(z).sum(axis=1)
    limit = n * np.log(s) - s * x.sum(axis=1)
    return np.where(near_zero, limit, general)


def _profile_loglik(xi, x: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Log-verosimilitud perfil por fila; `xi` puede variar por fila"""
    xi = np.broadcast_to(np.asarray(xi, dtype=float), n.shape).copy()
    return _loglik_rows(_profile_rate(xi, x, n), xi, x, n)


def _fit_rows(x: np.ndarray, n: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Ajuste GPD vectorizado: rejilla gruesa en xi y refinamiento por sección áurea"""
    grid = np.linspace(XI_MIN, XI_MAX, XI_GRID)
    profile = np.column_stack([_profile_loglik(xi, x, n) for xi in grid])
    finite = np.isfinite(profile)
    if not finite.any(axis=1).all():
        raise ConvergenceError("Perfil de verosimilitud no finito", iterations=XI_GRID)
    best = np.argmax(np.where(finite, profile, -np.inf), axis=1)
    a = grid[np.clip(best - 1, 0, XI_GRID - 1)]
    b = grid[np.clip(best + 1, 0, XI_GRID - 1)]

    # Sección áurea vectorizada sobre el intervalo vecino al mejor punto de la rejilla
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc = _profile_loglik(c, x, n)
    fd = _profile_loglik(d, x, n)
    for _ in range(GOLDEN_STEPS):
        left = fc > fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = b - _GOLDEN * (b - a)
        d_new = a + _GOLDEN * (b - a)
        old_c, old_fc, old_d, old_fd = c, fc, d, fd
        c = np.where(left, c_new, old_d)
        d = np.where(left, old_c, d_new)
        # Solo un extremo interior es nuevo en cada fila
        fresh = _profile_loglik(np.where(left, c, d), x, n)
        fc = np.where(left, fresh, old_fd)
        fd = np.where(left, old_fc, fresh)
    xi = 0.5 * (a + b)
    refined = _profile_loglik(xi, x, n)
    # El punto de la rejilla gana si el óptimo está en la frontera del intervalo
    edge = profile[np.arange(n.size), best]
    xi = np.where(edge > refined, grid[best], xi)
    s = _profile_rate(xi, x, n)
    return 1.0 / s, xi


def _check_excesses(x: np.ndarray, min_excess: int) -> None:
    if x.size < min_excess:
        raise FitError(f"Pocos excesos: {x.size} < {min_excess}")
    if np.ptp(x) == 0:
        raise FitError(f"Excesos degenerados (varianza nula, todos iguales a {x[0]})")


def fit_gpd(excesses, min_excess: int = 30) -> Tuple[float, float]:
    """Estimador de máxima verosimilitud (sigma, xi) de la GPD mediante verosimilitud perfil en xi"""
    x = np.asarray(excesses, dtype=float).ravel()
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("Los excesos deben ser finitos y positivos")
    _check_excesses(x, min_excess)
    sigma, xi = _fit_rows(x[None, :], np.array([float(x.size)]))
    return float(sigma[0]), float(xi[0])


# Marginal Model

@dataclass(frozen=True, eq=False)
class MarginalModel:
    """Modelo marginal por celda: cola GPD sobre u_s y distribución empírica bajo u_s"""
    grid: Grid
    included: np.ndarray
    threshold: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray
    rate: np.ndarray
    n_exceed: np.ndarray
    node_x: np.ndarray
    node_p: np.ndarray
    exp_cap: float = 20.0

    def __post_init__(self):
        for name in ("threshold", "sigma", "xi", "rate", "n_exceed", "included"):
            if getattr(self, name).shape != self.grid.shape:
                raise ValueError(f"`{name}` no coincide con la rejilla")
        if self.node_x.shape != self.node_p.shape or self.node_x.shape[1:] != self.grid.shape:
            raise ValueError("Nodos empíricos con forma inválida")

    def cell_fit(self, iy: int, ix: int) -> GpdFit:
        if not self.included[iy, ix]:
            raise ValueError(f"Celda enmascarada ({iy}, {ix}): sin ajuste marginal")
        return GpdFit(float(self.sigma[iy, ix]), float(self.xi[iy, ix]), float(self.threshold[iy, ix]),
                      float(self.rate[iy, ix]), int(self.n_exceed[iy, ix]))

    def cell_nodes(self, iy: int, ix: int) -> Tuple[np.ndarray, np.ndarray]:
        """Nodos (x, F) de la distribución empírica bajo el umbral, terminando en (u, 1 - lambda)"""
        if not self.included[iy, ix]:
            raise ValueError(f"Celda enmascarada ({iy}, {ix}): sin ajuste marginal")
        xs, ps = self.node_x[:, iy, ix], self.node_p[:, iy, ix]
        keep = np.isfinite(xs)
        return xs[keep], ps[keep]

    def sample_minimum(self, iy: int, ix: int) -> float:
        return float(self.cell_nodes(iy, ix)[0][0])


def _empirical_nodes(sample: np.ndarray, u: float, rate: float, max_nodes: int):
    n = sample.size
    below = np.sort(sample[sample <= u])
    positions = np.arange(1, below.size + 1) / (n + 1.0)
    if below.size and below[-1] == u:
        below, positions = below[:-1], positions[:-1]
    if below.size > max_nodes - 1:
        idx = np.unique(np.round(np.linspace(0, below.size - 1, max_nodes - 1)).astype(int))
        below, positions = below[idx], positions[idx]
    # Empates entre estadísticos de orden: se conserva la posición más alta
    if below.size:
        last = np.r_[below[1:] != below[:-1], True]
        below, positions = below[last], positions[last]
    return np.r_[below, u], np.r_[positions, 1.0 - rate]


def fit_marginal_model(stack: GriddedFieldStack, mask: CellMask, quantile: float = 0.98,
                       min_excess: int = 30, max_nodes: int = 128, exp_cap: float = 20.0) -> MarginalModel:
    """Ajusta el modelo marginal celda a celda sobre la escala observada"""
    if stack.scale_tag is not ScaleTag.OBSERVED:
        raise ValueError(f"Se esperaba una pila observada, no {stack.scale_tag.name}")
    if mask.grid != stack.grid:
        raise ValueError("La máscara no coincide con la rejilla de la pila")
    if not 0 < quantile < 1:
        raise ValueError(f"Cuantil fuera de (0, 1): {quantile}")
    if max_nodes < 2:
        raise ValueError(f"max_nodes debe ser al menos 2: {max_nodes}")

    grid = stack.grid
    shape = grid.shape
    threshold = np.full(shape, np.nan)
    sigma = np.full(shape, np.nan)
    xi = np.full(shape, np.nan)
    rate = np.full(shape, np.nan)
    n_exceed = np.zeros(shape, dtype=np.int64)
    node_x = np.full((max_nodes,) + shape, np.nan)
    node_p = np.full((max_nodes,) + shape, np.nan)

    cells = [(int(iy), int(ix)) for iy, ix in zip(*np.nonzero(mask.included))]
    excess_rows = []
    for iy, ix in cells:
        sample = stack.values[:, iy, ix]
        sample = sample[np.isfinite(sample)]
        u = float(np.quantile(sample, quantile))
        excess = sample[sample > u] - u
        try:
            _check_excesses(excess, min_excess)
        except FitError as e:
            raise FitError(f"Celda ({iy}, {ix}): {e}")
        lam = excess.size / sample.size
        threshold[iy, ix], rate[iy, ix], n_exceed[iy, ix] = u, lam, excess.size
        xs, ps = _empirical_nodes(sample, u, lam, max_nodes)
        node_x[:xs.size, iy, ix] = xs
        node_p[:ps.size, iy, ix] = ps
        excess_rows.append(excess)

    for start in range(0, len(cells), CHUNK_CELLS):
        rows = excess_rows[start:start + CHUNK_CELLS]
        width = max(r.size for r in rows)
        x = np.zeros((len(rows), width))
        for i, r in enumerate(rows):
            x[i, :r.size] = r
        n = np.array([float(r.size) for r in rows])
        try:
            s_hat, xi_hat = _fit_rows(x, n)
        except ConvergenceError as e:
            raise ConvergenceError(f"Bloque de celdas desde {cells[start]}: {e}", iterations=e.iterations)
        for (iy, ix), s_val, xi_val in zip(cells[start:start + CHUNK_CELLS], s_hat, xi_hat):
            sigma[iy, ix], xi[iy, ix] = s_val, xi_val
        log_progress(min(start + CHUNK_CELLS, len(cells)), len(cells), "Ajuste GPD")

    logger.info(f"Modelo marginal ajustado en {len(cells)} celdas (cuantil {quantile})")
    return MarginalModel(grid, mask.included.copy(), threshold, sigma, xi, rate, n_exceed,
                         node_x, node_p, exp_cap)


# Transforms

def _cell_to_exp(model: MarginalModel, iy: int, ix: int, x: np.ndarray, counters: Counter) -> np.ndarray:
    fit = model.cell_fit(iy, ix)
    xs, ps = model.cell_nodes(iy, ix)
    if xs[0] > 0:
        xs, ps = np.r_[0.0, xs], np.r_[0.0, ps]
    out = np.full(x.shape, np.nan)
    finite = np.isfinite(x)
    body = finite & (x <= fit.threshold)
    tail = finite & (x > fit.threshold)
    out[body] = -np.log1p(-np.interp(x[body], xs, ps))
    if tail.any():
        survival = gpd_survival(fit, x[tail] - fit.threshold)
        survival = np.atleast_1d(survival)
        beyond = survival <= 0
        with np.errstate(divide="ignore"):
            values = -math.log(fit.exceed_rate) - np.log(np.where(beyond, 1.0, survival))
        values = np.where(beyond, model.exp_cap, values)
        counters["exp_cap"] += int(beyond.sum())
        out[tail] = values
    return out


def _cell_from_exp(model: MarginalModel, iy: int, ix: int, e: np.ndarray) -> np.ndarray:
    fit = model.cell_fit(iy, ix)
    xs, ps = model.cell_nodes(iy, ix)
    out = np.full(e.shape, np.nan)
    finite = ~np.isnan(e)
    body = finite & (e <= -math.log(fit.exceed_rate))
    tail = finite & ~body
    out[body] = np.interp(-np.expm1(-e[body]), ps, xs)
    if tail.any():
        survival = np.exp(-e[tail]) / fit.exceed_rate
        if abs(fit.xi) < XI_ZERO:
            excess = -fit.sigma * np.log(survival)
        else:
            excess = fit.sigma / fit.xi * np.expm1(-fit.xi * np.log(survival))
        out[tail] = fit.threshold + excess
    return out


def to_exp_margins(model: MarginalModel, stack: GriddedFieldStack,
                   counters: Optional[Counter] = None) -> GriddedFieldStack:
    """X^E = -log(1 - F_s(X)) celda a celda; las celdas enmascaradas quedan como NaN"""
    if stack.scale_tag is not ScaleTag.OBSERVED:
        raise ValueError(f"Se esperaba una pila observada, no {stack.scale_tag.name}")
    if stack.grid != model.grid:
        raise ValueError("La pila no coincide con la rejilla del modelo marginal")
    counters = counters if counters is not None else Counter()
    before = counters["exp_cap"]
    out = np.full(stack.values.shape, np.nan)
    for iy, ix in zip(*np.nonzero(model.included)):
        out[:, iy, ix] = _cell_to_exp(model, int(iy), int(ix), stack.values[:, iy, ix], counters)
    clamped = counters["exp_cap"] - before
    if clamped:
        logger.warning(f"{clamped} valores por encima del extremo GPD se fijaron en {model.exp_cap}")
    return stack.with_values(out, ScaleTag.EXP1)


def from_exp_margins(model: MarginalModel, stack: GriddedFieldStack) -> GriddedFieldStack:
    """X = F_s^{-1}(1 - exp(-X^E)); NaN se conserva como valor ausente"""
    if stack.scale_tag is not ScaleTag.EXP1:
        raise ValueError(f"Se esperaba una pila Exp(1), no {stack.scale_tag.name}")
    if stack.grid != model.grid:
        raise ValueError("La pila no coincide con la rejilla del modelo marginal")
    out = np.full(stack.values.shape, np.nan)
    for iy, ix in zip(*np.nonzero(model.included)):
        out[:, iy, ix] = _cell_from_exp(model, int(iy), int(ix), stack.values[:, iy, ix])
    return stack.with_values(out, ScaleTag.OBSERVED)


def to_exp_value(model: MarginalModel, iy: int, ix: int, x) -> np.ndarray:
    """Transformación de valores sueltos de una celda (error si está enmascarada)"""
    return _cell_to_exp(model, iy, ix, np.atleast_1d(np.asarray(x, dtype=float)), Counter())


def from_exp_value(model: MarginalModel, iy: int, ix: int, e) -> np.ndarray:
    return _cell_from_exp(model, iy, ix, np.atleast_1d(np.asarray(e, dtype=float)))

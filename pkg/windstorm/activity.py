import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import expit, logit

from config import ActivitySection
from windstorm.errors import ConvergenceError, FitError
from windstorm.tracks import StormTrack

logger = logging.getLogger(__name__)

ACTIVATION = "activation"
TERMINATION = "termination"
COVARIATES = {
    ACTIVATION: ("vorticity", "lon", "lat"),
    TERMINATION: ("sqrt_delta", "w"),
}
DEGREE = 3
SEPARATION_ETA = 25.0
Z_95 = 1.959963984540054


@dataclass(frozen=True, eq=False)
class Smooth:
    """Suavizado B-spline cúbico centrado (restricción de suma nula) de una covariable"""
    name: str
    index: int
    knots: np.ndarray
    lower: float
    upper: float
    constraint: np.ndarray
    start: int
    stop: int

    def design(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), self.lower, self.upper)
        basis = BSpline.design_matrix(x, self.knots, DEGREE).toarray()
        return basis @ self.constraint


@dataclass(frozen=True, eq=False)
class ActivityModel:
    """GAM logístico de Bernoulli: logit p = b0 + sum_i beta_i(nu_i)"""
    kind: str
    covariates: Tuple[str, ...]
    intercept: float
    smooths: Tuple[Smooth, ...] = ()
    coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lambdas: Tuple[float, ...] = ()
    covariance: Optional[np.ndarray] = None
    medians: Tuple[float, ...] = ()
    edf: float = 1.0

    @classmethod
    def constant(cls, kind: str, probability: float) -> "ActivityModel":
        """Modelo sin covariables con probabilidad fija (0 y 1 admitidos)"""
        if not 0.0 <= probability <= 1.0:
            raise ValueError(f"Probabilidad fuera de [0, 1]: {probability}")
        with np.errstate(divide="ignore"):
            intercept = float(logit(probability))
        names = COVARIATES.get(kind, ())
        return cls(kind, names, intercept, medians=tuple(0.0 for _ in names))

    def linear_predictor(self, values: np.ndarray) -> np.ndarray:
        values = np.atleast_2d(np.asarray(values, dtype=float))
        eta = np.full(values.shape[0], self.intercept)
        for smooth in self.smooths:
            eta = eta + smooth.design(values[:, smooth.index]) @ self.coef[smooth.start:smooth.stop]
        return eta

    def probability(self, values: Sequence[float]) -> float:
        return float(predict_activity(self, np.asarray(values, dtype=float)[None, :])[0][0])


def predict_activity(model: ActivityModel, covariates) -> Tuple[np.ndarray, np.ndarray]:
    """Probabilidades p en (0, 1) y marca de las filas recortadas al rango de entrenamiento"""
    values = np.atleast_2d(np.asarray(covariates, dtype=float))
    if values.shape[1] != len(model.covariates):
        raise ValueError(f"Se esperaban {len(model.covariates)} covariables, hay {values.shape[1]}")
    clamped = np.zeros(values.shape[0], dtype=bool)
    for smooth in model.smooths:
        x = values[:, smooth.index]
        clamped |= (x < smooth.lower) | (x > smooth.upper)
    return expit(model.linear_predictor(values)), clamped


# Fitting

def _second_difference(k: int) -> np.ndarray:
    return np.diff(np.eye(k), n=2, axis=0)


def _build_smooth(name: str, index: int, x: np.ndarray, n_knots: int, start: int):
    lower, upper = float(x.min()), float(x.max())
    interior = np.unique(np.quantile(x, np.linspace(0, 1, n_knots + 2)[1:-1]))
    interior = interior[(interior > lower) & (interior < upper)]
    knots = np.r_[[lower] * (DEGREE + 1), interior, [upper] * (DEGREE + 1)]
    basis = BSpline.design_matrix(x, knots, DEGREE).toarray()
    k = basis.shape[1]
    # Reparametrización en el espacio nulo de la restricción de centrado
    q, _ = np.linalg.qr(basis.sum(axis=0)[:, None], mode="complete")
    constraint = q[:, 1:]
    penalty_root = _second_difference(k) @ constraint if k > 2 else np.zeros((1, k - 1))
    smooth = Smooth(name, index, knots, lower, upper, constraint, start, start + k - 1)
    return smooth, basis @ constraint, penalty_root.T @ penalty_root


def _deviance(y: np.ndarray, mu: np.ndarray) -> float:
    mu = np.clip(mu, 1e-15, 1 - 1e-15)
    return float(-2.0 * (y * np.log(mu) + (1 - y) * np.log1p(-mu)).sum())


@dataclass
class _PirlsFit:
    beta: np.ndarray
    hessian: np.ndarray
    info: np.ndarray
    deviance: float
    separated: bool


def _pirls(x: np.ndarray, y: np.ndarray, penalty: np.ndarray, beta: np.ndarray, max_iter: int) -> _PirlsFit:
    """Mínimos cuadrados penalizados iterativamente reponderados para el enlace logístico"""
    eta = x @ beta
    dev_old = math.inf
    for iteration in range(1, max_iter + 1):
        mu = np.clip(expit(eta), 1e-10, 1 - 1e-10)
        w = mu * (1 - mu)
        z = eta + (y - mu) / w
        xtw = x.T * w
        info = xtw @ x
        hessian = info + penalty
        try:
            beta = np.linalg.solve(hessian, xtw @ z)
        except np.linalg.LinAlgError:
            beta = np.linalg.lstsq(hessian, xtw @ z, rcond=None)[0]
        eta = x @ beta
        dev = _deviance(y, expit(eta))
        if abs(dev - dev_old) <= 1e-9 * (abs(dev) + 0.1):
            mu = np.clip(expit(eta), 1e-10, 1 - 1e-10)
            info = (x.T * (mu * (1 - mu))) @ x
            return _PirlsFit(beta, info + penalty, info, dev, bool(np.abs(eta).max() > SEPARATION_ETA))
        dev_old = dev
    raise ConvergenceError("P-IRLS no convergió", iterations=max_iter)


def _penalty(blocks: List[np.ndarray], lambdas: Sequence[float], p: int) -> np.ndarray:
    penalty = np.zeros((p, p))
    start = 1
    for block, lam in zip(blocks, lambdas):
        k = block.shape[0]
        penalty[start:start + k, start:start + k] = lam * block
        start += k
    return penalty


def _gcv(fit: _PirlsFit, n: int) -> float:
    edf = float(np.trace(np.linalg.solve(fit.hessian, fit.info)))
    if edf >= n:
        return math.inf
    return n * fit.deviance / (n - edf) ** 2


def fit_gam(covariates, events, names: Sequence[str], config: ActivitySection,
            kind: str = ACTIVATION) -> ActivityModel:
    """Ajusta el GAM logístico con un suavizado por covariable y penalización elegida por GCV"""
    values = np.atleast_2d(np.asarray(covariates, dtype=float))
    y = np.asarray(events, dtype=float).ravel()
    if values.shape[0] != y.size:
        raise ValueError("Covariables y eventos con distinta longitud")
    if values.shape[1] != len(names):
        raise ValueError(f"Se esperaban {len(names)} covariables, hay {values.shape[1]}")
    if y.size < config.min_observations:
        raise FitError(f"Observaciones insuficientes para el modelo de {kind}: {y.size} < {config.min_observations}")
    if not np.all(np.isfinite(values)):
        raise FitError(f"Covariables no finitas en el modelo de {kind}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("Los eventos deben ser 0/1")
    n = y.size
    medians = tuple(float(np.median(values[:, j])) for j in range(values.shape[1]))

    smooths, columns, blocks = [], [np.ones((n, 1))], []
    start = 1
    for j, name in enumerate(names):
        if np.ptp(values[:, j]) == 0:
            logger.info(f"Covariable constante '{name}' en el modelo de {kind}: se omite su suavizado")
            continue
        smooth, design, block = _build_smooth(name, j, values[:, j], config.n_knots, start)
        smooths.append(smooth)
        columns.append(design)
        blocks.append(block)
        start = smooth.stop
    x = np.hstack(columns)
    p = x.shape[1]
    rate = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    beta0 = np.zeros(p)
    beta0[0] = logit(rate)

    grid = np.logspace(math.log10(config.lambda_min), math.log10(config.lambda_max), config.n_lambda)
    lambdas = [float(grid[config.n_lambda // 2])] * len(blocks)
    best_fit: Optional[_PirlsFit] = None
    best_score = math.inf
    if blocks:
        for _ in range(2):
            for i in range(len(blocks)):
                for lam in grid:
                    trial = list(lambdas)
                    trial[i] = float(lam)
                    try:
                        fit = _pirls(x, y, _penalty(blocks, trial, p), beta0.copy(), config.max_iter)
                    except ConvergenceError:
                        continue
                    if fit.separated:
                        continue
                    score = _gcv(fit, n)
                    if score < best_score:
                        best_score, best_fit, lambdas = score, fit, trial
    else:
        best_fit = _pirls(x, y, np.zeros((p, p)), beta0, config.max_iter)

    if best_fit is None:
        logger.warning(f"Separación completa o sin convergencia en el modelo de {kind}: "
                       f"se usa la penalización máxima {config.lambda_max}")
        lambdas = [config.lambda_max] * len(blocks)
        best_fit = _pirls(x, y, _penalty(blocks, lambdas, p), beta0, config.max_iter)

    covariance = np.linalg.inv(best_fit.hessian)
    edf = float(np.trace(covariance @ best_fit.info))
    logger.info(f"Modelo de {kind} ajustado: n={n}, edf={edf:.2f}, lambdas={[f'{lam:.3g}' for lam in lambdas]}")
    return ActivityModel(kind, tuple(names), float(best_fit.beta[0]), tuple(smooths), best_fit.beta.copy(),
                         tuple(lambdas), covariance, medians, edf)


def smooth_effect(model: ActivityModel, covariate: str, grid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Efecto suavizado beta_i(grid) con banda puntual del 95%"""
    grid = np.asarray(grid, dtype=float)
    for smooth in model.smooths:
        if smooth.name == covariate:
            design = smooth.design(grid)
            effect = design @ model.coef[smooth.start:smooth.stop]
            block = model.covariance[smooth.start:smooth.stop, smooth.start:smooth.stop]
            se = np.sqrt(np.einsum("ij,jk,ik->i", design, block, design))
            return effect, effect - Z_95 * se, effect + Z_95 * se
    if covariate in model.covariates:
        zeros = np.zeros(grid.shape)
        return zeros, zeros, zeros
    raise KeyError(f"Covariable desconocida '{covariate}' en el modelo de {model.kind}")


# Observations

def activity_observations(records, tracks: Sequence[StormTrack], kind: str) -> Tuple[np.ndarray, np.ndarray]:
    """Observaciones de Bernoulli (covariables, eventos) para activación o terminación"""
    by_id = {track.id: track for track in tracks}
    rows, events = [], []
    for record in records:
        track = by_id.get(record.track_id)
        if track is None:
            raise FitError(f"Registro sin trayectoria: {record.track_id}")
        if kind == ACTIVATION:
            for point in track.points:
                rows.append((point.vorticity, point.lon, point.lat))
                events.append(1.0 if record.is_active(point.t) else 0.0)
        elif kind == TERMINATION:
            for t, footprint in sorted(record.footprints.items()):
                covariates = (math.sqrt(footprint.features.delta), footprint.features.w)
                for neighbour in (t + 1, t - 1):
                    if 1 <= neighbour <= record.duration:
                        rows.append(covariates)
                        events.append(0.0 if record.is_active(neighbour) else 1.0)
        else:
            raise ValueError(f"Tipo de modelo desconocido: {kind}")
    width = len(COVARIATES[kind])
    return np.asarray(rows, dtype=float).reshape(-1, width), np.asarray(events)


def fit_activity_model(records, tracks: Sequence[StormTrack], kind: str, config: ActivitySection) -> ActivityModel:
    covariates, events = activity_observations(records, tracks, kind)
    return fit_gam(covariates, events, COVARIATES[kind], config, kind)


# Planning

@dataclass(frozen=True)
class ActivePhasePlan:
    t_a: Optional[int]
    t_omega: int
    duration: int
    phases: Tuple[Tuple[int, int], ...] = ()
    inits: Tuple[int, ...] = ()

    def __post_init__(self):
        previous = 0
        for t_s, t_t in self.phases:
            if not 1 <= t_s <= t_t <= self.duration or t_s <= previous:
                raise ValueError(f"Fases inválidas: {self.phases}")
            previous = t_t
        if len(self.inits) != len(self.phases):
            raise ValueError("Se requiere un paso de inicio por fase")
        if self.phases and not any(t_s <= self.t_a <= t_t for t_s, t_t in self.phases):
            raise ValueError(f"t_A={self.t_a} fuera de las fases {self.phases}")

    def active_steps(self) -> List[int]:
        return [t for t_s, t_t in self.phases for t in range(t_s, t_t + 1)]


CovariateSource = Callable[[int, int], Tuple[float, float]]


def plan_activity(track: StormTrack, activation: ActivityModel, termination: ActivityModel,
                  rng: np.random.Generator, footprint_covariates: Optional[CovariateSource] = None
                  ) -> ActivePhasePlan:
    """Planifica las fases activas: búsqueda desde t_Omega hacia delante y atrás, extensión y reactivación"""
    duration = track.duration
    t_omega = track.t_max_vorticity

    def activates(t: int) -> bool:
        p = track.point(t)
        return bool(rng.random() < activation.probability((p.vorticity, p.lon, p.lat)))

    def terminates(t_init: int, t: int) -> bool:
        if footprint_covariates is not None:
            covariates = footprint_covariates(t_init, t)
        else:
            covariates = termination.medians
        return bool(rng.random() < termination.probability(covariates))

    def extend(t_init: int, step: int) -> int:
        t = t_init
        while 1 <= t + step <= duration:
            if terminates(t_init, t):
                break
            t += step
        return t

    drawn = set()
    t_a = None
    for t in list(range(t_omega, duration + 1)) + list(range(t_omega - 1, 0, -1)):
        drawn.add(t)
        if activates(t):
            t_a = t
            break
    if t_a is None:
        return ActivePhasePlan(None, t_omega, duration)

    t_s = extend(t_a, -1) if t_a <= t_omega else t_a
    t_t = extend(t_a, +1) if t_a >= t_omega else t_a
    phases = [(t_s, t_t)]
    inits = [t_a]

    # Barridos de reactivación hacia el final y hacia el inicio de la trayectoria
    t = t_t + 2
    while t <= duration:
        if t not in drawn and activates(t):
            end = extend(t, +1)
            phases.append((t, end))
            inits.append(t)
            t = end + 2
        else:
            t += 1
    t = t_s - 2
    while t >= 1:
        if t not in drawn and activates(t):
            start = extend(t, -1)
            phases.append((start, t))
            inits.append(t)
            t = start - 2
        else:
            t -= 1

    order = np.argsort([phase[0] for phase in phases])
    return ActivePhasePlan(t_a, t_omega, duration, tuple(phases[i] for i in order), tuple(inits[i] for i in order))

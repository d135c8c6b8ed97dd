import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import FootprintSection, KdeSection
from windstorm.activity import ActivePhasePlan
from windstorm.ellipse import Ellipse, FootprintFeatures
from windstorm.errors import FitError
from windstorm.extract import Footprint, WindstormRecord
from windstorm.fields import Grid
from windstorm.kde import KdeModel, build_kde, conditional_sample
from windstorm.tracks import StormTrack
from windstorm.utils import bearing_from_south, offset_from_bearing, wrap_angle, wrap_axial

logger = logging.getLogger(__name__)

COMPONENTS = ("R_E", "Theta_E", "A", "B", "W", "Gamma", "R_W", "Theta_W")
CONDITIONERS = {
    "R_E": ("Omega",),
    "Theta_E": ("R_E",),
    "A": ("Omega", "R_E", "Theta_E"),
    "B": ("Omega", "R_E", "Theta_E"),
    "W": ("R_E", "Theta_E", "A", "B"),
    "Gamma": ("Theta_E",),
    "R_W": ("A",),
    "Theta_W": (),
}
CIRCULAR = frozenset({"Theta_E", "Gamma", "Theta_W"})
NON_NEGATIVE = frozenset({"R_E", "R_W"})
POSITIVE = frozenset({"A", "B", "W"})
LOCATION = ("lon", "lat")
MAX_REDRAWS = 20
MIN_SIZE = 1e-6


# State Helpers

def state_of(features: FootprintFeatures) -> Dict[str, float]:
    """Vector Z en la escala de modelado (Gamma se guarda como 2*Gamma, circular)"""
    return {
        "R_E": features.r_e, "Theta_E": features.theta_e, "A": features.a, "B": features.b,
        "W": features.w, "Gamma": wrap_angle(2.0 * features.gamma), "R_W": features.r_w,
        "Theta_W": features.theta_w,
    }


def features_of(t: int, state: Dict[str, float]) -> FootprintFeatures:
    return FootprintFeatures(
        t=t, a=state["A"], b=state["B"], w=state["W"], r_e=state["R_E"],
        theta_e=wrap_angle(state["Theta_E"]), r_w=state["R_W"], theta_w=wrap_angle(state["Theta_W"]),
        gamma=wrap_axial(0.5 * state["Gamma"]),
    )


def component_labels(name: str, lags: int) -> Tuple[str, ...]:
    return (name,) + tuple(f"{name}_lag{i}" for i in range(1, lags + 1)) + CONDITIONERS[name] + LOCATION


def _circular_dims(labels: Sequence[str]) -> Tuple[int, ...]:
    return tuple(i for i, label in enumerate(labels) if label.split("_lag")[0] in CIRCULAR)


# Models

@dataclass(frozen=True, eq=False)
class ComponentModel:
    """KDEs de una componente de Z, uno por número de retardos disponibles 1..k"""
    name: str
    by_lags: Dict[int, KdeModel]

    def model_for(self, lags: int) -> Tuple[int, KdeModel]:
        usable = [L for L in self.by_lags if L <= lags]
        if not usable:
            raise FitError(f"Sin modelo para {self.name} con {lags} retardos")
        L = max(usable)
        return L, self.by_lags[L]


@dataclass(frozen=True, eq=False)
class TransitionModel:
    order: int
    forward: Dict[str, ComponentModel]
    backward: Optional[Dict[str, ComponentModel]] = None
    window_lon: float = 20.0
    window_lat: float = 14.0
    min_window_tuples: int = 30
    max_rejections: int = 100

    def components(self, direction: int) -> Dict[str, ComponentModel]:
        if direction < 0 and self.backward is not None:
            return self.backward
        return self.forward


@dataclass(frozen=True, eq=False)
class InitialModel:
    """KDE conjunto de Z con (lon, lat, Omega) como condicionantes"""
    kde: KdeModel

    @property
    def cond_dims(self) -> Tuple[int, ...]:
        return self.kde.dims("lon", "lat", "Omega")


@dataclass(frozen=True)
class _Step:
    state: Dict[str, float]
    lon: float
    lat: float
    omega: float


def _phase_steps(records, tracks: Sequence[StormTrack]) -> List[List[_Step]]:
    by_id = {track.id: track for track in tracks}
    phases = []
    for record in records:
        track = by_id.get(record.track_id)
        if track is None:
            raise FitError(f"Registro sin trayectoria: {record.track_id}")
        for t_s, t_t in record.phases:
            steps = []
            for t in range(t_s, t_t + 1):
                point = track.point(t)
                steps.append(_Step(state_of(record.footprints[t].features), point.lon, point.lat,
                                   point.vorticity))
            phases.append(steps)
    return phases


def _row(name: str, steps: List[_Step], j: int, lag_steps: List[int]) -> List[float]:
    step = steps[j]
    extra = {"Omega": step.omega}
    row = [step.state[name]] + [steps[i].state[name] for i in lag_steps]
    row += [extra.get(c, step.state.get(c)) for c in CONDITIONERS[name]]
    return row + [step.lon, step.lat]


def _fit_components(phases: List[List[_Step]], order: int, kde_config: KdeSection,
                    reverse: bool) -> Dict[str, ComponentModel]:
    components = {}
    for name in COMPONENTS:
        by_lags = {}
        for lags in range(1, order + 1):
            rows = []
            for steps in phases:
                indices = range(len(steps))
                for j in indices:
                    lag_steps = [j + i for i in range(1, lags + 1)] if reverse else [j - i for i in range(1, lags + 1)]
                    if all(0 <= i < len(steps) for i in lag_steps):
                        rows.append(_row(name, steps, j, lag_steps))
            if len(rows) < 2:
                if lags == 1:
                    raise FitError(f"Datos insuficientes para la componente {name}: {len(rows)} tuplas")
                continue
            labels = component_labels(name, lags)
            by_lags[lags] = build_kde(np.asarray(rows), kde_config.factor, kde_config.oriented,
                                      _circular_dims(labels), labels)
        components[name] = ComponentModel(name, by_lags)
    return components


def fit_transition_model(records, tracks: Sequence[StormTrack], config: FootprintSection,
                         kde_config: KdeSection) -> Tuple[TransitionModel, InitialModel]:
    """KDEs de transición por componente (orden k) y KDE inicial, a partir del catálogo"""
    if config.order < 1:
        raise ValueError(f"El orden de Markov debe ser al menos 1: {config.order}")
    phases = _phase_steps(records, tracks)
    if not any(len(steps) >= config.order + 1 for steps in phases):
        raise FitError(f"Ninguna fase tiene {config.order + 1} pasos activos consecutivos")
    forward = _fit_components(phases, config.order, kde_config, reverse=False)
    backward = _fit_components(phases, config.order, kde_config, reverse=True) if config.refit_backward else None

    initial_rows = [[step.state[c] for c in COMPONENTS] + [step.lon, step.lat, step.omega]
                    for steps in phases for step in steps]
    if len(initial_rows) < 2:
        raise FitError("Datos insuficientes para el modelo inicial")
    labels = COMPONENTS + LOCATION + ("Omega",)
    initial = build_kde(np.asarray(initial_rows), kde_config.factor, kde_config.oriented,
                        _circular_dims(labels), labels)
    n_tuples = sum(len(steps) for steps in phases)
    logger.info(f"Modelo de transición ajustado: {len(phases)} fases, {n_tuples} pasos, orden {config.order}")
    transition = TransitionModel(config.order, forward, backward, config.window_lon, config.window_lat,
                                 config.min_window_tuples, config.max_rejections)
    return transition, InitialModel(initial)


# Simulation

def window_subset(lon_data: np.ndarray, lat_data: np.ndarray, lon: float, lat: float,
                  width: float, height: float, minimum: int) -> Optional[np.ndarray]:
    """Índices dentro de la ventana centrada en (lon, lat); se duplica hasta reunir `minimum` tuplas"""
    n = lon_data.size
    if n <= minimum:
        return None
    while True:
        inside = np.flatnonzero((np.abs(lon_data - lon) <= width / 2) & (np.abs(lat_data - lat) <= height / 2))
        if inside.size >= minimum:
            return inside
        if inside.size == n:
            return None
        width, height = 2 * width, 2 * height


def _uniform_in_ellipse(a: float, b: float, gamma: float, rng: np.random.Generator) -> Tuple[float, float]:
    r = math.sqrt(rng.random())
    phi = 2 * math.pi * rng.random()
    major = np.array([-math.sin(gamma), math.cos(gamma)])
    minor = np.array([math.cos(gamma), math.sin(gamma)])
    offset = a * r * math.cos(phi) * major + b * r * math.sin(phi) * minor
    return bearing_from_south(*offset)


@dataclass(eq=False)
class FootprintSimulator:
    """Simula perezosamente Z_t por fase, de modo que la planificación vea las huellas simuladas"""
    transition: TransitionModel
    initial: InitialModel
    track: StormTrack
    rng: np.random.Generator
    counters: Counter = field(default_factory=Counter)
    phases: Dict[int, Dict[int, Dict[str, float]]] = field(default_factory=dict)

    def _draw(self, kde: KdeModel, cond_dims, cond_values, lon: float, lat: float,
              lon_dim: int, lat_dim: int) -> np.ndarray:
        subset = window_subset(kde.data[:, lon_dim], kde.data[:, lat_dim], lon, lat,
                               self.transition.window_lon, self.transition.window_lat,
                               self.transition.min_window_tuples)
        return conditional_sample(kde, cond_dims, cond_values, self.rng, subset, self.counters)

    def _initial_state(self, t: int) -> Dict[str, float]:
        point = self.track.point(t)
        kde = self.initial.kde
        cond_dims = self.initial.cond_dims
        lon_dim, lat_dim = cond_dims[0], cond_dims[1]
        for _ in range(MAX_REDRAWS):
            draw = self._draw(kde, cond_dims, (point.lon, point.lat, point.vorticity),
                              point.lon, point.lat, lon_dim, lat_dim)
            state = dict(zip(COMPONENTS, draw))
            if self._valid_sizes(state):
                break
        state = self._fix_sizes(state)
        if not self._max_inside(state):
            self._fallback_max(state)
        return state

    def _valid_sizes(self, state: Dict[str, float]) -> bool:
        return (all(state[c] > 0 for c in POSITIVE) and all(state[c] >= 0 for c in NON_NEGATIVE)
                and state["A"] >= state["B"])

    def _fix_sizes(self, state: Dict[str, float]) -> Dict[str, float]:
        if self._valid_sizes(state):
            return state
        self.counters["size_fix"] += 1
        for c in POSITIVE:
            state[c] = max(state[c], MIN_SIZE)
        for c in NON_NEGATIVE:
            state[c] = max(state[c], 0.0)
        if state["B"] > state["A"]:
            state["A"], state["B"] = state["B"], state["A"]
        return state

    def _max_inside(self, state: Dict[str, float]) -> bool:
        ellipse = Ellipse.from_geometry((0.0, 0.0), state["A"], state["B"], wrap_axial(0.5 * state["Gamma"]))
        return bool(ellipse.contains(offset_from_bearing(state["R_W"], state["Theta_W"]))[0])

    def _fallback_max(self, state: Dict[str, float]) -> None:
        self.counters["max_fallback"] += 1
        state["R_W"], state["Theta_W"] = _uniform_in_ellipse(
            state["A"], state["B"], wrap_axial(0.5 * state["Gamma"]), self.rng)

    def _component(self, name: str, state: Dict[str, float], history: List[Dict[str, float]],
                   t: int, direction: int) -> float:
        point = self.track.point(t)
        lags, kde = self.transition.components(direction)[name].model_for(len(history))
        cond_values = [history[i][name] for i in range(lags)]
        cond_values += [point.vorticity if c == "Omega" else state[c] for c in CONDITIONERS[name]]
        cond_values += [point.lon, point.lat]
        cond_dims = tuple(range(1, kde.d))
        value = None
        for _ in range(MAX_REDRAWS):
            value = float(self._draw(kde, cond_dims, cond_values, point.lon, point.lat, kde.d - 2, kde.d - 1)[0])
            if name in POSITIVE and value <= 0 or name in NON_NEGATIVE and value < 0:
                continue
            if name == "B" and value > state["A"]:
                continue
            return value
        self.counters["size_fix"] += 1
        if name == "B":
            return min(max(value, MIN_SIZE), state["A"])
        return max(value, MIN_SIZE if name in POSITIVE else 0.0)

    def _propagate(self, t: int, history: List[Dict[str, float]], direction: int) -> Dict[str, float]:
        state: Dict[str, float] = {}
        for name in COMPONENTS:
            if name == "R_W":
                break
            state[name] = self._component(name, state, history, t, direction)
        for _ in range(self.transition.max_rejections):
            state["R_W"] = self._component("R_W", state, history, t, direction)
            state["Theta_W"] = self._component("Theta_W", state, history, t, direction)
            if self._max_inside(state):
                return state
        self._fallback_max(state)
        return state

    def state(self, t_init: int, t: int) -> Dict[str, float]:
        """Estado Z_t de la fase iniciada en t_init, simulando los pasos intermedios si hace falta"""
        phase = self.phases.setdefault(t_init, {})
        if t_init not in phase:
            phase[t_init] = self._initial_state(t_init)
        direction = 1 if t >= t_init else -1
        current = t_init
        while current != t:
            current += direction
            if current not in phase:
                history = []
                for i in range(1, self.transition.order + 1):
                    previous = current - direction * i
                    if previous not in phase or (previous - t_init) * direction < 0:
                        break
                    history.append(phase[previous])
                phase[current] = self._propagate(current, history, direction)
        return phase[t]

    def termination_covariates(self, t_init: int, t: int) -> Tuple[float, float]:
        state = self.state(t_init, t)
        return math.sqrt(state["A"] * state["B"]), state["W"]

    def record(self, plan: ActivePhasePlan, grid: Grid) -> WindstormRecord:
        footprints: Dict[int, Footprint] = {}
        xs, ys = grid.lonlat_to_cell(self.track.lon, self.track.lat)
        for (t_s, t_t), t_init in zip(plan.phases, plan.inits):
            for t in range(t_s, t_t + 1):
                features = features_of(t, self.state(t_init, t))
                ellipse = features.ellipse((xs[t - 1], ys[t - 1]))
                footprints[t] = Footprint(ellipse, features)
        return WindstormRecord(self.track.id, self.track.duration, footprints)

    def report(self) -> None:
        for key, count in sorted(self.counters.items()):
            if count:
                logger.warning(f"Trayectoria {self.track.id}: {count} eventos '{key}' en la simulación de huellas")


def simulate_footprints(track: StormTrack, plan: ActivePhasePlan, transition: TransitionModel,
                        initial: InitialModel, grid: Grid, rng: np.random.Generator,
                        counters: Optional[Counter] = None) -> WindstormRecord:
    """Simula Z_t en todos los pasos activos del plan: inicial en t_A y propagación hacia delante y atrás"""
    simulator = FootprintSimulator(transition, initial, track, rng, counters if counters is not None else Counter())
    record = simulator.record(plan, grid)
    simulator.report()
    return record

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from config import RunConfig
from windstorm import activity
from windstorm.activity import ACTIVATION, TERMINATION, ActivePhasePlan, ActivityModel, plan_activity
from windstorm.evolution import FootprintSimulator, InitialModel, TransitionModel, fit_transition_model
from windstorm.extract import WindstormRecord
from windstorm.fields import GriddedFieldStack, Grid
from windstorm.tracks import StormTrack
from windstorm.utils import derive_rng
from windstorm.windfield import AlphaModel, FootprintBank, build_footprint_bank, fit_alpha_model

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FittedStormModel:
    """Modelos ajustados de actividad, evolución de huellas y campos de viento"""
    grid: Grid
    activation: ActivityModel
    termination: ActivityModel
    transition: TransitionModel
    initial: InitialModel
    alpha: AlphaModel
    bank: FootprintBank
    config: RunConfig

    def activity_model(self, kind: str) -> ActivityModel:
        if kind == ACTIVATION:
            return self.activation
        if kind == TERMINATION:
            return self.termination
        raise ValueError(f"Tipo de modelo desconocido: {kind}")


def fit_storm_model(records: Sequence[WindstormRecord], tracks: Sequence[StormTrack],
                    exp_stacks: Dict[str, GriddedFieldStack], config: RunConfig) -> FittedStormModel:
    """Ajusta actividad, transición, modelo inicial, alcance y banco de huellas a partir del catálogo"""
    if not exp_stacks:
        raise ValueError("Se necesitan los campos Exp(1) de las trayectorias")
    grid = next(iter(exp_stacks.values())).grid
    logger.info(f"Ajustando el modelo de tormentas con {len(records)} registros")
    activation = activity.fit_activity_model(records, tracks, ACTIVATION, config.activity)
    termination = activity.fit_activity_model(records, tracks, TERMINATION, config.activity)
    transition, initial = fit_transition_model(records, tracks, config.footprint, config.kde)
    alpha = fit_alpha_model(records, tracks, exp_stacks, config.windfield, config.kde)
    bank = build_footprint_bank(records, tracks, exp_stacks)
    return FittedStormModel(grid, activation, termination, transition, initial, alpha, bank, config)


def simulate_windstorm(model: FittedStormModel, track: StormTrack, seed: int,
                       counters: Optional[Counter] = None) -> Tuple[ActivePhasePlan, WindstormRecord]:
    """Planificación de actividad y evolución de huellas intercaladas sobre un único flujo aleatorio"""
    rng = derive_rng(seed, "storm", track.id)
    simulator = FootprintSimulator(model.transition, model.initial, track, rng,
                                   counters if counters is not None else Counter())
    plan = plan_activity(track, model.activation, model.termination, rng,
                         footprint_covariates=simulator.termination_covariates)
    record = simulator.record(plan, model.grid)
    simulator.report()
    return plan, record


def smooth_effect(model: FittedStormModel, kind: str, covariate: str, grid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return activity.smooth_effect(model.activity_model(kind), covariate, grid)

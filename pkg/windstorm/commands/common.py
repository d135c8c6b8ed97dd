import functools
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import click

from data.dao.field_stack_dao import FieldStackDAO
from data.dao.marginal_dao import MarginalDAO
from windstorm.errors import (ConfigError, ExtractionError, FieldFormatError, FitError, SimulationError,
                              TrackFormatError)
from windstorm.fields import GriddedFieldStack
from windstorm.jobs import run_track_jobs
from windstorm.margins import MarginalModel, to_exp_margins
from windstorm.tracks import StormTrack

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_FIT = 3

TABLE_FLOAT_FORMAT = "%.10g"


def exit_code_for(error: Exception) -> int:
    if isinstance(error, (FileNotFoundError, FieldFormatError, TrackFormatError)):
        return EXIT_FORMAT
    if isinstance(error, (FitError, ExtractionError, SimulationError)):
        return EXIT_FIT
    return EXIT_USAGE


def handle_errors(func):
    """Traduce los errores del dominio a códigos de salida del CLI"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ConfigError, ValueError, FileNotFoundError, FieldFormatError, TrackFormatError,
                FitError, ExtractionError, SimulationError) as e:
            code = exit_code_for(e)
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"Error: {e}", err=True)
            click.get_current_context().exit(code)

    return wrapper


def load_marginal(directory: Path) -> MarginalModel:
    return MarginalDAO(directory).get()


def exp_stacks_for(tracks: Sequence[StormTrack], fields: Path, marginal: MarginalModel,
                   threads: int) -> Tuple[Dict[str, GriddedFieldStack], Counter]:
    """Lee la pila observada de cada trayectoria y la lleva a márgenes Exp(1)"""
    dao = FieldStackDAO(fields)

    def job(track: StormTrack):
        counters = Counter()
        return to_exp_margins(marginal, dao.get(track.id), counters), counters

    results = run_track_jobs(job, list(tracks), threads, "Márgenes Exp(1)")
    counters = Counter()
    for _, partial in results:
        counters.update(partial)
    return {track.id: stack for track, (stack, _) in zip(tracks, results)}, counters


def tracks_in(tracks: Sequence[StormTrack], ids: Sequence[str]) -> List[StormTrack]:
    by_id = {track.id: track for track in tracks}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"Trayectorias sin datos en el archivo de trayectorias: {', '.join(missing[:5])}")
    return [by_id[i] for i in ids]

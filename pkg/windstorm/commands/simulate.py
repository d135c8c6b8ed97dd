import logging
from collections import Counter
from pathlib import Path
from typing import Optional

import click
import pandas as pd

from config import RunConfig
from data.dao.catalog_dao import CatalogDAO
from data.dao.field_stack_dao import FieldStackDAO
from data.dao.model_dao import ModelDAO
from data.dao.tracks_dao import TracksDAO
from storage import RunStore
from windstorm.commands.common import TABLE_FLOAT_FORMAT, handle_errors, load_marginal
from windstorm.jobs import run_track_jobs
from windstorm.storm_model import simulate_windstorm
from windstorm.tracks import StormTrack
from windstorm.windfield import synthesize_windstorm_fields

logger = logging.getLogger(__name__)

INDEX_COLUMNS = ["track_id", "t", "file", "cx", "cy", "A", "B", "Gamma", "W"]
PLAN_COLUMNS = ["track_id", "source", "duration", "t_a", "t_omega", "phases"]


def simulated_id(i: int, source: StormTrack) -> str:
    return f"S{i + 1:05d}-{source.id}"


def _phase_text(phases) -> str:
    return ";".join(f"{t_s}-{t_t}" for t_s, t_t in phases)


@click.command("simulate")
@click.option("--model", "model_dir", required=True, type=click.Path(path_type=Path),
              help="Directorio del paquete del modelo")
@click.option("--tracks", "tracks_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--margins", type=click.Path(path_type=Path), default=None,
              help="Modelo marginal, necesario para los campos de viento")
@click.option("--n", "n_storms", type=click.IntRange(min=1), default=None,
              help="Número de tormentas (por defecto, una por trayectoria)")
@click.option("--fields/--no-fields", "with_fields", default=True, help="Simular también los campos de viento")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.pass_obj
@handle_errors
def simulate(config: RunConfig, model_dir: Path, tracks_path: Path, margins: Optional[Path],
             n_storms: Optional[int], with_fields: bool, out: Path):
    """Simula un catálogo de tormentas recorriendo las trayectorias de entrada en orden"""
    model = ModelDAO(model_dir).get()
    sources = TracksDAO(tracks_path).get_all()
    if with_fields and margins is None:
        raise ValueError("--margins es obligatorio para simular campos (o use --no-fields)")
    marginal = load_marginal(margins) if with_fields else None
    if marginal is not None and marginal.grid != model.grid:
        raise ValueError("El modelo marginal y el modelo de tormentas usan rejillas distintas")

    n_storms = n_storms or len(sources)
    tracks = [
        StormTrack(simulated_id(i, sources[i % len(sources)]), sources[i % len(sources)].points)
        for i in range(n_storms)
    ]
    seed = config.run.seed
    store = RunStore(out)
    fields = FieldStackDAO(store.directory / "fields")

    def job(track: StormTrack):
        counters = Counter()
        plan, record = simulate_windstorm(model, track, seed, counters)
        index_rows = []
        if marginal is not None and record.footprints:
            stack = synthesize_windstorm_fields(record, track, model.alpha, model.bank, marginal, seed,
                                                config.windfield, counters)
            path = fields.save(track.id, stack)
            for t, footprint in sorted(record.footprints.items()):
                f = footprint.features
                index_rows.append({"track_id": track.id, "t": t, "file": path.name,
                                   "cx": footprint.ellipse.centre[0], "cy": footprint.ellipse.centre[1],
                                   "A": f.a, "B": f.b, "Gamma": f.gamma, "W": f.w})
        return plan, record, index_rows, counters

    results = run_track_jobs(job, tracks, config.run.threads, "Simulación")

    counters = Counter()
    plans, records, index_rows = [], [], []
    for track, (plan, record, rows, partial) in zip(tracks, results):
        counters.update(partial)
        records.append(record)
        index_rows.extend(rows)
        plans.append({"track_id": track.id, "source": track.id.split("-", 1)[1], "duration": plan.duration,
                      "t_a": plan.t_a if plan.t_a is not None else "", "t_omega": plan.t_omega,
                      "phases": _phase_text(plan.phases)})

    CatalogDAO(store.path("catalog.csv")).save(records)
    TracksDAO(store.path("tracks.csv")).save(tracks)
    pd.DataFrame(plans, columns=PLAN_COLUMNS).to_csv(store.path("plans.csv"), index=False)
    if marginal is not None:
        pd.DataFrame(index_rows, columns=INDEX_COLUMNS).to_csv(store.path("index.csv"), index=False,
                                                               float_format=TABLE_FLOAT_FORMAT)
    for name, count in sorted(counters.items()):
        if count:
            logger.warning(f"Contador {name}: {count}")
    inputs = [model_dir, tracks_path] + ([margins] if margins is not None else [])
    store.write_manifest("simulate", config, inputs, extra={
        "n_storms": n_storms,
        "n_active": sum(len(record.footprints) for record in records),
        "counters": dict(sorted(counters.items())),
    })
    click.echo(f"{n_storms} tormentas simuladas en {store.directory}")

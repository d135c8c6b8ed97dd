import logging
from collections import Counter
from pathlib import Path

import click

from config import RunConfig
from data.dao.catalog_dao import CatalogDAO
from data.dao.tracks_dao import TracksDAO
from storage import RunStore
from windstorm.commands.common import exp_stacks_for, handle_errors, load_marginal
from windstorm.extract import extract_windstorm
from windstorm.fields import CellMask
from windstorm.jobs import run_track_jobs

logger = logging.getLogger(__name__)


@click.command("extract")
@click.option("--fields", required=True, type=click.Path(path_type=Path), help="Directorio de pilas observadas")
@click.option("--tracks", "tracks_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--margins", required=True, type=click.Path(path_type=Path), help="Directorio del modelo marginal")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.pass_obj
@handle_errors
def extract(config: RunConfig, fields: Path, tracks_path: Path, margins: Path, out: Path):
    """Extrae el catálogo de huellas elípticas de cada trayectoria"""
    tracks = TracksDAO(tracks_path).get_all()
    marginal = load_marginal(margins)
    mask = CellMask(marginal.grid, marginal.included)
    exp_stacks, counters = exp_stacks_for(tracks, fields, marginal, config.run.threads)

    def job(track):
        return extract_windstorm(exp_stacks[track.id], track, config.extract, mask)

    records = run_track_jobs(job, tracks, config.run.threads, "Extracción")
    store = RunStore(out)
    CatalogDAO(store.path("catalog.csv")).save(records)
    n_active = sum(len(record.footprints) for record in records)
    logger.info(f"Catálogo: {len(records)} trayectorias, {n_active} huellas activas")
    store.write_manifest("extract", config, [fields, tracks_path, margins], extra={
        "n_tracks": len(records),
        "n_active": n_active,
        "counters": dict(sorted(Counter(counters).items())),
    })
    click.echo(f"Catálogo escrito en {store.path('catalog.csv')}")

import logging
from pathlib import Path

import click

from config import RunConfig
from data.dao.catalog_dao import CatalogDAO
from data.dao.model_dao import ModelDAO
from data.dao.tracks_dao import TracksDAO
from storage import RunStore
from windstorm.commands.common import exp_stacks_for, handle_errors, load_marginal, tracks_in
from windstorm.storm_model import fit_storm_model

logger = logging.getLogger(__name__)


@click.command("fit")
@click.option("--catalog", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--tracks", "tracks_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--fields", required=True, type=click.Path(path_type=Path), help="Directorio de pilas observadas")
@click.option("--margins", required=True, type=click.Path(path_type=Path), help="Directorio del modelo marginal")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.pass_obj
@handle_errors
def fit(config: RunConfig, catalog: Path, tracks_path: Path, fields: Path, margins: Path, out: Path):
    """Ajusta actividad, evolución de huellas y campos de viento; guarda el paquete del modelo"""
    records = CatalogDAO(catalog).get_all()
    tracks = tracks_in(TracksDAO(tracks_path).get_all(), [record.track_id for record in records])
    marginal = load_marginal(margins)
    exp_stacks, _ = exp_stacks_for(tracks, fields, marginal, config.run.threads)
    model = fit_storm_model(records, tracks, exp_stacks, config)
    store = RunStore(out)
    ModelDAO(store.directory).save(model)
    store.write_manifest("fit", config, [catalog, tracks_path, fields, margins], extra={
        "n_tracks": len(records),
        "n_footprints": model.bank.n_footprints,
    })
    click.echo(f"Modelo escrito en {store.directory}")

import logging
from dataclasses import asdict
from pathlib import Path

import click
import pandas as pd

from config import RunConfig
from data.dao.field_stack_dao import FieldStackDAO, write_mask
from data.dao.tracks_dao import TracksDAO
from storage import RunStore
from windstorm.commands.common import TABLE_FLOAT_FORMAT, handle_errors
from windstorm.corpus import generate_synthetic_corpus

logger = logging.getLogger(__name__)


@click.command("synth-corpus")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path),
              help="Directorio de salida del corpus")
@click.pass_obj
@handle_errors
def synth_corpus(config: RunConfig, out: Path):
    """Genera un corpus sintético de trayectorias y campos de viento con huellas sembradas"""
    corpus = generate_synthetic_corpus(config.corpus, config.run.seed)
    store = RunStore(out)
    fields = FieldStackDAO(store.directory / "fields")
    for track_id, stack in sorted(corpus.stacks.items()):
        fields.save(track_id, stack)
    FieldStackDAO(store.directory / "climate").save("background", corpus.background)
    write_mask(store.path("mask.wsf"), corpus.mask)
    TracksDAO(store.path("tracks.csv")).save(corpus.tracks)
    pd.DataFrame([asdict(p) for p in corpus.truth]).to_csv(store.path("truth.csv"), index=False,
                                                            float_format=TABLE_FLOAT_FORMAT)
    store.write_manifest("synth-corpus", config, extra={
        "n_tracks": len(corpus.tracks),
        "n_steps": int(sum(track.duration for track in corpus.tracks)),
    })
    click.echo(f"Corpus escrito en {store.directory}")

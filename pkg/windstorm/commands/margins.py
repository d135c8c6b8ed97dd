import logging
from pathlib import Path
from typing import Optional, Tuple

import click

from config import RunConfig
from data.dao.field_stack_dao import FieldStackDAO, read_mask
from data.dao.marginal_dao import MarginalDAO
from storage import RunStore
from windstorm.commands.common import handle_errors
from windstorm.fields import CellMask, concat_stacks
from windstorm.margins import fit_marginal_model

logger = logging.getLogger(__name__)


@click.command("fit-margins")
@click.option("--fields", "field_dirs", required=True, multiple=True,
              type=click.Path(path_type=Path), help="Directorio de pilas observadas (repetible)")
@click.option("--mask", "mask_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Máscara de celdas incluidas")
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.pass_obj
@handle_errors
def fit_margins(config: RunConfig, field_dirs: Tuple[Path, ...], mask_path: Optional[Path], out: Path):
    """Ajusta el modelo marginal (GPD por encima del umbral, empírica por debajo) celda a celda"""
    stacks = []
    for directory in field_dirs:
        dao = FieldStackDAO(directory)
        names = dao.names()
        if not names:
            raise FileNotFoundError(f"No hay pilas de campos en {directory}")
        stacks.extend(dao.get(name) for name in names)
    pooled = concat_stacks(stacks)
    logger.info(f"{pooled.n_t} pasos de tiempo reunidos de {len(stacks)} pilas")
    mask = read_mask(mask_path) if mask_path is not None else CellMask.everything(pooled.grid)

    section = config.margins
    model = fit_marginal_model(pooled, mask, section.quantile, section.min_excess, section.max_nodes,
                               section.exp_cap)
    store = RunStore(out)
    MarginalDAO(store.directory).save(model)
    inputs = list(field_dirs) + ([mask_path] if mask_path is not None else [])
    store.write_manifest("fit-margins", config, inputs, extra={"n_steps": pooled.n_t})
    click.echo(f"Modelo marginal escrito en {store.directory}")

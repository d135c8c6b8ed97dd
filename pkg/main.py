import logging
from pathlib import Path
from typing import Optional

import click

from config import LOG_LEVEL, load_config
from windstorm.commands.common import EXIT_FORMAT, EXIT_USAGE
from windstorm.errors import ConfigError
from windstorm.handlers import WindstormGroup, register_commands

logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=getattr(logging, LOG_LEVEL.upper(), logging.INFO)
)
logger = logging.getLogger(__name__)


@click.group(cls=WindstormGroup)
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Archivo INI de configuración")
@click.option("--seed", type=int, default=None, help="Semilla maestra")
@click.option("--threads", type=click.IntRange(min=1), default=None, help="Hilos para el trabajo por trayectoria")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], seed: Optional[int], threads: Optional[int]):
    """Modelo lagrangiano de tormentas de viento: ajuste, simulación y análisis"""
    try:
        config = load_config(config_path)
        overrides = {key: value for key, value in (("seed", seed), ("threads", threads)) if value is not None}
        if overrides:
            config = config.with_overrides("run", **overrides)
    except FileNotFoundError as e:
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_FORMAT)
    except ConfigError as e:
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_USAGE)
    logger.debug(f"Configuración {config.digest()[:12]} (semilla {config.run.seed}, {config.run.threads} hilos)")
    ctx.obj = config


register_commands(cli)


def main():
    cli()


if __name__ == "__main__":
    main()

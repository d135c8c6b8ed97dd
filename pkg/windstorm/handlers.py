import click

from windstorm.commands import (
    analyze as analyze_commands,
    corpus as corpus_commands,
    extract as extract_commands,
    fit as fit_commands,
    margins as margins_commands,
    simulate as simulate_commands,
)
from windstorm.commands.common import EXIT_USAGE


class WindstormGroup(click.Group):
    """Grupo de click cuyos errores de uso salen con código 1"""

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise


def register_commands(group: click.Group):
    """Registra todos los subcomandos"""
    # Datos de prueba
    group.add_command(corpus_commands.synth_corpus)

    # Ajuste
    group.add_command(margins_commands.fit_margins)
    group.add_command(extract_commands.extract)
    group.add_command(fit_commands.fit)

    # Simulación y análisis
    group.add_command(simulate_commands.simulate)
    group.add_command(analyze_commands.analyze)

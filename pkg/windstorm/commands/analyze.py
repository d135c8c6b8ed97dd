import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import numpy as np
import pandas as pd

from config import RunConfig
from data.dao.catalog_dao import CatalogDAO
from data.dao.field_stack_dao import FieldStackDAO
from data.dao.tracks_dao import TracksDAO
from storage import RunStore
from windstorm import analysis
from windstorm.commands.common import TABLE_FLOAT_FORMAT, handle_errors, load_marginal, tracks_in
from windstorm.fields import GriddedFieldStack, ScaleTag
from windstorm.margins import MarginalModel, to_exp_value
from windstorm.utils import derive_rng, parse_sites

logger = logging.getLogger(__name__)

CHI_LEVELS = (0.9, 0.95, 0.98, 0.99, 0.995)
QQ_VARIABLES = ("sqrt_delta", "w", "r_e", "theta_e")


def _site_data(fields: Path, track_ids: List[str], sites: List[Tuple[int, int]], marginal: MarginalModel
               ) -> Tuple[Dict[Tuple[int, int], np.ndarray], Dict[Tuple[int, int], np.ndarray]]:
    """Series Exp(1) concatenadas y máximos por tormenta (escala observada) en cada sitio"""
    dao = FieldStackDAO(fields)
    series = {site: [] for site in sites}
    maxima = {site: [] for site in sites}
    for track_id in track_ids:
        if not dao.exists(track_id):
            continue
        observed = analysis.site_series([dao.get(track_id)], sites)
        for (x, y), values in observed.items():
            series[(x, y)].append(to_exp_value(marginal, y, x, values) if values.size else values)
            finite = values[np.isfinite(values)]
            if finite.size:
                maxima[(x, y)].append(finite.max())
    return ({site: np.concatenate(chunks) if chunks else np.zeros(0) for site, chunks in series.items()},
            {site: np.asarray(values) for site, values in maxima.items()})


def _chi_table(series: Dict[Tuple[int, int], np.ndarray], sites: List[Tuple[int, int]],
               run_length: int) -> pd.DataFrame:
    frames = []
    first = sites[0]
    for second in sites[1:]:
        try:
            estimate = analysis.chi_estimate(series[first], series[second], CHI_LEVELS, run_length)
        except ValueError as e:
            logger.warning(f"chi entre {first} y {second} no calculado: {e}")
            continue
        frame = estimate.to_frame()
        frame.insert(0, "site2", f"{second[0]},{second[1]}")
        frame.insert(0, "site1", f"{first[0]},{first[1]}")
        frames.append(frame)
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["site1", "site2", "q", "chi", "lo", "hi", "neff"])


def _return_levels(marginal: MarginalModel, maxima: Dict[Tuple[int, int], np.ndarray], years: Tuple[float, ...],
                   storms_per_year: float, steps_per_storm: float) -> pd.DataFrame:
    rows = []
    for (x, y), values in maxima.items():
        fit = marginal.cell_fit(y, x)
        for period in years:
            row = {"x": x, "y": y, "years": period, "model": np.nan, "empirical": np.nan}
            try:
                row["model"] = analysis.return_level(fit, period, storms_per_year * steps_per_storm)
            except ValueError as e:
                logger.warning(f"Nivel de retorno del modelo en ({x}, {y}) para T={period}: {e}")
            try:
                row["empirical"] = analysis.empirical_return_level(values, period, storms_per_year)
            except ValueError as e:
                logger.warning(f"Nivel de retorno empírico en ({x}, {y}) para T={period}: {e}")
            rows.append(row)
    return pd.DataFrame(rows, columns=["x", "y", "years", "model", "empirical"])


def _write_table(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format=TABLE_FLOAT_FORMAT)


@click.command("analyze")
@click.option("--catalog", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--tracks", "tracks_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--margins", required=True, type=click.Path(path_type=Path), help="Directorio del modelo marginal")
@click.option("--fields", type=click.Path(path_type=Path), default=None,
              help="Pilas observadas o simuladas del catálogo, para chi y niveles de retorno")
@click.option("--sites", "sites_text", default=None, help="Sitios 'x1,y1;x2,y2' en celdas; el primero es la referencia")
@click.option("--years", multiple=True, type=click.FloatRange(min=0, min_open=True), default=(1.0, 10.0),
              help="Periodos de retorno en años (repetible)")
@click.option("--reference-catalog", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Catálogo de referencia para las comparaciones Q-Q")
@click.option("--reference-tracks", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.pass_obj
@handle_errors
def analyze(config: RunConfig, catalog: Path, tracks_path: Path, margins: Path, fields: Optional[Path],
            sites_text: Optional[str], years: Tuple[float, ...], reference_catalog: Optional[Path],
            reference_tracks: Optional[Path], out: Path):
    """Dependencia extremal, niveles de retorno, densidad espacial y comparaciones Q-Q de un catálogo"""
    section = config.analysis
    records = CatalogDAO(catalog).get_all()
    tracks = tracks_in(TracksDAO(tracks_path).get_all(), [record.track_id for record in records])
    marginal = load_marginal(margins)
    store = RunStore(out)
    inputs = [catalog, tracks_path, margins]

    density = analysis.spatial_density(tracks, marginal.grid, records, active_only=True,
                                       sigma=section.density_sigma)
    FieldStackDAO(store.directory).save("density", GriddedFieldStack(
        marginal.grid, np.array([1]), density[None], ScaleTag.OBSERVED))

    correlations, binned = analysis.dependence_summary(records, tracks)
    _write_table(correlations, store.path("dependence.csv"))
    _write_table(binned, store.path("dependence_bins.csv"))
    _write_table(analysis.catalog_frame(records, tracks), store.path("footprints.csv"))

    if sites_text is not None:
        if fields is None:
            raise ValueError("--sites requiere --fields")
        sites = parse_sites(sites_text)
        series, maxima = _site_data(fields, [record.track_id for record in records], sites, marginal)
        _write_table(_chi_table(series, sites, section.run_length), store.path("chi.csv"))
        level = analysis.exp_level(q=CHI_LEVELS[1])
        _write_table(analysis.chi_map(series, sites[0], level), store.path("chi_map.csv"))
        steps_per_storm = float(np.mean([track.duration for track in tracks]))
        _write_table(_return_levels(marginal, maxima, years, section.storms_per_year, steps_per_storm),
                     store.path("return_levels.csv"))
        inputs.append(fields)

    if reference_catalog is not None:
        if reference_tracks is None:
            raise ValueError("--reference-catalog requiere --reference-tracks")
        reference_records = CatalogDAO(reference_catalog).get_all()
        reference = analysis.catalog_frame(
            reference_records,
            tracks_in(TracksDAO(reference_tracks).get_all(), [r.track_id for r in reference_records]))
        current = analysis.catalog_frame(records, tracks)
        frames = []
        for variable in QQ_VARIABLES:
            try:
                qq = analysis.qq_data(reference[variable], current[variable], n_bootstrap=section.n_bootstrap,
                                      rng=derive_rng(config.run.seed, "qq", variable))
            except ValueError as e:
                logger.warning(f"Q-Q {variable} no calculado: {e}")
                continue
            frame = qq.to_frame()
            frame.insert(0, "variable", variable)
            frames.append(frame)
            outside = int((~qq.inside).sum())
            if outside:
                logger.info(f"Q-Q {variable}: {outside} cuantiles fuera de la banda del 95%")
        qq_table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
            columns=["variable", "p", "a", "b", "lo", "hi"])
        _write_table(qq_table, store.path("qq.csv"))
        inputs.extend([reference_catalog, reference_tracks])

    store.write_manifest("analyze", config, inputs, extra={
        "n_tracks": len(records),
        "chi_interval": "Clopper-Pearson con tamaño efectivo por índice extremal (estimador de rachas)",
    })
    click.echo(f"Análisis escrito en {store.directory}")

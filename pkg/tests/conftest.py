import numpy as np
import pytest

from config import CorpusSection, ExtractSection, RunConfig
from windstorm.corpus import generate_synthetic_corpus
from windstorm.extract import extract_windstorm
from windstorm.fields import CellMask, Grid, GriddedFieldStack, ScaleTag, concat_stacks
from windstorm.margins import fit_marginal_model, to_exp_margins
from windstorm.tracks import StormTrack, TrackPoint

SEED = 1234
PIPELINE_EXTRACT = ExtractSection(area_min=3.0)


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


@pytest.fixture
def small_grid():
    return Grid(n_x=40, n_y=30, cell_size=25.0, origin_lon=-10.0, origin_lat=45.0)


@pytest.fixture
def straight_track(small_grid):
    """Trayectoria hacia el este, con vorticidad máxima en t=5"""
    xs = np.linspace(5.0, 30.0, 8)
    lon, lat = small_grid.cell_to_lonlat(xs, np.full(8, 15.0))
    vorticity = [0.2, 0.4, 0.6, 0.8, 1.0, 0.7, 0.5, 0.3]
    points = tuple(TrackPoint(i + 1, float(lon[i]), float(lat[i]), vorticity[i]) for i in range(8))
    return StormTrack("T0001", points)


@pytest.fixture
def constant_stack(small_grid):
    values = np.full((4,) + small_grid.shape, 3.0)
    return GriddedFieldStack(small_grid, np.arange(1, 5), values, ScaleTag.OBSERVED)


def small_corpus_section(**overrides) -> CorpusSection:
    values = dict(n_x=64, n_y=64, n_tracks=8, mean_track_length=14, quiet_steps=300,
                  band_a=12.0, band_b=7.0, band_offset=6.0)
    values.update(overrides)
    return CorpusSection(**values)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(small_corpus_section(), SEED)


@pytest.fixture
def run_config():
    return RunConfig().with_overrides("run", seed=SEED, threads=1)


@pytest.fixture(scope="session")
def corpus_pipeline(small_corpus):
    """Corpus pequeño con modelo marginal, pilas Exp(1) y catálogo extraído"""
    corpus = small_corpus
    pooled = concat_stacks([corpus.background] + [corpus.stacks[t.id] for t in corpus.tracks])
    marginal = fit_marginal_model(pooled, corpus.mask, quantile=0.9)
    exp_stacks = {t.id: to_exp_margins(marginal, corpus.stacks[t.id]) for t in corpus.tracks}
    config = PIPELINE_EXTRACT
    mask = CellMask(marginal.grid, marginal.included)
    records = [extract_windstorm(exp_stacks[t.id], t, config, mask) for t in corpus.tracks]
    return corpus, marginal, exp_stacks, records

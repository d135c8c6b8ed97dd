import json

import pytest
from click.testing import CliRunner

from main import cli

SMALL_RUN = """
[run]
seed = 1234
threads = 2

[corpus]
n_x = 64
n_y = 64
n_tracks = 8
mean_track_length = 14
quiet_steps = 300
band_a = 12.0
band_b = 7.0
band_offset = 6.0

[margins]
quantile = 0.9

[extract]
area_min = 3.0

[activity]
min_observations = 20

[footprint]
min_window_tuples = 10

[windfield]
min_variogram_cells = 40
"""


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)


def test_help_lists_every_command(runner):
    result = invoke(runner, "--help")
    assert result.exit_code == 0
    for name in ("synth-corpus", "fit-margins", "extract", "fit", "simulate", "analyze"):
        assert name in result.output


def test_unknown_option_is_a_usage_error(runner, tmp_path):
    result = invoke(runner, "extract", "--bogus", "1")
    assert result.exit_code == 1


def test_missing_required_option(runner):
    assert invoke(runner, "fit-margins").exit_code == 1


def test_missing_input_file(runner, tmp_path):
    missing = tmp_path / "nada.csv"
    result = invoke(runner, "extract", "--fields", tmp_path, "--tracks", missing, "--margins", tmp_path,
                    "--out", tmp_path / "out")
    assert result.exit_code == 2
    assert str(missing) in result.output


def test_missing_config_file(runner, tmp_path):
    result = invoke(runner, "--config", tmp_path / "nada.ini", "synth-corpus", "--out", tmp_path)
    assert result.exit_code == 2


def test_bad_config_value(runner, tmp_path):
    (tmp_path / "run.ini").write_text("[footprint]\norder = dos\n", encoding="utf-8")
    result = invoke(runner, "--config", tmp_path / "run.ini", "synth-corpus", "--out", tmp_path / "c")
    assert result.exit_code == 1


def test_simulate_without_model_package(runner, tmp_path):
    (tmp_path / "model").mkdir()
    result = invoke(runner, "simulate", "--model", tmp_path / "model", "--tracks", tmp_path / "t.csv",
                    "--out", tmp_path / "sim")
    assert result.exit_code == 2


@pytest.mark.slow
def test_end_to_end_pipeline_is_deterministic_across_thread_counts(runner, tmp_path):
    config = tmp_path / "run.ini"
    config.write_text(SMALL_RUN, encoding="utf-8")
    corpus, margins, catalog, model = (tmp_path / name for name in ("corpus", "margins", "catalog", "model"))

    def run(*args, threads=2):
        result = invoke(runner, "--config", config, "--threads", threads, *args)
        assert result.exit_code == 0, result.output
        return result

    run("synth-corpus", "--out", corpus)
    run("fit-margins", "--fields", corpus / "fields", "--fields", corpus / "climate", "--mask",
        corpus / "mask.wsf", "--out", margins)
    run("extract", "--fields", corpus / "fields", "--tracks", corpus / "tracks.csv", "--margins", margins,
        "--out", catalog)
    run("fit", "--catalog", catalog / "catalog.csv", "--tracks", corpus / "tracks.csv", "--fields",
        corpus / "fields", "--margins", margins, "--out", model)

    outputs = []
    for name, threads in (("sim_a", 1), ("sim_b", 8)):
        run("simulate", "--model", model, "--tracks", corpus / "tracks.csv", "--margins", margins,
            "--n", 16, "--out", tmp_path / name, threads=threads)
        outputs.append(tmp_path / name)
    first, second = outputs
    for relative in ("catalog.csv", "plans.csv", "index.csv", "tracks.csv"):
        assert (first / relative).read_bytes() == (second / relative).read_bytes()
    first_fields = sorted(p.name for p in (first / "fields").glob("*.wsf"))
    assert first_fields == sorted(p.name for p in (second / "fields").glob("*.wsf"))
    for name in first_fields:
        assert (first / "fields" / name).read_bytes() == (second / "fields" / name).read_bytes()

    manifest = json.loads((first / "run_manifest.json").read_text(encoding="utf-8"))
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 1234
    assert manifest["n_storms"] == 16

    run("analyze", "--catalog", catalog / "catalog.csv", "--tracks", corpus / "tracks.csv", "--margins", margins,
        "--fields", corpus / "fields", "--sites", "32,32;34,32;40,40", "--reference-catalog",
        first / "catalog.csv", "--reference-tracks", first / "tracks.csv", "--out", tmp_path / "analysis")
    for name in ("density.wsf", "dependence.csv", "footprints.csv", "chi.csv", "chi_map.csv",
                 "return_levels.csv", "qq.csv", "run_manifest.json"):
        assert (tmp_path / "analysis" / name).exists()

import hashlib
import logging
import math
import time

import numpy as np
import pytest

from windstorm.jobs import run_track_jobs
from windstorm.utils import (bearing_from_south, derive_rng, file_sha256, log_progress, offset_from_bearing,
                             parse_sites, stable_key, wrap_angle, wrap_axial)


def test_derived_streams_are_stable_and_distinct():
    first = derive_rng(42, "T0001", 3).random(5)
    np.testing.assert_array_equal(first, derive_rng(42, "T0001", 3).random(5))
    assert not np.array_equal(first, derive_rng(42, "T0001", 4).random(5))
    assert not np.array_equal(first, derive_rng(43, "T0001", 3).random(5))
    assert stable_key("a", 1) == stable_key("a", 1)
    assert stable_key("a", 1) != stable_key("a1")


def test_angle_wrapping():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    np.testing.assert_allclose(wrap_angle(np.array([0.0, 2 * math.pi])), [0.0, 0.0], atol=1e-12)
    assert wrap_axial(math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_axial(3 * math.pi / 4) == pytest.approx(-math.pi / 4)


def test_bearings_from_south():
    assert bearing_from_south(0.0, -2.0) == (2.0, 0.0)
    r, theta = bearing_from_south(1.0, 0.0)
    assert (r, theta) == (1.0, pytest.approx(math.pi / 2))
    assert bearing_from_south(0.0, 0.0) == (0.0, 0.0)
    r, theta = bearing_from_south(-3.0, 4.0)
    np.testing.assert_allclose(offset_from_bearing(r, theta), [-3.0, 4.0], atol=1e-12)


def test_parse_sites():
    assert parse_sites("32,32; 40,41;") == [(32, 32), (40, 41)]
    with pytest.raises(ValueError):
        parse_sites("32")
    with pytest.raises(ValueError):
        parse_sites(" ; ")


def test_file_sha256(tmp_path):
    path = tmp_path / "datos.bin"
    path.write_bytes(b"viento" * 1000)
    assert file_sha256(path) == hashlib.sha256(b"viento" * 1000).hexdigest()


def test_log_progress(caplog):
    caplog.set_level(logging.INFO, logger="windstorm.utils")
    log_progress(3, 6, "Extracción")
    log_progress(0, 0, "nada")
    assert len(caplog.records) == 1
    assert "50% (3/6)" in caplog.records[0].getMessage()


def _slow_square(x: int) -> int:
    time.sleep(0.01 * (5 - x % 5))
    return x * x


def test_jobs_keep_input_order():
    items = list(range(12))
    expected = [x * x for x in items]
    assert run_track_jobs(_slow_square, items, threads=1) == expected
    assert run_track_jobs(_slow_square, items, threads=4) == expected
    assert run_track_jobs(_slow_square, [], threads=4) == []


def test_jobs_reject_bad_thread_count():
    with pytest.raises(ValueError):
        run_track_jobs(_slow_square, [1], threads=0)

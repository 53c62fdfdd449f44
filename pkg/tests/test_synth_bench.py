import io

import numpy as np
import pytest

from chunkaccum.accgen import AccumulationSpec, generate
from chunkaccum.bench import FIELDS, BenchConfig, run_bench, write_rows
from chunkaccum.errors import ConfigError, DataError
from chunkaccum.storeio import MemoryStore, ZArray
from chunkaccum.synth import SynthConfig, latitude_weights, write_synthetic

SMALL = SynthConfig(shape=(8, 12, 40), chunks=(4, 6, 5), seed=3, gap_fraction=0.1, variable="v")


def test_same_seed_same_bytes():
    a, b = MemoryStore(), MemoryStore()
    write_synthetic(a, SMALL)
    write_synthetic(b, SMALL)
    assert dict(a.items()) == dict(b.items())
    c = MemoryStore()
    write_synthetic(c, SynthConfig(**{**SMALL.__dict__, "seed": 4}))
    assert c["v/0.0.0"] != a["v/0.0.0"]


def test_no_gaps_means_no_fill():
    store = MemoryStore()
    arr = write_synthetic(store, SynthConfig(shape=(6, 6, 6), chunks=(3, 3, 3), variable="v"))
    values = arr[...]
    assert not np.any(values == SMALL.fill_value)
    assert values.min() > 0


def test_gap_fraction_roughly_respected():
    store = MemoryStore()
    values = write_synthetic(store, SMALL)[...]
    assert 0.05 < np.mean(values == SMALL.fill_value) < 0.15


def test_bench_geometry_chunk_grid():
    cfg = SynthConfig(shape=(360, 720, 2000), chunks=(36, 72, 200))
    assert cfg.grid.nchunks == (10, 10, 10)


@pytest.mark.parametrize("kwargs", [{"gap_fraction": 1.0}, {"dim_names": ("x", "y", "z"), "lat_weights": "w"}])
def test_synth_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        SynthConfig(**kwargs)


def test_latitude_weights():
    w = latitude_weights(180)
    assert w.shape == (180,)
    np.testing.assert_allclose(w, w[::-1])
    assert 0 < w.min() < 0.01 and w.max() > 0.9999


def test_lat_weights_written():
    store = MemoryStore()
    write_synthetic(store, SynthConfig(shape=(4, 4, 4), chunks=(2, 2, 2), lat_weights="area"))
    np.testing.assert_array_equal(ZArray.open(store, "area")[...], latitude_weights(4))


@pytest.fixture(scope="module")
def bench_store():
    store = MemoryStore()
    write_synthetic(store, SMALL)
    generate(store, "v", AccumulationSpec([("time",)], {"time": 2}))
    return store


def test_bench_rows(bench_store):
    cfg = BenchConfig(sweep=(10, 20, 30, 40), brute_max_slices=30)
    rows = run_bench(bench_store, "v", cfg)
    assert [r["slices"] for r in rows] == [10, 20, 30, 40]
    # slot-aligned windows: constant accumulation reads, brute reads grow with length
    assert len({r["acc_reads"] for r in rows}) == 1
    assert [r["brute_reads"] for r in rows[:3]] == [8, 16, 24]
    assert all(r["nrmsd"] <= 1e-6 for r in rows[:3])
    assert rows[3]["brute_reads"] is None and rows[3]["nrmsd"] is None


def test_bench_csv(bench_store):
    rows = run_bench(bench_store, "v", BenchConfig(sweep=(10,), brute_max_slices=0))
    out = io.StringIO()
    write_rows(rows, out)
    lines = out.getvalue().splitlines()
    assert lines[0] == ",".join(FIELDS)
    row = dict(zip(FIELDS, lines[1].split(",")))
    assert row["slices"] == "10" and row["acc_reads"] == "4"
    assert row["brute_seconds"] == row["brute_reads"] == row["nrmsd"] == ""


def test_bench_needs_group():
    store = MemoryStore()
    write_synthetic(store, SMALL)
    with pytest.raises(DataError, match="generate"):
        run_bench(store, "v", BenchConfig(sweep=(10,)))


@pytest.mark.parametrize("sweep", [(20, 10), (), (0, 5)])
def test_bench_sweep_validation(sweep):
    with pytest.raises(ConfigError):
        BenchConfig(sweep=sweep)


def test_bench_window_past_end(bench_store):
    with pytest.raises(ConfigError):
        run_bench(bench_store, "v", BenchConfig(sweep=(30,), start=20))

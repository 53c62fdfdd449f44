import csv
import io
import json

import numpy as np
import pytest

from chunkaccum import metadata as md
from chunkaccum.cli import main
from chunkaccum.storeio import DirectoryStore, read_attrs, write_attrs


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def store_dir(tmp_path, capsys):
    path = tmp_path / "store"
    code, _, _ = run(capsys, "synth", path, "--shape", "12,16,20", "--chunks", "4,4,5",
                     "--gaps", "0.05", "--seed", "1", "--lat-weights", "area")
    assert code == 0
    code, out, _ = run(capsys, "generate", path, "--subsets", "lat,lon,time,lat+lon",
                       "--stride", "time=2", "--weights", "area", "--kinds", "weighted,weights,unweighted")
    assert code == 0
    names = {json.loads(line)["dataset"] for line in out.splitlines()}
    assert {"acc_time", "acc_wt_time", "acc_uw_lat_lon", "acc_cnt_lat_lon"} <= names
    return path


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_series_query(store_dir, capsys):
    code, out, err = run(capsys, "query", store_dir, "--op", "series",
                         "--bounds", "lat=2:9", "--bounds", "lon=0:16", "--stats")
    assert code == 0
    rows = read_csv(out)
    assert len(rows) == 20 and list(rows[0]) == ["time", "average", "sum", "weight"]
    stats = json.loads(err)
    assert stats["chunk_reads"] > 0 and "reads_by_array" in stats


def test_map_query_to_file(store_dir, tmp_path, capsys):
    out_path = tmp_path / "map.csv"
    code, out, _ = run(capsys, "query", store_dir, "--op", "map", "--bounds", "time=0:20",
                       "--weighting", "uw", "--out", out_path)
    assert code == 0 and out == ""
    rows = read_csv(out_path.read_text())
    assert len(rows) == 12 * 16
    assert {"latitude", "longitude"} <= set(rows[0])


def test_box_query_matches_map(store_dir, capsys):
    _, map_out, _ = run(capsys, "query", store_dir, "--op", "map", "--bounds", "time=4:16")
    _, box_out, _ = run(capsys, "query", store_dir, "--op", "box", "--dims", "time",
                        "--bounds", "time=4:16")
    assert map_out == box_out


def test_config_file_supplies_defaults(store_dir, tmp_path, capsys):
    cfg = tmp_path / "q.json"
    cfg.write_text(json.dumps({"op": "series", "bounds": ["lat=0:4"], "time-dim": "time"}))
    code, out, _ = run(capsys, "query", store_dir, "--config", cfg)
    assert code == 0 and len(read_csv(out)) == 20
    # command-line flags still win
    code, out, _ = run(capsys, "query", store_dir, "--config", cfg, "--bounds", "time=0:5", "--bounds", "lat=0:4")
    assert len(read_csv(out)) == 5


def test_config_unknown_key(store_dir, tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit):
        main(["query", str(store_dir), "--config", str(cfg)])


def test_validate_passes(store_dir, capsys):
    code, out, _ = run(capsys, "validate", store_dir, "--trials", "25", "--seed", "4")
    lines = [json.loads(line) for line in out.splitlines()]
    assert code == 0
    assert lines[0] == {"metadata": "ok"}
    assert lines[-1]["trials"] == 25 and lines[-1]["failed"] == 0


def test_validate_reports_schema_violation(store_dir, capsys):
    store = DirectoryStore(store_dir)
    node = f"{md.group_path('precipitation')}/acc_time"
    attrs = read_attrs(store, node)
    attrs[md.STRIDE_KEY] = [0, 0, -2]
    write_attrs(store, node, attrs)
    code, out, _ = run(capsys, "validate", store_dir)
    assert code == 2
    assert "acc_time" in out and "non-negative" in out


def test_capability_error_exit_code(tmp_path, capsys):
    path = tmp_path / "s"
    run(capsys, "synth", path, "--shape", "8,8,8", "--chunks", "4,4,4")
    run(capsys, "generate", path, "--subsets", "time")
    code, _, err = run(capsys, "query", path, "--op", "series")
    assert code == 3 and "latitude" in err


def test_bad_dimension_exit_code(store_dir, capsys):
    code, _, err = run(capsys, "query", store_dir, "--op", "series", "--bounds", "depth=0:2")
    assert code == 3 and "depth" in err


def test_inspect(store_dir, capsys):
    code, out, _ = run(capsys, "inspect", store_dir)
    doc = json.loads(out)
    assert code == 0
    assert doc["weights"] == ["area"]
    acc_time = next(d for d in doc["datasets"] if d["name"] == "acc_time")
    assert acc_time["shape"] == [12, 16, 2] and acc_time["stride"] == [0, 0, 2]
    assert doc["storage"]["element_ratio"] > 0


def test_bench_csv_output(store_dir, tmp_path, capsys):
    out_path = tmp_path / "bench.csv"
    code, _, _ = run(capsys, "bench", store_dir, "--sweep", "10,20", "--out", out_path)
    rows = read_csv(out_path.read_text())
    assert code == 0 and [r["slices"] for r in rows] == ["10", "20"]
    assert rows[0]["acc_reads"] == rows[1]["acc_reads"]
    assert all(float(r["nrmsd"]) <= 1e-6 for r in rows)


def test_module_entry_point(store_dir):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "chunkaccum", "inspect", str(store_dir)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["shape"] == [12, 16, 20]

import json
import math
import subprocess
import sys

import numpy as np
import pytest

from conheat.cli import main
from conheat.manifold import save_csv
from conheat import generate_manifold


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, json.loads((out / "report.json").read_text()), out


@pytest.fixture(scope="module")
def torus_spectra_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("spec")
    assert main(["spectrum", "--manifold", "flat_torus", "--resolution", "32", "--t", "0.002",
                 "--out", str(out)]) == 0
    return out


@pytest.mark.slow
def test_spectrum_torus_64(tmp_path):
    code, rep, out = run(tmp_path, "spectrum", "--manifold", "flat_torus", "--resolution", "64", "--m", "100")
    assert code == 0 and rep["pass"]
    rows = (out / "spectrum_connection.csv").read_text().splitlines()
    assert len(rows) == 100 and len(rows[0].split(",")) == 1 + 2 * 4096
    assert rep["spectrum"]["connection"]["max_residual"] < 1e-6
    assert set(rep["timings"]) >= {"ingest", "spectrum"}


def test_missing_file_is_an_ingest_error(tmp_path):
    code, rep, _ = run(tmp_path, "spectrum", "--file", str(tmp_path / "nope.csv"), "--format", "csv_points")
    assert code == 2
    assert rep["error"]["stage"] == "ingest" and rep["pass"] is False


def test_spectrum_files_are_reproducible(tmp_path):
    argv = ("spectrum", "--manifold", "flat_torus", "--resolution", "32", "--m", "30", "--seed", "4")
    _, a, out_a = run(tmp_path, *argv, name="a")
    _, b, out_b = run(tmp_path, *argv, name="b")
    for f in ("spectrum_connection.csv", "spectrum_connection.json", "spectrum_scalar.csv",
              "eigenvalue_staircase.csv"):
        assert (out_a / f).read_bytes() == (out_b / f).read_bytes()
    for rep in (a, b):
        rep.pop("timings")
        rep["config"].pop("out")
    assert a == b


def test_csv_input(tmp_path):
    path = tmp_path / "torus.csv"
    save_csv(generate_manifold("flat_torus", 32), path)
    code, rep, _ = run(tmp_path, "spectrum", "--file", str(path), "--format", "csv_points", "--dim", "2",
                       "--m", "10")
    assert code == 0
    assert rep["manifold"]["N"] == 1024


def test_embed_grid_scan(tmp_path, torus_spectra_dir):
    code, rep, out = run(tmp_path, "embed", "--manifold", "flat_torus", "--resolution", "32",
                         "--spectrum-dir", str(torus_spectra_dir),
                         "--t-grid", "0.002,0.005,0.01", "--delta-grid", "0.05 0.08 0.12")
    cells = rep["embed"]["cells"]
    assert len(cells) == 9
    assert all({"epsilon_achieved", "min_ratio", "t", "delta"} <= set(c) for c in cells)
    assert code == (0 if any(c["passed"] for c in cells) else 1)
    assert len((out / "scan.csv").read_text().splitlines()) == 10


def test_embed_single_cell(tmp_path, torus_spectra_dir):
    code, rep, out = run(tmp_path, "embed", "--manifold", "flat_torus", "--resolution", "32",
                         "--spectrum-dir", str(torus_spectra_dir), "--t", "0.005", "--delta", "0.1")
    assert len(rep["embed"]["cells"]) == 1
    for f in ("embedding.csv", "embedding.json", "partition.json", "dilatation.json"):
        assert (out / f).is_file()
    assert code in (0, 1) and rep["pass"] == (code == 0)


def test_embed_uniform_records_replication(tmp_path, torus_spectra_dir):
    code, rep, out = run(tmp_path, "embed", "--manifold", "flat_torus", "--resolution", "32",
                         "--spectrum-dir", str(torus_spectra_dir), "--t", "0.005", "--delta", "0.1",
                         "--variant", "uniform", "--A", str(1 / 500))
    part = json.loads((out / "partition.json").read_text())
    expected = sum(math.ceil(m / (1 / 500) - 1e-12) for m in part["masses"])
    cell = rep["embed"]["cells"][0]
    assert cell["replication_total"] == expected == cell["n_columns"]
    assert cell["replication_total"] >= 500


def test_embed_needs_parameters(tmp_path, torus_spectra_dir):
    code, rep, _ = run(tmp_path, "embed", "--manifold", "flat_torus", "--resolution", "32",
                       "--spectrum-dir", str(torus_spectra_dir), "--t", "0.005")
    assert code == 2 and rep["error"]["stage"] == "config"


def test_diagnose_flat_torus(tmp_path, torus_spectra_dir):
    code, rep, out = run(tmp_path, "diagnose", "--manifold", "flat_torus", "--resolution", "32",
                         "--spectrum-dir", str(torus_spectra_dir), "--t", "0.01")
    assert code == 0
    entry = rep["diagnose"]["times"][0]
    assert abs(entry["trace_domination"]["ratio"] - 1) < 0.01
    assert (out / "distance_vs_log_kernel.csv").is_file()
    assert (out / "eigenvalue_staircase.csv").is_file()


def test_diagnose_sphere_cluster(tmp_path):
    code, rep, _ = run(tmp_path, "diagnose", "--manifold", "sphere", "--resolution", "3")
    assert code == 0
    cluster = rep["diagnose"]["lowest_cluster"]
    assert cluster["multiplicity"] == 6
    assert abs(cluster["value"] - 1) < 0.05


def test_diagnose_empty_spectrum(tmp_path, torus_spectra_dir):
    empty = tmp_path / "empty"
    empty.mkdir()
    for kind in ("connection", "scalar"):
        src = torus_spectra_dir / f"spectrum_{kind}"
        head = json.loads(src.with_suffix(".json").read_text())
        head["raw_eigenvalues"] = []
        (empty / f"spectrum_{kind}.json").write_text(json.dumps(head))
        (empty / f"spectrum_{kind}.csv").write_text("")
    code, rep, _ = run(tmp_path, "diagnose", "--manifold", "flat_torus", "--resolution", "32",
                       "--spectrum-dir", str(empty))
    assert code == 3
    assert rep["error"]["stage"] == "diagnose"


def test_chart_command(tmp_path, torus_spectra_dir):
    code, rep, out = run(tmp_path, "chart", "--manifold", "flat_torus", "--resolution", "32",
                         "--spectrum-dir", str(torus_spectra_dir), "--r", "0.1")
    assert code == 0
    comp = json.loads((out / "chart_comparison.json").read_text())
    assert comp["sup_diff_euclid"] < 0.05 * comp["sup_euclid"]


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"manifold": "flat_torus", "resolution": 32, "m": 12, "seed": 9}))
    code, rep, out = run(tmp_path, "spectrum", "--config", str(cfg), "--m", "8")
    assert code == 0
    assert rep["config"]["m"] == 8 and rep["config"]["seed"] == 9
    assert len((out / "spectrum_connection.csv").read_text().splitlines()) == 8


@pytest.mark.parametrize("argv", [
    ("spectrum", "--manifold", "flat_torus", "--resolution", "32", "--m", "-3"),
    ("embed", "--manifold", "flat_torus", "--resolution", "32", "--t-grid", "0.01,-1", "--delta", "0.1"),
])
def test_invalid_numbers_are_input_errors(tmp_path, argv):
    code, rep, _ = run(tmp_path, *argv)
    assert code == 2 and rep["error"]["stage"] == "config"


def test_console_entry_point(tmp_path):
    out = tmp_path / "o"
    proc = subprocess.run([sys.executable, "-m", "conheat.cli", "spectrum", "--file", "missing.off",
                           "--format", "off_mesh", "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "ingest" in proc.stderr
    assert np.isfinite(json.loads((out / "report.json").read_text())["timings"]["ingest"])

import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from bubbling.cli import main
from bubbling.grid import ScalarField, read_field, write_field

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip()
    return code, out


def manifest(path):
    return json.loads(Path(path).read_text())


@pytest.fixture(scope="module")
def constructed(tmp_path_factory):
    out = tmp_path_factory.mktemp("construct")
    code = main(["construct", "--config", str(CONFIGS / "quick.cfg"), "--out", str(out)])
    return code, out


def test_green_writes_files_and_is_deterministic(tmp_path, capsys):
    code, out = run(capsys, "green", "--config", CONFIGS / "quick.cfg", "--out", tmp_path / "a")
    assert code == 0
    assert Path(out) == tmp_path / "a" / "manifest.json"
    m = manifest(out)
    names = {f["file"] for f in m["files"]}
    assert {"H.field", "green.json", "mode_decay.csv"} <= names
    report = json.loads((tmp_path / "a" / "green.json").read_text())
    assert report["mass_within_1pct"]
    code, out2 = run(capsys, "green", "--config", CONFIGS / "quick.cfg", "--out", tmp_path / "b")
    assert code == 0
    assert [f["sha256"] for f in m["files"]] == [f["sha256"] for f in manifest(out2)["files"]]


def test_close_points_exit_two(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n = 64\npoints = 0.5 0.5; 0.52 0.5\n")
    code, out = run(capsys, "green", "--config", cfg, "--out", tmp_path)
    assert code == 2 and out == ""


def test_unknown_key_exit_two(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("n = 64\nwibble = 3\n")
    assert run(capsys, "green", "--config", cfg)[0] == 2


def test_unresolvable_lambda_exit_three(tmp_path, capsys):
    code, _ = run(capsys, "construct", "--config", CONFIGS / "quick.cfg", "--out", tmp_path, "--lambda", 0.01)
    assert code == 3


def test_construct_outputs(constructed):
    code, out = constructed
    assert code == 0
    summary = json.loads((out / "construct.json").read_text())
    assert summary["verify"]["ok"]
    assert summary["correction_iterations"] >= 1
    assert len(summary["deltas"]) == 1
    assert (out / "u.field").exists() and (out / "c_history.csv").exists()
    names = {f["file"] for f in manifest(out / "manifest.json")["files"]}
    assert {"u.field", "construct.json", "c_history.csv"} <= names


def test_verify_round_trip(constructed, tmp_path, capsys):
    _, out = constructed
    code, _ = run(capsys, "verify", "--config", CONFIGS / "quick.cfg", "--out", tmp_path / "v", out / "u.field")
    assert code == 0
    u = read_field(out / "u.field")
    bumped = write_field(tmp_path / "bumped.field", ScalarField(u.grid, u.values + 0.1))
    code, _ = run(capsys, "verify", "--config", CONFIGS / "quick.cfg", "--out", tmp_path / "w", bumped)
    assert code == 1
    report = json.loads((tmp_path / "w" / "verify.json").read_text())
    assert not report["checks"]["curvature_identity"]


def test_verify_rejects_a_non_solution(tmp_path, capsys):
    zero = write_field(tmp_path / "zero.field", ScalarField(read_field_grid(), np.zeros((64, 64))))
    code, _ = run(capsys, "verify", "--config", CONFIGS / "quick.cfg", "--lambda", 0.0, "--out", tmp_path / "v", zero)
    assert code == 1
    report = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert not report["checks"]["residual"]


def read_field_grid():
    from bubbling.grid import Grid2D

    return Grid2D(1.0, 64)


def test_continue_emits_branches(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text((CONFIGS / "quick.cfg").read_text() + "lambda_grid = 0.14, 0.12, 0.1\n")
    code, out = run(capsys, "continue", "--config", cfg, "--out", tmp_path / "c")
    assert code == 0
    report = json.loads((tmp_path / "c" / "continue.json").read_text())
    assert report["lambda0_below_bound"] and report["two_solutions"]
    assert (tmp_path / "c" / "minimal.csv").exists() and (tmp_path / "c" / "large.csv").exists()
    assert "slope" in report["height_law"]


def test_points_subset_selects_bubbles(tmp_path, capsys):
    cfg = tmp_path / "two.cfg"
    cfg.write_text("n = 64\nbeta = 17\npoints = 0.25 0.5; 0.75 0.5\ngreen_n = 64\n")
    code, out = run(capsys, "green", "--config", cfg, "--out", tmp_path / "g", "--points", "1")
    assert code == 0
    assert len(json.loads((tmp_path / "g" / "green.json").read_text())["H_at_points"]) == 1


def test_stdout_carries_only_the_manifest_path(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bubbling.cli", "green", "--config", str(CONFIGS / "quick.cfg"),
                           "--out", str(tmp_path)], capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.strip().splitlines() == [str(tmp_path / "manifest.json")]

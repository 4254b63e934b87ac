import json
import os
import subprocess
import sys

import numpy as np
import pytest

from shapeopt.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from shapeopt.io import config_hash, read_json


def run(*argv):
    return main([str(a) for a in argv])


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


SMALL = ["--h", 0.08, "--angles", 32]


def test_usage_errors(tmp_path):
    assert run("solve", "--config", tmp_path / "missing.json", "--out", tmp_path) == EXIT_USAGE
    assert run("bogus-command") == EXIT_USAGE
    assert run("solve", "--h", -1, "--out", tmp_path) == EXIT_USAGE
    assert run("optimize", "--variant", "constrained_energy", "--m0", 5.0, *SMALL, "--out", tmp_path) == EXIT_USAGE
    assert run("plot", "--input", tmp_path / "nothing", "--out", tmp_path / "p") == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("solve", "--config", bad, "--out", tmp_path) == EXIT_USAGE


def test_solve_disk_and_square(tmp_path):
    out = tmp_path / "disk"
    assert run("solve", "--h", 0.05, "--out", out) == EXIT_OK
    man = read_json(out / "manifest.json")
    assert man["summary"]["energy"] == pytest.approx(-np.pi / 16, rel=0.01)
    assert man["config_hash"] == config_hash(man["config"])
    cfg = write_cfg(tmp_path, {"domain": {"type": "square", "side": 1.0}})
    out = tmp_path / "sq"
    assert run("solve", "--config", cfg, "--h", 0.03, "--out", out) == EXIT_OK
    assert read_json(out / "manifest.json")["summary"]["energy"] == pytest.approx(-0.0175714, rel=0.005)


def test_eig(tmp_path):
    assert run("eig", "--h", 0.05, "--out", tmp_path) == EXIT_OK
    lam = read_json(tmp_path / "manifest.json")["summary"]["lambda_1"]
    assert lam == pytest.approx(2.404825557695773**2, rel=0.01)


def test_solve_output_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("solve", "--h", 0.06, "--out", a) == EXIT_OK
    assert run("solve", "--h", 0.06, "--out", b) == EXIT_OK
    files = sorted(f for f in os.listdir(a) if f != "manifest.json")
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_deriv_check_detects_wrong_formula(tmp_path):
    assert run("deriv-check", "--h", 0.03, "--out", tmp_path / "ok") == EXIT_OK
    assert run("deriv-check", "--h", 0.03, "--wrong-formula", "--out", tmp_path / "bad") == EXIT_FAIL


def test_perturb(tmp_path):
    assert run("perturb", "--out", tmp_path) == EXIT_OK
    assert read_json(tmp_path / "manifest.json")["summary"]["monotone"]


def test_optimize_resume_plot_verify(tmp_path):
    out = tmp_path / "opt"
    assert run("optimize", *SMALL, "--max-iter", 4, "--out", out) == EXIT_OK
    for f in ("result.json", "optimality.json", "polygonality.json", "flux.csv", "manifest.json"):
        assert (out / f).is_file()
    res = read_json(out / "result.json")
    snaps = sorted((out / "snapshots").glob("snapshot_*.json"))
    assert len(snaps) == res["iterations"]
    # resume from the second snapshot reproduces the final value
    out2 = tmp_path / "resumed"
    assert run("optimize", *SMALL, "--max-iter", 4, "--resume", snaps[1], "--out", out2) == EXIT_OK
    assert read_json(out2 / "result.json")["value"] == pytest.approx(res["value"], abs=1e-10)
    # plots go to the output directory, not the input
    pdir = tmp_path / "plots"
    assert run("plot", "--input", out, "--out", pdir) == EXIT_OK
    assert (pdir / "shape.svg").is_file()
    assert not (out / "shape.svg").exists()
    # four iterations are far from optimal: the verification chain fails
    code = run("verify-optimum", "--input", out, "--out", tmp_path / "ver")
    assert code in (EXIT_OK, EXIT_FAIL)
    assert (tmp_path / "ver" / "optimality.json").is_file()
    assert read_json(tmp_path / "ver" / "manifest.json")["exit_code"] == code


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "shapeopt.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "optimize" in r.stdout

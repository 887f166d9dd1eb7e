import csv
import json
import subprocess
import sys

import pytest

from hatsim.cli import main

SMALL = """[fleet]
n_sources = 4
samples_per_domain = 200
source_epochs = 40

[training]
epochs_target = 20
epochs_mixer = 10

[selection]
eta = 0.5
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL)
    return str(p)


def test_otse_writes_outputs(tmp_path, cfg_path, capsys):
    out = tmp_path / "o"
    assert main(["otse", "--config", cfg_path, "--seed", "2", "--out", str(out),
                 "--save-models", "--dump-weights"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["mode"] == "otse" and rep["seed"] == 2
    tid = rep["targets"][0]["target_id"]
    for name in (f"history_{tid}.csv", f"model_{tid}.bin", f"weights_{tid}.csv", "comparison.csv"):
        assert (out / name).exists()
    assert "accuracy=" in capsys.readouterr().out


def test_overrides_reach_the_run(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert main(["otse", "--config", cfg_path, "--out", str(out), "--eta", "1.0", "--np", "1",
                 "--gamma", "0.2", "--strategy", "equal_distill"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["config"]["selection"]["eta"] == 1.0
    assert rep["config"]["target"]["gamma"] == 0.2
    assert rep["strategy"] == "equal_distill"
    assert len(rep["targets"][0]["selected"]) == 1


def test_mrse(tmp_path, cfg_path):
    p = tmp_path / "m.ini"
    p.write_text(SMALL + "\n[mrse]\nlayout = 3, 1, 1\n")
    assert main(["mrse", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert [r["registry_size"] for r in rep["rounds"]] == [3, 4]


def test_grid(tmp_path, cfg_path, capsys):
    out = tmp_path / "g"
    assert main(["grid", "--config", cfg_path, "--out", str(out), "--strategies", "hat,supervised",
                 "--seeds", "0,3"]) == 0
    rows = list(csv.DictReader(open(out / "comparison.csv")))
    assert [(r["strategy"], r["seed"]) for r in rows] == [("hat", "0"), ("hat", "3"),
                                                           ("supervised", "0"), ("supervised", "3")]
    assert (out / "hat_seed3" / "report.json").exists()
    assert len(capsys.readouterr().out.strip().splitlines()) == 4


def test_sweep(tmp_path, cfg_path):
    out = tmp_path / "s"
    assert main(["sweep", "--config", cfg_path, "--out", str(out), "--param", "eta",
                 "--values", "0.25,1.0", "--seeds", "1"]) == 0
    rows = list(csv.DictReader(open(out / "comparison.csv")))
    assert [r["eta"] for r in rows] == ["0.25", "1.0"]
    assert (out / "eta0.25_hat_seed0").is_dir() and (out / "eta1.0_hat_seed0").is_dir()
    assert json.loads((out / "report.json").read_text())["command"] == "sweep"


def test_bad_config_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[task]\nnum_classes = 5\nbogus = 1\n")
    assert main(["otse", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "line 3: unknown key 'bogus'" in capsys.readouterr().err


def test_bad_overrides_exit_with_status_two(tmp_path, cfg_path, capsys):
    assert main(["otse", "--config", cfg_path, "--out", str(tmp_path), "--eta", "0"]) == 2
    assert main(["otse", "--out", str(tmp_path), "--strategy", "nonsense"]) == 2
    assert main(["sweep", "--config", cfg_path, "--out", str(tmp_path), "--param", "bogus",
                 "--values", "1", "--seeds", "1"]) == 2
    assert capsys.readouterr().err.count("hatsim: error:") == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hatsim", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("otse", "mrse", "grid", "sweep"):
        assert cmd in res.stdout

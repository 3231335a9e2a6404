import csv
import subprocess
import sys

import pytest

from gsticp.cli import main


@pytest.fixture
def tiny_config(write_json):
    return write_json("tiny.json", {
        "n_agents": 5, "n_anchors": 4, "area": {"min": [0, 0, 0], "max": [200, 200, 50]},
        "comm_range": 400.0, "n_slots": 2, "l_max": 4, "mc_runs": 2, "seed": 5,
    })


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_writes_all_outputs(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(tiny_config), "--out", str(out), "--eps", "0:10:1"]) == 0
    for name in ("results.csv", "cdf.csv", "counters.csv", "config.json"):
        assert (out / name).exists()
    rows = read_csv(out / "results.csv")
    assert rows[0] == ["run", "slot", "agent", "true_x", "true_y", "true_z", "est_x", "est_y", "est_z", "error"]
    assert len(rows) == 1 + 2 * 2 * 5
    assert "P(e<=5m)" in capsys.readouterr().out


def test_simulate_several_algorithms(tiny_config, tmp_path):
    out = tmp_path / "cmp"
    assert main(["simulate", "--config", str(tiny_config), "--out", str(out), "--eps", "0:4:1",
                 "--algorithm", "gsticp,spa-te", "--seed", "9"]) == 0
    assert (out / "gsticp" / "results.csv").exists() and (out / "spa-te" / "results.csv").exists()
    labels = [r[0] for r in read_csv(out / "cdf.csv")[1:]]
    assert labels == ["gsticp"] * 5 + ["spa-te"] * 5


def test_sweep_and_cdf(tiny_config, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(tiny_config), "--vary", "comm_range=100:300:100",
                 "--out", str(out), "--eps", "0:5:1"]) == 0
    rows = read_csv(out / "sweep.csv")
    assert rows[0] == ["comm_range", "median_error", "p_le_5"]
    assert [r[0] for r in rows[1:]] == ["100.0", "200.0", "300.0"]
    sim = tmp_path / "sim"
    main(["simulate", "--config", str(tiny_config), "--out", str(sim)])
    capsys.readouterr()
    assert main(["cdf", "--results", str(sim / "results.csv"), "--eps", "0:10:5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "algorithm,epsilon,p" and len(lines) == 4
    assert main(["cdf", "--results", str(sim / "results.csv"), "--out", str(tmp_path / "c.csv")]) == 0
    assert len(read_csv(tmp_path / "c.csv")) == 202


def test_errors_exit_with_code_two(tiny_config, tmp_path, write_json, capsys):
    bad = write_json("bad.json", {"n_agents": 3, "bogus": 1})
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--config", str(tiny_config), "--out", str(tmp_path), "--algorithm", "gnss"]) == 2
    assert main(["sweep", "--config", str(tiny_config), "--vary", "comm_range", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--config", str(tiny_config), "--out", str(tmp_path),
                 "--algorithm", "spawn", "--oracle-nlos"]) == 2


def test_module_entry_point(tiny_config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gsticp", "simulate", "--config", str(tiny_config),
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "cdf.csv").exists()

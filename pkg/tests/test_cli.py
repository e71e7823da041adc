import csv
import json

import numpy as np
import pytest

from ambigam import cli
from ambigam.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def s3_csv(tmp_path):
    path = tmp_path / "s3.csv"
    assert run("simulate", "--scenario", "S3", "--seed", 21, "--out", path) == 0
    return path


def test_simulate_prints_generated_seed(tmp_path, capsys):
    assert run("simulate", "--scenario", "S1", "--out", tmp_path / "a.csv") == 0
    assert "seed: " in capsys.readouterr().err


def test_simulate_study_mode(tmp_path):
    out, rec = tmp_path / "study.json", tmp_path / "rec.csv"
    assert run("simulate", "--scenario", "S1", "--seed", 1, "--iterations", 4, "--model", "lm",
               "--out", out, "--records", rec) == 0
    d = json.loads(out.read_text())
    assert d["iterations"] == 4 and d["seed"] == 1
    assert len(rec.read_text().splitlines()) == 5


def test_ambiguity_labels(tmp_path, s3_csv, capsys):
    out = tmp_path / "rep.json"
    assert run("ambiguity", "--input", s3_csv, "--response", "y", "--smooth", "x,z",
               "--interaction", "x:z", "--out", out) == 0
    assert json.loads(out.read_text())["classification"] == {"x:z": "Ambiguous"}
    assert "x:z: Ambiguous" in out.with_suffix(".txt").read_text()
    assert "Ambiguous" in capsys.readouterr().out

    s4 = tmp_path / "s4.csv"
    run("simulate", "--scenario", "S4", "--seed", 22, "--out", s4)
    assert run("ambiguity", "--input", s4, "--response", "y", "--smooth", "x:10,z:10",
               "--interaction", "x:z", "--out", out) == 0
    assert json.loads(out.read_text())["classification"] == {"x:z": "Robust"}


def test_uncovered_interaction_is_usage_error(tmp_path, s3_csv):
    out = tmp_path / "bad.json"
    assert run("ambiguity", "--input", s3_csv, "--response", "y", "--smooth", "x",
               "--interaction", "x:z", "--out", out) == 2
    assert not out.exists()


@pytest.mark.parametrize("argv", [
    ["fit", "--response", "y"],
    ["simulate", "--scenario", "S9", "--out", "x.csv"],
    ["table3", "--iterations", "0", "--out", "t"],
    ["fit", "--input", "a.csv", "--response", "y", "--smooth", "x:ten", "--out", "f.json"],
])
def test_validation_errors(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert list(tmp_path.iterdir()) == []


def test_data_errors_exit_1_without_output(tmp_path):
    out = tmp_path / "r.json"
    assert run("ambiguity", "--input", tmp_path / "missing.csv", "--response", "y",
               "--smooth", "x,z", "--interaction", "x:z", "--out", out) == 1
    assert list(tmp_path.iterdir()) == []


def test_partial_outputs_removed(tmp_path, monkeypatch):
    def boom(result):
        raise RuntimeError("late failure")

    monkeypatch.setattr(cli, "table3_markdown", boom)
    with pytest.raises(RuntimeError):
        run("table3", "--iterations", 1, "--seed", 1, "--out", tmp_path / "t")
    assert list(tmp_path.iterdir()) == []


def test_table3_single_iteration_is_deterministic(tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("table3", "--iterations", 1, "--seed", 5, "--out", a) == 0
    monkeypatch.setenv("AMBIG_THREADS", "3")
    assert run("table3", "--iterations", 1, "--seed", 5, "--out", b.with_suffix(".json")) == 0
    assert a.with_suffix(".json").read_bytes() == b.with_suffix(".json").read_bytes()
    assert "(unreliable)" in a.with_suffix(".md").read_text()
    d = json.loads(a.with_suffix(".json").read_text())
    assert len(d["rows"]) == 7 and all(not r["se_reliable"] for r in d["rows"])
    assert "intro" in d


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# study settings\nscenario = S1\nseed = 3\nout = {tmp_path / 'cfg.csv'}\n")
    assert run("simulate", "--config", cfg) == 0
    first = (tmp_path / "cfg.csv").read_bytes()
    assert run("simulate", "--config", cfg, "--seed", 4) == 0
    assert (tmp_path / "cfg.csv").read_bytes() != first

    (tmp_path / "bad.cfg").write_text("scenaro = S1\n")
    assert run("simulate", "--config", tmp_path / "bad.cfg") == 2


def test_fit_lm_and_am(tmp_path, s3_csv):
    lm = tmp_path / "lm.json"
    assert run("fit", "--input", s3_csv, "--response", "y", "--terms", "x, z, x:z", "--out", lm) == 0
    d = json.loads(lm.read_text())
    assert d["model"] == "LM" and "x:z" in d["t"]

    am = tmp_path / "am.json"
    assert run("fit", "--input", s3_csv, "--response", "y", "--smooth", "x,z", "--out", am) == 0
    d = json.loads(am.read_text())
    assert d["model"] == "AM" and d["converged"] and len(d["blocks"]) == 2


def test_plot_data_smooth_grid(tmp_path):
    data = tmp_path / "quad.csv"
    run("simulate", "--scenario", "S3", "--seed", 30, "--n", 4000, "--out", data)
    fit = tmp_path / "fit.json"
    assert run("fit", "--input", data, "--response", "y", "--smooth", "x", "--out", fit) == 0
    out = tmp_path / "sx.csv"
    assert run("plot-data", "--fit", fit, "--covariate", "x", "--grid", 101, "--out", out) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["x", "s(x)"]
    x, s = np.array(rows[1:], dtype=float).T
    assert len(x) == 101
    i = int(np.argmin(s))
    assert abs(x[i]) < 0.15
    assert np.all(np.diff(s[: i - 5]) < 0) and np.all(np.diff(s[i + 5:]) > 0)

    # binned-means oracle on the raw data, both centred
    raw = np.loadtxt(data, delimiter=",", skiprows=1)
    xs, ys = raw[:, 1], raw[:, 0]
    centres = np.linspace(-0.9, 0.9, 10)
    binned = np.array([ys[np.abs(xs - c) < 0.1].mean() for c in centres])
    smooth = np.interp(centres, x, s)
    diff = (binned - binned.mean()) - (smooth - smooth.mean())
    assert np.abs(diff).max() < 0.15

    one = tmp_path / "one.csv"
    assert run("plot-data", "--fit", fit, "--covariate", "x", "--grid", 1, "--out", one) == 0
    mid = float(one.read_text().splitlines()[1].split(",")[0])
    assert abs(mid - (x[0] + x[-1]) / 2) < 1e-12

    missing = tmp_path / "w.csv"
    assert run("plot-data", "--fit", fit, "--covariate", "w", "--out", missing) == 1
    assert not missing.exists()


def test_plot_data_cell_means(tmp_path):
    data = tmp_path / "intro.csv"
    run("simulate", "--scenario", "Intro", "--seed", 2, "--out", data)
    out = tmp_path / "cells.csv"
    assert run("plot-data", "--input", data, "--response", "y", "--dichotomize", "x,z",
               "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert [(r["x_f"], r["z_f"]) for r in rows] == [
        ("neg", "neg"), ("neg", "pos"), ("pos", "neg"), ("pos", "pos")]
    assert sum(int(r["n"]) for r in rows) == 5000


def test_reading_corpus_with_crossed_factors(tmp_path):
    data = tmp_path / "reading.csv"
    assert run("simulate", "--scenario", "reading", "--seed", 3, "--out", data) == 0
    header = data.read_text().split("\n", 1)[0]
    assert header == "x_l,a,l_w,l_s,Word,Sentence,Subject"

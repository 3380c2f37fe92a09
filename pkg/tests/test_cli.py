import os

import numpy as np
import pytest

from trunet import cli
from trunet.checks import SuiteResult
from trunet.gridfile import read_grid_file, read_manifest, write_grid_file

CONFIG = "train.epochs=1\ntrain.locations=4\ntrain.p_input=0.1\ngrid.learning_rate=0.01;0.003\n"


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(root, seed=7):
    cfg = root / "cfg.manifest"
    cfg.write_text(CONFIG)
    assert run("synth", "--out", root / "data", "--days", 80, "--seed", seed) == 0
    series = root / "data" / "series.tgrd"
    assert run("train", "--data", series, "--out", root / "model", "--config", cfg, "--model", "hcgru",
               "--seed", seed) == 0
    assert run("predict", "--checkpoint", root / "model" / "model.tgrd", "--data", series, "--out",
               root / "pred", "--mcma-samples", 2, "--seed", seed) == 0
    assert run("evaluate", "--predictions", root / "pred" / "predictions.tgrd", "--observations",
               root / "pred" / "observations.tgrd", "--out", root / "eval") == 0
    return root


def artifacts(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("run1"))


def test_pipeline_artifacts(first_run):
    names = set(artifacts(first_run))
    for expected in ["data/series.tgrd", "data/series.tgrd.manifest", "model/model.tgrd",
                     "model/model.tgrd.manifest", "model/train.log", "pred/predictions.tgrd",
                     "pred/observations.tgrd", "eval/report.txt", "eval/report.manifest"]:
        assert expected in names
    pred = read_grid_file(first_run / "pred" / "predictions.tgrd")
    assert pred["rain"].shape[1:] == (8, 4, 4) and pred["day"].shape == pred["rain"].shape[:2]
    report = read_manifest(first_run / "eval" / "report.manifest")
    assert float(report["all.rmse"]) >= 0 and int(report["all.count"]) == pred["rain"].size


def test_same_seed_is_bit_identical(first_run, tmp_path):
    again = pipeline(tmp_path)
    a, b = artifacts(first_run), artifacts(again)
    a.pop("cfg.manifest"), b.pop("cfg.manifest")
    assert a.keys() == b.keys()
    for name in a:
        assert a[name] == b[name], name


def test_different_seed_changes_checkpoint(first_run, tmp_path):
    other = pipeline(tmp_path, seed=8)
    assert artifacts(first_run)["model/model.tgrd"] != artifacts(other)["model/model.tgrd"]


def test_evaluate_identical_files_is_all_zero(first_run, tmp_path):
    obs = first_run / "pred" / "observations.tgrd"
    assert run("evaluate", "--predictions", obs, "--observations", obs, "--out", tmp_path) == 0
    report = read_manifest(tmp_path / "report.manifest")
    for key, value in report.items():
        if key.endswith((".rmse", ".mae", ".me", ".r10_rmse")) and value != "undefined":
            assert float(value) == 0.0, key


def test_evaluate_without_calendar(tmp_path):
    write_grid_file(tmp_path / "p.tgrd", {"rain": np.array([0.0, 12.0])})
    write_grid_file(tmp_path / "o.tgrd", {"rain": np.array([0.0, 10.0])})
    assert run("evaluate", "--predictions", tmp_path / "p.tgrd", "--observations", tmp_path / "o.tgrd",
               "--out", tmp_path / "e") == 0
    report = read_manifest(tmp_path / "e" / "report.manifest")
    assert report["all.r10_rmse"] == "2.0" and report["all.me"] == "1.0"


def test_gridsearch_command(first_run, tmp_path):
    assert run("gridsearch", "--data", first_run / "data" / "series.tgrd", "--out", tmp_path,
               "--config", first_run / "cfg.manifest", "--model", "hcgru") == 0
    lines = (tmp_path / "grid.txt").read_text().splitlines()
    assert len(lines) == 3 and lines[0].split()[:2] == ["rank", "learning_rate"]


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        run("train", "--bogus")
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        run("synth", "--out", "x", "--seed", "-1")
    assert info.value.code == 2


def test_validation_failures_exit_1(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "missing.tgrd", "--out", tmp_path / "o") == 1
    bad = tmp_path / "bad.manifest"
    bad.write_text("model.filters=lots\n")
    assert run("synth", "--out", tmp_path / "d", "--days", 30, "--config", bad) == 0
    assert run("train", "--data", tmp_path / "d" / "series.tgrd", "--out", tmp_path / "o", "--config", bad,
               "--model", "hcgru") == 1
    bad.write_text("epochs=3\n")
    assert run("synth", "--out", tmp_path / "d", "--config", bad) == 1
    assert run("synth", "--out", tmp_path / "d", "--days", 10) == 1
    err = capsys.readouterr().err
    assert "ConfigError" in err and "ContractError" in err


def test_gradcheck_exit_codes(monkeypatch, tmp_path):
    class Report:
        def __init__(self, passed):
            self.passed, self.max_rel_error = passed, 0.0 if passed else 1.0

        def format(self):
            return "details"

    monkeypatch.setattr(cli, "run_suite", lambda seed: [SuiteResult("trunet", Report(True), 0.1, 3)])
    assert run("gradcheck", "--out", tmp_path) == 0
    assert (tmp_path / "gradcheck.txt").read_text().startswith("PASS trunet")
    monkeypatch.setattr(cli, "run_suite", lambda seed: [SuiteResult("hcgru", Report(False), 0.1, 3)])
    assert run("gradcheck") == 1


@pytest.mark.slow
def test_gradcheck_micro_suite_exits_zero(capsys):
    assert run("gradcheck") == 0
    assert capsys.readouterr().out.count("PASS") == 2

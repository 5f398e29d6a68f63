import csv
import json

import pytest

from layerpos.cli import main
from layerpos.config import ExperimentConfig


def call(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture
def pretrained(tmp_path, capsys):
    out = tmp_path / "run"
    code, doc, _ = call(capsys, "pretrain", "--out-dir", str(out))
    assert code == 0 and doc["status"] == "ok"
    return out


SHORT = ("--T", "12", "--T-s", "5")


def test_pretrain_is_reproducible(tmp_path, capsys, pretrained):
    again = tmp_path / "again"
    call(capsys, "pretrain", "--out-dir", str(again))
    assert (pretrained / "pretrained.json").read_bytes() == (again / "pretrained.json").read_bytes()
    cfg = json.loads((pretrained / "config.json").read_text())
    assert cfg["out_dir"] == str(pretrained) and cfg["rank"] == 8 and cfg["gamma"] == 2.0


def test_infinite_threshold_always_passes(tmp_path, capsys):
    code, doc, _ = call(capsys, "pretrain", "--out-dir", str(tmp_path), "--source-threshold", "inf")
    assert code == 0 and doc["source_loss"] < 1e-20


def test_adapt_writes_metrics_selection_and_checkpoint(capsys, pretrained):
    code, doc, _ = call(capsys, "adapt", "--out-dir", str(pretrained), *SHORT)
    assert code == 0
    with open(pretrained / "metrics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 12
    sel = json.loads((pretrained / "selection.json").read_text())
    assert len(sel["selection"]) == 3 and sel["selection"] == doc["selection"]
    assert (pretrained / "adapted.json").exists() and (pretrained / "summary.json").exists()


def test_resolved_config_reproduces_the_run(tmp_path, capsys, pretrained):
    call(capsys, "adapt", "--out-dir", str(pretrained), *SHORT, "--eta-alpha", "0.05")
    first = (pretrained / "metrics.csv").read_bytes()
    resolved = ExperimentConfig.load(pretrained / "config.json")
    assert resolved.eta_alpha == 0.05 and resolved.T == 12
    cfg_copy = tmp_path / "resolved.json"
    cfg_copy.write_text((pretrained / "config.json").read_text())
    call(capsys, "adapt", "--config", str(cfg_copy))
    assert (pretrained / "metrics.csv").read_bytes() == first


def test_eval_is_read_only_and_repeatable(capsys, pretrained):
    call(capsys, "adapt", "--out-dir", str(pretrained), *SHORT)
    ckpt = pretrained / "adapted.json"
    before = ckpt.read_bytes()
    _, a, _ = call(capsys, "eval", "--out-dir", str(pretrained), "--checkpoint", str(ckpt))
    _, b, _ = call(capsys, "eval", "--out-dir", str(pretrained), "--checkpoint", str(ckpt))
    assert a == b and ckpt.read_bytes() == before
    _, pre, _ = call(capsys, "eval", "--out-dir", str(pretrained))
    assert a["h2c"] < pre["h2c"]
    _, src, _ = call(capsys, "eval", "--out-dir", str(pretrained), "--data", "source")
    assert src["source_mse"] < 1e-20


def test_oracle_baselines_and_sweep_reports(capsys, pretrained):
    code, doc, _ = call(capsys, "oracle", "--out-dir", str(pretrained), "--oracle-budget", "2")
    assert code == 0 and doc["subsets"] == 20
    with open(pretrained / "oracle.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 20
    code, doc, _ = call(capsys, "baselines", "--out-dir", str(pretrained), "--T", "4", "--T-s", "2")
    assert code == 0 and len(doc["rows"]) == 5
    code, doc, _ = call(capsys, "sweep", "--out-dir", str(pretrained), "--T", "3", "--T-s", "1")
    counts = [r["trainable_params"] for r in doc["records"]]
    assert len(counts) == 6 and counts == sorted(set(counts))


def test_missing_checkpoint_is_a_machine_readable_error(tmp_path, capsys):
    code, _, err = call(capsys, "adapt", "--out-dir", str(tmp_path / "nothing"))
    assert code == 1
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["status"] == "error" and doc["error"] == "CommandError"


def test_invalid_config_is_reported(tmp_path, capsys, pretrained):
    code, _, err = call(capsys, "adapt", "--out-dir", str(pretrained), "--T", "5", "--T-s", "5")
    assert code == 1 and "T_s" in json.loads(err)["message"]


def test_corrupt_checkpoint_is_reported(tmp_path, capsys, pretrained):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = call(capsys, "eval", "--out-dir", str(pretrained), "--checkpoint", str(bad))
    assert code == 1 and json.loads(err)["status"] == "error"

import csv
import json

import numpy as np
import pytest

from moeprune.attribution import log_trace
from moeprune.cli import main
from moeprune.moe import checkpoint_dict, model_from_checkpoint

SMALL = """
[dataset]
examples_per_subtask = 60
[train]
epochs = 2
[al]
budget = 12
batch_size = 4
steps_per_round = 3
"""


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL)
    return path


def run(cfg_path, out, *args):
    return main([args[0], "--config", str(cfg_path), "--out", str(out), *args[1:]])


@pytest.fixture
def staged(tmp_path, cfg_path):
    out = tmp_path / "run"
    for cmd in ("train", "trace", "attribute"):
        assert run(cfg_path, out, cmd) == 0
    return out


def test_stage_commands_write_stamped_artifacts(staged, cfg_path, capsys):
    for cmd in ("prune", "realign", "eval", "curve"):
        assert run(cfg_path, staged, cmd) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    for name in ("model.json", "attribution.json", "plan.json", "pruned.json", "al_history.json", "realigned.json", "metrics.json"):
        doc = json.loads((staged / name).read_text())
        assert doc["master_seed"] == 0 and len(doc["config_hash"]) == 16, name
    header = json.loads((staged / "trace.jsonl").read_text().splitlines()[0])["meta"]
    assert header["master_seed"] == 0 and "config_hash" in header
    plan = json.loads((staged / "plan.json").read_text())
    assert [len(r) for r in plan["retained"]] == [2, 2]
    assert not list(staged.glob("*.tmp"))


def test_curve_has_header_and_m_rows(staged, cfg_path):
    assert run(cfg_path, staged, "curve") == 0
    rows = list(csv.reader((staged / "curve.csv").open()))
    assert rows[0][:4] == ["k", "accuracy", "mean_ce", "normalized_score"]
    assert len(rows) == 1 + 8
    assert {r[rows[0].index("master_seed")] for r in rows[1:]} == {"0"}


def test_empty_trace_exits_1(tmp_path, staged, cfg_path, capsys):
    model = model_from_checkpoint(json.loads((staged / "model.json").read_text()))
    empty = tmp_path / "empty.jsonl"
    log_trace(model, np.zeros((0, 16)), empty)
    assert run(cfg_path, staged, "attribute", "--trace", str(empty)) == 1
    assert "empty trace" in capsys.readouterr().err


def test_strict_threshold_wipe_out_exits_1(tmp_path, staged, capsys):
    strict_cfg = tmp_path / "strict.ini"
    strict_cfg.write_text(SMALL + "[prune]\nstrategy = threshold\ntau = 0.99\n")
    assert run(strict_cfg, staged, "prune", "--strict") == 1
    assert "layer 0" in capsys.readouterr().err


def test_missing_input_exits_2(tmp_path, cfg_path):
    assert run(cfg_path, tmp_path / "nothing", "eval") == 2


def test_nan_weights_exit_3(tmp_path, staged, cfg_path):
    doc = json.loads((staged / "model.json").read_text())
    doc["params"]["head.b"][0] = float("nan")
    bad = tmp_path / "nan.json"
    bad.write_text(json.dumps(doc))
    assert run(cfg_path, staged, "eval", "--model", str(bad)) == 3


def test_usage_errors_exit_1(tmp_path, cfg_path):
    assert main(["fly"]) == 1
    assert main(["train", "--seed", "abc"]) == 1
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\ntypo = 1\n")
    assert main(["train", "--config", str(bad)]) == 1


def test_pipeline_defense_writes_two_curves(tmp_path, cfg_path, capsys):
    out = tmp_path / "def"
    assert run(cfg_path, out, "pipeline", "--mode", "defense", "--summary") == 0
    assert (out / "standard.csv").exists() and (out / "entangled.csv").exists()
    summary = capsys.readouterr().out
    assert "standard" in summary and "entangled" in summary and "resistance" in summary


def test_pipeline_attack_is_deterministic(tmp_path, cfg_path):
    docs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(cfg_path, out, "pipeline", "--mode", "attack", "--seed", "3") == 0
        doc = json.loads((out / "attack_report.json").read_text())
        assert len(doc["arms"]) == 3 and doc["master_seed"] == 3
        doc.pop("generated_at")
        docs.append(json.dumps(doc, sort_keys=True))
    assert docs[0] == docs[1]

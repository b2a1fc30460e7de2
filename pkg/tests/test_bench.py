import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from moeprune.attribution import attribution_soft, collect_trace
from moeprune.bench import (
    EvalMetrics,
    PrunabilityCurve,
    StageError,
    attack_pipeline,
    curve_csv,
    defense_pipeline,
    evaluate,
    prunability_curve,
    report_without_private,
    resistance_score,
    retention,
)
from moeprune.config import RunConfig
from moeprune.moe import ModelConfig, build_model
from moeprune.numcore import Rng, StateError


def small_cfg(seed=0):
    cfg = RunConfig().with_seed(seed)
    cfg.dataset.examples_per_subtask = 60
    cfg.train.epochs = 2
    cfg.al.budget = 12
    cfg.al.batch_size = 4
    cfg.al.steps_per_round = 3
    return cfg


def test_retention_examples():
    assert retention(EvalMetrics(0.7, 1.0), EvalMetrics(0.7, 1.0)) == 1.0
    assert retention(EvalMetrics(78.9, 0), EvalMetrics(86.1, 0)) == pytest.approx(0.9164, abs=1e-4)
    assert retention(EvalMetrics(0.9, 0), EvalMetrics(0.8, 0)) > 1.0
    with pytest.raises(ValueError):
        retention(EvalMetrics(0.5, 0), EvalMetrics(0.0, 0))


def test_resistance_examples():
    assert resistance_score([0.8] * 8) == 0.0
    assert resistance_score([86.1, 83.7, 78.9, 71.4]) == pytest.approx(0.0941, abs=1e-4)
    assert resistance_score([0.9] * 7 + [0.0]) == pytest.approx(1 / 7, abs=1e-15)
    with pytest.raises(ValueError):
        resistance_score([0.0, 0.0])


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.floats(0.1, 100.0))
def test_resistance_scale_invariant_and_bounded(acc, c):
    d = resistance_score(acc)
    assert 0.0 <= d <= 1.0
    assert resistance_score([c * a for a in acc]) == pytest.approx(d, abs=1e-12)


def perfect_model():
    cfg = ModelConfig(input_dim=4, model_dim=4, num_layers=1, experts_per_layer=2, top_k=1, expert_hidden_dim=3, num_classes=4)
    model = build_model(cfg, Rng(0))
    for name in list(model.params):
        model.params[name][...] = 0.0
    model.params["input_proj"][...] = 10.0 * np.eye(4)
    model.params["head.W"][...] = np.eye(4)
    return model


def test_evaluate_perfect_and_self_reference():
    model = perfect_model()
    y = np.array([0, 1, 2, 3] * 5)
    x = np.eye(4)[y]
    m = evaluate(model, x, y)
    assert m.accuracy == 1.0 and m.mean_cross_entropy < 0.1
    assert evaluate(model, x, y, reference_ce=m.mean_cross_entropy).normalized_score == 100.0


def test_evaluate_random_guess_near_chance():
    model = build_model(ModelConfig(), Rng(1))
    rng = Rng(2)
    x = rng.normal((2000, 16))
    y = np.array([rng.integer(4) for _ in range(2000)])
    assert abs(evaluate(model, x, y).accuracy - 0.25) <= 0.03


def test_evaluate_errors():
    model = perfect_model()
    with pytest.raises(StateError):
        evaluate(model, np.eye(4), np.arange(4), normalize=True)
    with pytest.raises(ValueError):
        evaluate(model, np.zeros((0, 4)), np.zeros(0, dtype=int))


def test_curve_shape_and_endpoint():
    model = build_model(ModelConfig(), Rng(3))
    rng = Rng(4)
    x = rng.normal((100, 16))
    y = np.array([rng.integer(4) for _ in range(100)])
    report = attribution_soft(collect_trace(model, x))
    curve = prunability_curve(model, x, y, report)
    assert [k for k, _ in curve.points] == list(range(8, 0, -1))
    direct = evaluate(model, x, y)
    assert curve.points[0][1].accuracy == direct.accuracy
    assert curve.points[0][1].mean_cross_entropy == direct.mean_cross_entropy
    rows = list(csv.reader(io.StringIO(curve_csv(curve))))
    assert rows[0] == ["k", "accuracy", "mean_ce", "normalized_score"]
    assert len(rows) == 9


def test_curve_flat_when_experts_are_silent():
    model = build_model(ModelConfig(), Rng(5))
    for l in range(2):
        for kind in ("W2", "b2"):
            model.params[f"layer{l}.{kind}"][...] = 0.0
    x = Rng(6).normal((50, 16))
    y = np.zeros(50, dtype=np.int64)
    report = attribution_soft(collect_trace(model, x))
    assert prunability_curve(model, x, y, report).resistance == 0.0


def test_attack_pipeline_none_arm_only():
    cfg = small_cfg()
    cfg.pipeline.arms = ["none"]
    report = attack_pipeline(cfg)
    assert [a["arm"] for a in report["arms"]] == ["none"]
    arm = report["arms"][0]
    assert arm["labels_used"] == 0
    assert arm["final"] == report["pruned"]["metrics"]


def test_attack_pipeline_arms_and_determinism():
    cfg = small_cfg(1)
    a = report_without_private(attack_pipeline(cfg))
    b = report_without_private(attack_pipeline(cfg))
    assert [x["arm"] for x in a["arms"]] == ["none", "random", "active"]
    assert all("labels_used" in x for x in a["arms"])
    a.pop("generated_at"), b.pop("generated_at")
    assert a == b


def test_defense_pipeline_same_lambda_gives_same_curves():
    cfg = small_cfg(2)
    cfg.pipeline.defense_lambda_ent = 0.0
    report = defense_pipeline(cfg)
    assert set(report["curves"]) == {"standard", "entangled"}
    assert report["curves"]["standard"]["points"] == report["curves"]["entangled"]["points"]


def test_stage_errors_are_tagged():
    cfg = small_cfg()
    cfg.al.strategy = "bogus"
    with pytest.raises(StageError, match=r"\[realign\]"):
        attack_pipeline(cfg)

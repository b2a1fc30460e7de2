import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeprune.attribution import attribution_hard, attribution_soft, collect_trace
from moeprune.moe import ModelConfig, build_model, checkpoint_dict, forward
from moeprune.numcore import Rng, softmax
from moeprune.pruning import (
    PlanError,
    PruningPlan,
    apply_plan,
    compression_stats,
    make_plan,
    random_plan,
    retain_all_plan,
)
from tests.test_attribution import make_trace, one_layer


def report_from(*layers):
    """Soft report whose per-layer scores equal the given vectors."""
    return attribution_soft(make_trace([[a] for a in layers], [[[0]] for _ in layers]))


A = [0.4, 0.3, 0.2, 0.1]


def test_topk_layerwise_example():
    assert make_plan(report_from(A), "topk_layerwise", k=2).retained == [[0, 1]]


def test_threshold_example():
    assert make_plan(report_from(A), "threshold", tau=0.25).retained == [[0, 1]]


def test_threshold_wipe_out_lenient_and_strict():
    plan = make_plan(report_from(A, [0.1, 0.1, 0.2, 0.6]), "threshold", tau=0.5)
    assert plan.retained == [[0], [3]]
    assert len(plan.warnings) == 1 and "layer 0" in plan.warnings[0]
    with pytest.raises(PlanError, match="layer 0"):
        make_plan(report_from(A), "threshold", tau=0.5, strict=True)


def test_tie_break_by_index():
    assert make_plan(report_from([0.25] * 4), "topk_layerwise", k=2).retained == [[0, 1]]


def test_topk_global_keeps_each_layer_top1():
    plan = make_plan(report_from([0.1, 0.1, 0.1, 0.7], [0.6, 0.4, 0.0, 0.0]), "topk_global", k=2)
    assert plan.retained == [[3], [0]]
    plan = make_plan(report_from([0.1, 0.1, 0.1, 0.7], [0.9, 0.1, 0.0, 0.0]), "topk_global", k=1)
    assert plan.retained == [[3], [0]]
    assert plan.warnings


def test_bad_parameters():
    rep = report_from(A)
    with pytest.raises(ValueError):
        make_plan(rep, "topk_layerwise", k=5)
    with pytest.raises(ValueError):
        make_plan(rep, "threshold", tau=1.5)
    with pytest.raises(ValueError):
        make_plan(rep, "magnitude", k=1)


@settings(max_examples=50)
@given(st.integers(0, 100_000))
def test_topk_monotone_in_k(seed):
    p = softmax(Rng(seed).normal((2, 8)), axis=1)
    rep = report_from(p[0], p[1])
    for strategy in ("topk_layerwise", "topk_global"):
        prev = None
        for k in range(1, 9):
            cur = make_plan(rep, strategy, k=k).retained
            if prev is not None:
                assert all(set(a) <= set(b) for a, b in zip(prev, cur))
            prev = cur


@settings(max_examples=50)
@given(st.integers(0, 100_000), st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone_in_tau(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    p = softmax(Rng(seed).normal((2, 8)), axis=1)
    rep = report_from(p[0], p[1])
    small = make_plan(rep, "threshold", tau=hi).retained
    big = make_plan(rep, "threshold", tau=lo).retained
    assert all(len(a) <= len(b) for a, b in zip(small, big))


def trained_like_model(seed=0):
    cfg = ModelConfig(input_dim=6, model_dim=6, num_layers=2, experts_per_layer=8, top_k=2, expert_hidden_dim=8, num_classes=3, seed=seed)
    model = build_model(cfg, Rng(seed))
    # expert 1 mirrors expert 0 and experts 2..7 score 0, so with k=2 every token
    # picks one of {0, 1} plus expert 2 and experts 3..7 are never selected
    for l in range(2):
        r = model.params[f"layer{l}.router"]
        r[1] = -r[0]
        r[2:] = 0.0
    return model


def test_retain_all_is_noop():
    model = trained_like_model()
    x = Rng(1).normal((40, 6))
    out = apply_plan(model, retain_all_plan(model))
    assert forward(out, x).logits.tobytes() == forward(model, x).logits.tobytes()


def test_zero_hard_attribution_removal_is_bit_exact():
    model = trained_like_model()
    x = Rng(2).normal((60, 6))
    rep = attribution_hard(collect_trace(model, x))
    retained = [np.flatnonzero(a > 0).tolist() for a in rep.scores]
    assert retained == [[0, 1, 2], [0, 1, 2]]
    pruned = apply_plan(model, PruningPlan("topk_layerwise", {}, retained))
    assert np.array_equal(forward(pruned, x).logits, forward(model, x).logits)


def test_apply_plan_zeroes_and_excludes_pruned_experts():
    model = trained_like_model()
    pruned = apply_plan(model, PruningPlan("topk_layerwise", {"k": 2}, [[0, 1], [3, 4]]))
    assert pruned.active_mask.sum() == 4
    assert np.all(pruned.params["layer0.W1"][2:] == 0)
    assert np.all(pruned.params["layer1.router"][[0, 1, 2, 5, 6, 7]] == 0)
    keys = checkpoint_dict(pruned)["params"]
    assert "layer0.expert0.W1" in keys and "layer0.expert5.W1" not in keys


def test_apply_plan_idempotent():
    model = trained_like_model()
    plan = PruningPlan("topk_layerwise", {"k": 3}, [[0, 1, 5], [2, 3, 4]])
    once = apply_plan(model, plan)
    twice = apply_plan(once, plan)
    for k in once.params:
        assert once.params[k].tobytes() == twice.params[k].tobytes()


def test_apply_plan_mismatch():
    model = trained_like_model()
    with pytest.raises(ValueError):
        apply_plan(model, PruningPlan("topk_layerwise", {}, [[0]]))
    with pytest.raises(ValueError):
        apply_plan(model, PruningPlan("topk_layerwise", {}, [[0], []]))
    pruned = apply_plan(model, PruningPlan("topk_layerwise", {}, [[0], [0]]))
    with pytest.raises(ValueError):
        apply_plan(pruned, PruningPlan("topk_layerwise", {}, [[1], [0]]))


def param_count_oracle(cfg):
    model = build_model(cfg, Rng(0))
    total = sum(v.size for v in model.params.values())
    per_expert = sum(model.params[f"layer0.{k}"][0].size for k in ("W1", "b1", "W2", "b2", "router"))
    return total, per_expert


def test_compression_stats():
    cfg = ModelConfig()
    none = compression_stats(PruningPlan("topk_layerwise", {}, [list(range(8))] * 2), cfg)
    assert (none.experts_removed, none.expert_params_removed_fraction, none.total_params_removed_fraction) == (0, 0.0, 0.0)
    two = compression_stats(PruningPlan("topk_layerwise", {}, [[0, 1], [2, 3]]), cfg)
    assert two.experts_removed == 12
    assert two.expert_params_removed_fraction == 0.75
    total, per_expert = param_count_oracle(cfg)
    assert two.total_params_removed_fraction == pytest.approx(12 * per_expert / total, abs=1e-15)


def test_random_plan_is_seeded():
    mask = np.ones((2, 8), dtype=bool)
    a = random_plan(mask, 3, Rng(4)).retained
    assert a == random_plan(mask, 3, Rng(4)).retained
    assert all(len(r) == 3 for r in a)


def test_plan_round_trip():
    plan = make_plan(report_from(A), "threshold", tau=0.5)
    assert PruningPlan.from_dict(plan.to_dict()) == plan

"""Routing traces and attribution on an untrained and a trained toy MoE.

Run with ``python demos/attribution_basics.py``.
"""

import numpy as np

from moeprune.attribution import attribution_hard, attribution_soft, collect_trace
from moeprune.bench import Experiment, train_full_model
from moeprune.config import RunConfig
from moeprune.moe import build_model

cfg = RunConfig().with_seed(0)
exp = Experiment.from_config(cfg)
x, y = exp.attribution_view()
print(f"adversary pool: {len(y)} examples from subtasks {cfg.pipeline.target_subtasks}")

# An untrained router spreads tokens fairly evenly.
fresh = build_model(cfg.model, exp.rng("init"))
trace = collect_trace(fresh, x)
print("\nuntrained model, soft attribution per layer")
for l, a in enumerate(attribution_soft(trace).scores):
    print(f"  layer {l}: {np.round(a, 3)}")

# Training makes a few experts own the adversary's subtasks.
model = train_full_model(exp)
trace = collect_trace(model, x)
hard, soft = attribution_hard(trace), attribution_soft(trace)
print("\ntrained model")
for l in range(cfg.model.num_layers):
    print(f"  layer {l} hard: {np.round(hard.scores[l], 3)}")
    print(f"  layer {l} soft: {np.round(soft.scores[l], 3)}")
    top4 = np.sort(soft.scores[l])[::-1][:4].sum()
    print(f"  layer {l} ranking {soft.layerwise[l]}, top-4 soft mass {top4:.2f}")

print("\nglobal ranking (first 6 pairs):", soft.global_ranking[:6])
print("per-layer attribution entropy:", np.round(soft.entropies(), 3), f"(uniform would be {np.log(8):.3f})")

"""The three-stage compression attack, one stage at a time.

1. log routing on the adversary's data and compute attribution;
2. keep the top experts per layer and measure what is lost;
3. re-align the pruned model with a small labeling budget, comparing
   random sampling against entropy-based active learning.

Run with ``python demos/attack_walkthrough.py [seed]``.
"""

import sys

from moeprune.bench import Experiment, attribute_model, evaluate, prunability_curve, prune_model, realign_arm, train_full_model
from moeprune.config import RunConfig
from moeprune.pruning import compression_stats

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = RunConfig().with_seed(seed)
exp = Experiment.from_config(cfg)
ex, ey = exp.eval_view()

full = train_full_model(exp)
full_m = evaluate(full, ex, ey)
print(f"full model on the target subtasks: accuracy {full_m.accuracy:.3f}")

report = attribute_model(exp, full)
for l, order in enumerate(report.layerwise):
    print(f"layer {l} experts by attribution: {order}")

curve = prunability_curve(full, ex, ey, report, reference_ce=full_m.mean_cross_entropy)
print("\nexperts kept per layer -> accuracy (normalized score)")
for k, m in curve.points:
    print(f"  {k}: {m.accuracy:.3f} ({m.normalized_score:.1f})")
print(f"resistance D = {curve.resistance:.3f}")

plan, pruned = prune_model(exp, full, report)
stats = compression_stats(plan, cfg.model)
pruned_m = evaluate(pruned, ex, ey)
print(
    f"\npruned to {plan.retained}: {stats.experts_removed} experts removed, "
    f"{stats.total_params_removed_fraction:.0%} of all parameters; accuracy {pruned_m.accuracy:.3f}"
)

target = cfg.al.recovery_target * full_m.accuracy
print(f"\nre-alignment, budget {cfg.al.budget} labels in batches of {cfg.al.batch_size}; target accuracy {target:.3f}")
for strategy in ("random", cfg.al.strategy):
    res = realign_arm(exp, pruned, strategy, strategy, full_m.accuracy)
    curve_txt = " ".join(f"{r['eval_metric']:.2f}" for r in res["rounds"][::4])
    print(f"  {strategy:8s} labels to target {res['labels_to_target']}, final accuracy {res['final']['accuracy']:.3f}")
    print(f"           every 4th round: {curve_txt}")

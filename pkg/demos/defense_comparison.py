"""Standard versus entangled training under the same seed.

The entangled model is trained with an extra penalty pulling each token's
gate distribution towards uniform. This script prints both prunability
curves, the attribution entropies, and recovery after pruning to four
experts per layer.

Run with ``python demos/defense_comparison.py [seed]``.
"""

import sys

from moeprune.bench import defense_pipeline
from moeprune.config import RunConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
report = defense_pipeline(RunConfig().with_seed(seed))

standard, entangled = report["curves"]["standard"], report["curves"]["entangled"]
print("kept  standard  entangled")
for a, b in zip(standard["points"], entangled["points"]):
    print(f"{a['k']:4d}  {a['accuracy']:8.3f}  {b['accuracy']:9.3f}")

for name, arm in report["arms"].items():
    print(
        f"\n{name} (lambda_ent={arm['lambda_ent']}): full accuracy {arm['full_accuracy']:.3f}, "
        f"attribution entropy {arm['mean_attribution_entropy']:.3f}"
    )
    print(f"  top-{arm['pruned_k']} pruning drop {arm['accuracy_drop']:+.3f}, resistance D {arm['resistance']:.3f}")
    print(f"  retention after {arm['recovery']['labels_used']} labels: {arm['recovered_retention']:.3f}")

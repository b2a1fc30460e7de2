"""Post-pruning recovery: pool-based active learning and scoped fine-tuning.

The loop per round: score the unlabeled pool, take the ``b`` most uncertain
ids (or a seeded random sample), look up their labels, fine-tune on the whole
labeled set for a fixed number of steps, then evaluate on held-out data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .moe import EXPERT_PARAMS, MoeModel, attach_adapters, loss_and_grads, predict_proba, accuracy
from .numcore import OptimState, Rng, StateError, adam_step

STRATEGIES = ("entropy", "margin", "random")
SCOPES = ("retained_experts", "retained_experts_plus_router", "adapter_only")


def uncertainty(probs, strategy: str = "entropy") -> float:
    """Entropy ``-sum p ln p`` or margin ``1 - (p1 - p2)`` of a class distribution."""
    p = np.asarray(probs, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0):
        raise ValueError(f"probabilities must be nonnegative and sum to 1 (sum={p.sum()!r})")
    if strategy == "entropy":
        nz = p[p > 0]
        return float(max(0.0, -np.sum(nz * np.log(nz))))
    if strategy == "margin":
        top = np.sort(p)[::-1]
        second = top[1] if top.size > 1 else 0.0
        return float(1.0 - (top[0] - second))
    raise ValueError(f"no uncertainty score for strategy {strategy!r}")


def batch_uncertainty(probs: np.ndarray, strategy: str) -> np.ndarray:
    """Row-wise version of :func:`uncertainty` for an (N, C) array."""
    if strategy == "entropy":
        logp = np.log(np.where(probs > 0, probs, 1.0))
        return np.maximum(0.0, -np.sum(probs * logp, axis=1))
    if strategy == "margin":
        top = -np.sort(-probs, axis=1)
        return 1.0 - (top[:, 0] - top[:, 1])
    raise ValueError(f"no uncertainty score for strategy {strategy!r}")


@dataclass
class ALState:
    pool: list[int]
    budget: int
    batch_size: int
    strategy: str = "entropy"
    labeled: list[tuple[int, int]] = field(default_factory=list)
    rounds: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown AL strategy {self.strategy!r}")
        if self.budget < 0 or self.batch_size < 1:
            raise ValueError("budget must be >= 0 and batch_size >= 1")
        self.pool = sorted(int(i) for i in self.pool)

    @property
    def labels_used(self) -> int:
        return len(self.labeled)

    @property
    def remaining(self) -> int:
        return self.budget - self.labels_used

    def history(self) -> list[dict]:
        """Rounds in the external AL-history schema."""
        keys = ("round", "strategy", "selected_ids", "labels_used_cumulative", "eval_metric")
        return [{k: r[k] for k in keys} for r in self.rounds]


def select_batch(state: ALState, scores, rng: Rng) -> list[int]:
    """Pick the next ids and remove them from the pool.

    ``scores`` maps pool id -> uncertainty; ignored for the random strategy.
    """
    if not state.pool:
        raise StateError("unlabeled pool is empty")
    count = min(state.batch_size, state.remaining, len(state.pool))
    if count <= 0:
        return []
    if state.strategy == "random":
        chosen = rng.sample(state.pool, count)
    else:
        missing = [i for i in state.pool if i not in scores]
        if missing:
            raise ValueError(f"no score for pool ids {missing[:5]}")
        chosen = sorted(state.pool, key=lambda i: (-scores[i], i))[:count]
    taken = set(chosen)
    state.pool = [i for i in state.pool if i not in taken]
    return list(chosen)


def oracle_label(labels_by_id, ids) -> list[int]:
    """Ground-truth lookup; ``labels_by_id`` is any id-indexable label store."""
    out = []
    n = len(labels_by_id)
    for i in ids:
        if not isinstance(i, (int, np.integer)) or not 0 <= i < n:
            raise ValueError(f"unknown example id {i!r}")
        out.append(int(labels_by_id[i]))
    return out


@dataclass
class FinetuneScope:
    mode: str = "retained_experts_plus_router"

    def __post_init__(self):
        if self.mode not in SCOPES:
            raise ValueError(f"unknown fine-tuning scope {self.mode!r}")


def scope_masks(model: MoeModel, scope: FinetuneScope) -> dict[str, np.ndarray]:
    """Boolean update masks for every parameter the scope may touch."""
    masks: dict[str, np.ndarray] = {}
    for l in range(model.config.num_layers):
        alive = model.active_mask[l]
        if scope.mode == "adapter_only":
            kinds = ("adapter_scale", "adapter_bias")
        elif scope.mode == "retained_experts":
            kinds = EXPERT_PARAMS
        else:
            kinds = EXPERT_PARAMS + ("router",)
        for kind in kinds:
            name = f"layer{l}.{kind}"
            arr = model.params[name]
            masks[name] = alive.reshape((-1,) + (1,) * (arr.ndim - 1))
    return masks


def fine_tune(
    model: MoeModel,
    x,
    y,
    scope: FinetuneScope,
    steps: int,
    optim: OptimState,
    rng: Rng,
    batch_size: int = 64,
) -> MoeModel:
    """Adam steps restricted to ``scope``; everything outside it stays bit-identical."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("cannot fine-tune on an empty labeled set")
    if scope.mode == "adapter_only" and not model.has_adapters:
        model = attach_adapters(model)
    else:
        model = model.copy()
    masks = scope_masks(model, scope)
    n = x.shape[0]
    for _ in range(steps):
        if n > batch_size:
            idx = np.array(sorted(rng.sample(list(range(n)), batch_size)), dtype=np.int64)
            xb, yb = x[idx], y[idx]
        else:
            xb, yb = x, y
        _, grads, _ = loss_and_grads(model, xb, yb)
        adam_step(model.params, {k: grads[k] for k in masks}, optim, masks)
    return model


def al_loop(
    model: MoeModel,
    x_all,
    y_all,
    state: ALState,
    scope: FinetuneScope,
    steps_per_round: int,
    rng: Rng,
    eval_data: tuple[np.ndarray, np.ndarray],
    optim: OptimState | None = None,
    batch_size: int = 64,
) -> tuple[MoeModel, ALState]:
    """Run rounds until the budget or the pool is exhausted.

    ``x_all``/``y_all`` are indexed by example id; only ids in
    ``state.pool`` are ever scored or labeled. The optimizer state carries
    across rounds.
    """
    x_all = np.asarray(x_all, dtype=np.float64)
    optim = optim if optim is not None else OptimState()
    select_rng = rng.spawn("select")
    tune_rng = rng.spawn("tune")
    ex, ey = eval_data
    while state.remaining > 0 and state.pool:
        scores = {}
        if state.strategy != "random":
            ids = np.array(state.pool, dtype=np.int64)
            u = batch_uncertainty(predict_proba(model, x_all[ids]), state.strategy)
            scores = dict(zip(state.pool, u.tolist()))
        chosen = select_batch(state, scores, select_rng)
        labels = oracle_label(y_all, chosen)
        state.labeled.extend(zip(chosen, labels))
        lab_ids = np.array([i for i, _ in state.labeled], dtype=np.int64)
        lab_y = np.array([c for _, c in state.labeled], dtype=np.int64)
        model = fine_tune(model, x_all[lab_ids], lab_y, scope, steps_per_round, optim, tune_rng, batch_size)
        state.rounds.append(
            {
                "round": len(state.rounds) + 1,
                "strategy": state.strategy,
                "selected_ids": [int(i) for i in chosen],
                "scores": [float(scores[i]) for i in chosen] if scores else [],
                "labels_used_cumulative": state.labels_used,
                "eval_metric": accuracy(model, ex, ey),
            }
        )
    return model, state


def labels_to_target(state: ALState, target: float, start_metric: float) -> int | None:
    """Cumulative labels at the first round whose eval metric reaches ``target``."""
    if start_metric >= target:
        return 0
    for r in state.rounds:
        if r["eval_metric"] >= target:
            return r["labels_used_cumulative"]
    return None


def expected_rounds(budget: int, pool_size: int, batch_size: int) -> int:
    return math.ceil(min(budget, pool_size) / batch_size)

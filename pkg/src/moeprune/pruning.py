"""Pruning plans built from attribution reports, applied through the active mask."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attribution import AttributionReport
from .moe import EXPERT_PARAMS, ModelConfig, MoeModel
from .numcore import Rng

log = logging.getLogger(__name__)

PLAN_FORMAT_VERSION = 1
STRATEGIES = ("topk_layerwise", "topk_global", "threshold", "random")


class PlanError(ValueError):
    """A pruning rule would leave a layer without experts."""


@dataclass
class PruningPlan:
    strategy: str
    params: dict
    retained: list[list[int]]
    source_report: str = ""
    strict: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format_version": PLAN_FORMAT_VERSION,
            "strategy": self.strategy,
            "params": self.params,
            "retained": self.retained,
            "warnings": self.warnings,
            "source_report": self.source_report,
            "strict": self.strict,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PruningPlan":
        return cls(
            strategy=doc["strategy"],
            params=dict(doc["params"]),
            retained=[sorted(int(i) for i in r) for r in doc["retained"]],
            source_report=doc.get("source_report", ""),
            strict=bool(doc.get("strict", False)),
            warnings=list(doc.get("warnings", [])),
        )


@dataclass
class CompressionStats:
    experts_removed: int
    expert_params_removed_fraction: float
    total_params_removed_fraction: float


def _active(report: AttributionReport) -> np.ndarray:
    mask = report.meta.get("active_mask")
    if mask is None:
        return np.ones((len(report.scores), len(report.scores[0])), dtype=bool)
    return np.array(mask, dtype=bool)


def _ranked_active(report: AttributionReport, active: np.ndarray) -> list[list[int]]:
    return [[i for i in order if active[l, i]] for l, order in enumerate(report.layerwise)]


def make_plan(
    report: AttributionReport,
    strategy: str,
    k: int | None = None,
    tau: float | None = None,
    strict: bool = False,
) -> PruningPlan:
    """Turn a report into per-layer retained sets.

    ``topk_global`` takes the best ``k`` (layer, expert) pairs overall and
    always keeps each layer's best expert, even past that budget.
    ``threshold`` with an empty layer raises in strict mode and otherwise
    keeps that layer's argmax and records a warning.
    """
    M = len(report.scores[0])
    active = _active(report)
    ranked = _ranked_active(report, active)
    warnings: list[str] = []

    if strategy in ("topk_layerwise", "topk_global"):
        if k is None or not 1 <= k <= M:
            raise ValueError(f"top-k pruning needs 1 <= k <= {M}, got {k}")
        params = {"k": k}
        if strategy == "topk_layerwise":
            retained = [sorted(r[:k]) for r in ranked]
        else:
            chosen = [(l, i) for l, i in report.global_ranking if active[l, i]][:k]
            retained_sets = [set() for _ in ranked]
            for l, i in chosen:
                retained_sets[l].add(i)
            for l, r in enumerate(ranked):
                if r[0] not in retained_sets[l]:
                    retained_sets[l].add(r[0])
                    warnings.append(f"layer {l}: kept top-1 expert {r[0]} beyond the global budget")
            retained = [sorted(s) for s in retained_sets]
    elif strategy == "threshold":
        if tau is None or not 0.0 <= tau <= 1.0:
            raise ValueError(f"threshold pruning needs 0 <= tau <= 1, got {tau}")
        params = {"tau": tau}
        retained = []
        for l, a in enumerate(report.scores):
            keep = [i for i in range(M) if active[l, i] and a[i] >= tau]
            if not keep:
                if strict:
                    raise PlanError(f"threshold tau={tau} removes every expert in layer {l}")
                keep = [ranked[l][0]]
                msg = f"layer {l}: no expert reaches tau={tau}; kept argmax expert {keep[0]}"
                warnings.append(msg)
                log.warning(msg)
            retained.append(keep)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES[:3]}")
    return PruningPlan(strategy, params, retained, report.report_id, strict, warnings)


def random_plan(active_mask: np.ndarray, k: int, rng: Rng) -> PruningPlan:
    """Seeded baseline keeping ``k`` uniformly chosen active experts per layer."""
    retained = []
    for row in np.asarray(active_mask, dtype=bool):
        pool = np.flatnonzero(row).tolist()
        retained.append(sorted(rng.sample(pool, k)))
    return PruningPlan("random", {"k": k, "seed": rng.seed}, retained)


def retain_all_plan(model: MoeModel) -> PruningPlan:
    return PruningPlan(
        "topk_layerwise",
        {"k": model.config.experts_per_layer},
        [np.flatnonzero(row).tolist() for row in model.active_mask],
    )


def apply_plan(model: MoeModel, plan: PruningPlan) -> MoeModel:
    """New model whose active mask is the plan's retained sets; pruned weights zeroed."""
    cfg = model.config
    if len(plan.retained) != cfg.num_layers:
        raise ValueError(f"plan covers {len(plan.retained)} layers, model has {cfg.num_layers}")
    out = model.copy()
    for l, keep in enumerate(plan.retained):
        if not keep:
            raise ValueError(f"plan leaves layer {l} empty")
        bad = [i for i in keep if not 0 <= i < cfg.experts_per_layer or not model.active_mask[l, i]]
        if bad:
            raise ValueError(f"plan retains inactive or unknown experts {bad} in layer {l}")
        mask = np.zeros(cfg.experts_per_layer, dtype=bool)
        mask[list(keep)] = True
        out.active_mask[l] = mask
        dead = ~mask
        for kind in EXPERT_PARAMS + ("router", "adapter_scale", "adapter_bias"):
            name = f"layer{l}.{kind}"
            if name in out.params:
                out.params[name][dead] = 0.0
    return out


def expert_param_count(config: ModelConfig) -> int:
    d, h = config.model_dim, config.expert_hidden_dim
    return d * h + h + h * d + d


def total_param_count(config: ModelConfig) -> int:
    d, M, L = config.model_dim, config.experts_per_layer, config.num_layers
    return config.input_dim * d + L * M * (d + expert_param_count(config)) + d * config.num_classes + config.num_classes


def compression_stats(plan: PruningPlan, config: ModelConfig) -> CompressionStats:
    M, L = config.experts_per_layer, config.num_layers
    removed = sum(M - len(r) for r in plan.retained)
    per_expert = expert_param_count(config)
    return CompressionStats(
        experts_removed=removed,
        expert_params_removed_fraction=removed / (L * M),
        total_params_removed_fraction=removed * (per_expert + config.model_dim) / total_param_count(config),
    )

"""Evaluation metrics, prunability curves, and the attack / defense experiments."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone

import numpy as np

from .attribution import attribute, collect_trace
from .config import RunConfig
from .data import Dataset, gen_dataset
from .moe import MoeModel, build_model, forward, train
from .numcore import NumericError, OptimState, Rng, StateError, derive_seed, log_softmax
from .pruning import apply_plan, compression_stats, make_plan
from .realign import ALState, FinetuneScope, al_loop, labels_to_target

log = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
TIMESTAMP_FIELD = "generated_at"
SCORE_CONVENTION = (
    "normalized_score = 100 * reference_mean_ce / mean_ce; 100 = full model, "
    "higher is better"
)


class StageError(RuntimeError):
    """Failure inside a pipeline stage; the message names the stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class EvalMetrics:
    accuracy: float
    mean_cross_entropy: float
    normalized_score: float | None = None


@dataclass
class PrunabilityCurve:
    points: list[tuple[int, EvalMetrics]]
    strategy: str
    report_id: str
    resistance: float = 0.0

    def accuracies(self) -> list[float]:
        return [m.accuracy for _, m in self.points]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "report_id": self.report_id,
            "resistance": self.resistance,
            "points": [{"k": k, **asdict(m)} for k, m in self.points],
        }


def evaluate(model: MoeModel, x, y, reference_ce: float | None = None, normalize: bool = False) -> EvalMetrics:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty split")
    if normalize and reference_ce is None:
        raise StateError("normalized score requested without a full-model reference")
    logits = forward(model, x).logits
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits during evaluation")
    logp = log_softmax(logits, axis=1)
    ce = float(-np.mean(logp[np.arange(len(y)), y]))
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    score = None
    if reference_ce is not None:
        score = 100.0 * reference_ce / ce if ce > 0 else float("inf")
    return EvalMetrics(acc, ce, score)


def retention(pruned: EvalMetrics, full: EvalMetrics) -> float:
    if full.accuracy <= 0:
        raise ValueError("full-model accuracy must be positive")
    return pruned.accuracy / full.accuracy


def resistance_score(curve: PrunabilityCurve | list[float]) -> float:
    """Mean relative accuracy loss over k = M-1..1, relative to the k = M point.

    ``curve`` is a PrunabilityCurve or a list of accuracies ordered from
    k = M down to k = 1.
    """
    acc = curve.accuracies() if isinstance(curve, PrunabilityCurve) else list(curve)
    if len(acc) < 2:
        raise ValueError("a curve needs at least two points")
    top = acc[0]
    if top <= 0:
        raise ValueError("P(M) must be positive")
    return float(np.mean([max(0.0, top - p) / top for p in acc[1:]]))


def prunability_curve(model: MoeModel, x, y, report, strategy: str = "topk_layerwise", reference_ce=None) -> PrunabilityCurve:
    """Prune to k = M..1 experts per layer (fresh copy each time) and evaluate; no fine-tuning."""
    M = model.config.experts_per_layer
    points = []
    for k in range(M, 0, -1):
        pruned = apply_plan(model, make_plan(report, strategy, k=k))
        points.append((k, evaluate(pruned, x, y, reference_ce)))
    curve = PrunabilityCurve(points, strategy, report.report_id)
    curve.resistance = resistance_score(curve)
    return curve


def curve_csv(curve: PrunabilityCurve, stamp: dict | None = None) -> str:
    """CSV with one row per k; ``stamp`` key/values are appended as constant columns."""
    stamp = stamp or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "accuracy", "mean_ce", "normalized_score", *stamp])
    for k, m in curve.points:
        score = "" if m.normalized_score is None else repr(m.normalized_score)
        w.writerow([k, repr(m.accuracy), repr(m.mean_cross_entropy), score, *stamp.values()])
    return buf.getvalue()


# -- experiments ---------------------------------------------------------------


@dataclass
class Experiment:
    """Shared state of one seeded run: data, views, and stream derivation."""

    cfg: RunConfig
    data: Dataset

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Experiment":
        return cls(cfg=cfg, data=gen_dataset(cfg.dataset))

    def rng(self, tag: str) -> Rng:
        return Rng(derive_seed(self.cfg.seed, tag))

    @property
    def targets(self):
        return self.cfg.pipeline.target_subtasks

    def attribution_view(self):
        return self.data.view("pool", self.targets)

    def eval_view(self):
        return self.data.view("test", self.targets)


def _stage(name):
    def deco(fn):
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc

        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper

    return deco


@_stage("train")
def train_full_model(exp: Experiment, lambda_ent: float | None = None) -> MoeModel:
    cfg = exp.cfg
    mcfg = cfg.model if lambda_ent is None else replace(cfg.model, lambda_ent=lambda_ent)
    model = build_model(mcfg, exp.rng("init"))
    x, y = exp.data.view("train")
    optim = OptimState(learning_rate=cfg.train.learning_rate)
    model, history = train(model, x, y, cfg.train.epochs, cfg.train.batch_size, optim, exp.rng("train"))
    if history.records and not np.isfinite(history.records[-1].task_loss):
        raise NumericError("training loss diverged")
    return model


@_stage("attribution")
def attribute_model(exp: Experiment, model: MoeModel):
    x, _ = exp.attribution_view()
    ids = exp.data.ids("pool", exp.targets)
    trace = collect_trace(model, x, ids, dataset_id=f"seed{exp.cfg.seed}/pool/{exp.targets}")
    return attribute(trace, exp.cfg.prune.attribution_mode)


@_stage("prune")
def prune_model(exp: Experiment, model: MoeModel, report, k: int | None = None):
    p = exp.cfg.prune
    if k is not None:
        plan = make_plan(report, "topk_layerwise", k=k)
    elif p.strategy == "threshold":
        plan = make_plan(report, "threshold", tau=p.tau, strict=p.strict)
    else:
        plan = make_plan(report, p.strategy, k=p.k, strict=p.strict)
    return plan, apply_plan(model, plan)


@_stage("realign")
def realign_arm(exp: Experiment, pruned: MoeModel, strategy: str, tag: str, full_acc: float) -> dict:
    a = exp.cfg.al
    pool = exp.data.ids("pool", exp.targets).tolist()
    state = ALState(pool=pool, budget=a.budget, batch_size=a.batch_size, strategy=strategy)
    ex, ey = exp.eval_view()
    start = evaluate(pruned, ex, ey).accuracy
    model, state = al_loop(
        pruned,
        exp.data.x,
        exp.data.y,
        state,
        FinetuneScope(a.scope),
        a.steps_per_round,
        exp.rng(f"al/{tag}"),
        (ex, ey),
        OptimState(learning_rate=a.learning_rate),
        a.finetune_batch_size,
    )
    target = a.recovery_target * full_acc
    final = evaluate(model, ex, ey)
    return {
        "strategy": strategy,
        "labels_used": state.labels_used,
        "labels_to_target": labels_to_target(state, target, start),
        "recovery_target_accuracy": target,
        "final": asdict(final),
        "final_retention": final.accuracy / full_acc,
        "rounds": state.history(),
        "_model": model,
    }


def _strip_private(obj):
    if isinstance(obj, dict):
        return {k: _strip_private(v) for k, v in obj.items() if not k.startswith("_")}
    if isinstance(obj, list):
        return [_strip_private(v) for v in obj]
    return obj


def _header(cfg: RunConfig, kind: str) -> dict:
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "kind": kind,
        "config": cfg.experiment_dict(),
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.seed,
        "score_convention": SCORE_CONVENTION,
        "steps_per_round": cfg.al.steps_per_round,
        "optimizer_reset_between_rounds": False,
        "labels_used_counting": "cumulative",
        TIMESTAMP_FIELD: datetime.now(timezone.utc).isoformat(),
    }


def attack_pipeline(cfg: RunConfig, model: MoeModel | None = None) -> dict:
    """Train (or take) the full model, attribute, prune, and run the re-alignment arms."""
    exp = Experiment.from_config(cfg)
    full = model if model is not None else train_full_model(exp)
    ex, ey = exp.eval_view()
    full_metrics = evaluate(full, ex, ey)
    ref = full_metrics.mean_cross_entropy
    full_metrics = evaluate(full, ex, ey, reference_ce=ref)
    all_x, all_y = exp.data.view("test")
    report = attribute_model(exp, full)
    plan, pruned = prune_model(exp, full, report)
    pruned_metrics = evaluate(pruned, ex, ey, reference_ce=ref)
    curve = prunability_curve(full, ex, ey, report, cfg.pipeline.curve_strategy, ref)

    arms = []
    for arm in cfg.pipeline.arms:
        if arm == "none":
            arms.append(
                {
                    "arm": "none",
                    "labels_used": 0,
                    "labels_to_target": 0 if pruned_metrics.accuracy >= cfg.al.recovery_target * full_metrics.accuracy else None,
                    "final": asdict(pruned_metrics),
                    "final_retention": retention(pruned_metrics, full_metrics),
                }
            )
        else:
            strategy = "random" if arm == "random" else cfg.al.strategy
            res = realign_arm(exp, pruned, strategy, arm, full_metrics.accuracy)
            res["final"] = asdict(evaluate(res["_model"], ex, ey, reference_ce=ref))
            arms.append({"arm": arm, **res})

    by_arm = {a["arm"]: a for a in arms}
    savings = None
    if "random" in by_arm and "active" in by_arm:
        r, a = by_arm["random"]["labels_to_target"], by_arm["active"]["labels_to_target"]
        if r and a is not None:
            savings = a / r
    out = {
        **_header(cfg, "attack"),
        "full": {
            "target_metrics": asdict(full_metrics),
            "all_subtasks_test_accuracy": evaluate(full, all_x, all_y).accuracy,
        },
        "attribution": report.to_dict(),
        "plan": plan.to_dict(),
        "compression": asdict(compression_stats(plan, cfg.model)),
        "pruned": {"metrics": asdict(pruned_metrics), "retention": retention(pruned_metrics, full_metrics)},
        "arms": arms,
        "active_to_random_label_ratio": savings,
        "curve": curve.to_dict(),
    }
    out = _strip_private(out)
    out["_curves"] = {"attack": curve}
    return out


def defense_pipeline(cfg: RunConfig) -> dict:
    """Standard vs. entangled training at the same seed: curves, resistance, equal-budget recovery."""
    exp = Experiment.from_config(cfg)
    ex, ey = exp.eval_view()
    arms = {}
    curves = {}
    for name, lam in (("standard", 0.0), ("entangled", cfg.pipeline.defense_lambda_ent)):
        model = train_full_model(exp, lambda_ent=lam)
        full = evaluate(model, ex, ey)
        ref = full.mean_cross_entropy
        report = attribute_model(exp, model)
        curve = prunability_curve(model, ex, ey, report, cfg.pipeline.curve_strategy, ref)
        plan, pruned = prune_model(exp, model, report, k=cfg.pipeline.defense_prune_k)
        pruned_m = evaluate(pruned, ex, ey, reference_ce=ref)
        rec = realign_arm(exp, pruned, cfg.al.strategy, f"defense/{name}", full.accuracy)
        ent = report.entropies()
        arms[name] = {
            "lambda_ent": lam,
            "full_accuracy": full.accuracy,
            "attribution": report.to_dict(),
            "attribution_entropy_per_layer": ent,
            "mean_attribution_entropy": float(np.mean(ent)),
            "resistance": curve.resistance,
            "pruned_k": cfg.pipeline.defense_prune_k,
            "pruned_accuracy": pruned_m.accuracy,
            "accuracy_drop": full.accuracy - pruned_m.accuracy,
            "recovery": _strip_private(rec),
            "recovered_retention": rec["final_retention"],
        }
        curves[name] = curve
    out = {
        **_header(cfg, "defense"),
        "arms": arms,
        "curves": {name: c.to_dict() for name, c in curves.items()},
    }
    out["_curves"] = curves
    return out


def report_without_private(report: dict) -> dict:
    return {k: v for k, v in report.items() if not k.startswith("_")}

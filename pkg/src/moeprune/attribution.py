"""Routing traces and expert attribution.

A trace holds, for every (example, layer), the full gate distribution over
the layer's experts and the set of experts actually executed. Two
attribution scores are computed from it, per layer:

* hard: share of top-k selections that went to each expert,
  ``A_i = count_i / sum_j count_j``;
* soft: share of total gate probability mass,
  ``A_i = sum_t g_ti / sum_j sum_t g_tj``.

Rankings order experts by descending score; ties go to the lower layer,
then the lower expert index.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import atomic_write
from .moe import MoeModel, checkpoint_json, forward

TRACE_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1
GLOBAL_RANKING_CAVEAT = (
    "global ranking compares per-layer-normalized scores directly across layers; "
    "no cross-layer calibration is applied"
)


@dataclass
class RoutingTrace:
    example_ids: np.ndarray  # (N,)
    probs: list[np.ndarray]  # per layer, (N, M)
    selected: list[np.ndarray]  # per layer, (N, k')
    meta: dict = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.probs)

    @property
    def num_rows(self) -> int:
        return len(self.example_ids) * self.num_layers

    def rows(self):
        for i, ex in enumerate(self.example_ids):
            for l in range(self.num_layers):
                yield {
                    "ex": int(ex),
                    "layer": l,
                    "probs": self.probs[l][i].tolist(),
                    "sel": self.selected[l][i].tolist(),
                }


@dataclass
class AttributionReport:
    mode: str
    scores: list[np.ndarray]  # per-layer A, each sums to 1
    layerwise: list[list[int]]
    global_ranking: list[tuple[int, int]]
    num_tokens: int
    meta: dict = field(default_factory=dict)

    @property
    def report_id(self) -> str:
        payload = json.dumps(
            {"mode": self.mode, "A": [a.tolist() for a in self.scores], "m": self.num_tokens},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def entropies(self) -> list[float]:
        out = []
        for a in self.scores:
            nz = a[a > 0]
            out.append(float(-np.sum(nz * np.log(nz))))
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "report_id": self.report_id,
            "mode": self.mode,
            "A": [a.tolist() for a in self.scores],
            "layerwise_ranking": self.layerwise,
            "global_ranking": [list(p) for p in self.global_ranking],
            "m": self.num_tokens,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AttributionReport":
        return cls(
            mode=doc["mode"],
            scores=[np.array(a, dtype=np.float64) for a in doc["A"]],
            layerwise=[list(r) for r in doc["layerwise_ranking"]],
            global_ranking=[tuple(p) for p in doc["global_ranking"]],
            num_tokens=doc["m"],
            meta=doc.get("meta", {}),
        )


def model_hash(model: MoeModel) -> str:
    return hashlib.sha256(checkpoint_json(model).encode()).hexdigest()[:16]


def collect_trace(model: MoeModel, x, example_ids=None, dataset_id: str = "") -> RoutingTrace:
    """Run the model on ``x`` and record its routing without touching disk."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, model.config.input_dim)
    ids = np.arange(x.shape[0]) if example_ids is None else np.asarray(example_ids, dtype=np.int64)
    cfg = model.config
    meta = {
        "format_version": TRACE_FORMAT_VERSION,
        "model_hash": model_hash(model),
        "dataset_id": dataset_id,
        "m": int(x.shape[0]),
        "k": cfg.top_k,
        "num_layers": cfg.num_layers,
        "experts_per_layer": cfg.experts_per_layer,
        "active_mask": model.active_mask.astype(int).tolist(),
    }
    if x.shape[0] == 0:
        M = cfg.experts_per_layer
        empty_p = [np.zeros((0, M)) for _ in range(cfg.num_layers)]
        empty_s = [np.zeros((0, min(cfg.top_k, model.active_count(l))), dtype=np.int64) for l in range(cfg.num_layers)]
        return RoutingTrace(ids, empty_p, empty_s, meta)
    out = forward(model, x, record_trace=True)
    return RoutingTrace(
        ids,
        [r.full_probs for r in out.routing],
        [r.selected.astype(np.int64) for r in out.routing],
        meta,
    )


def trace_lines(trace: RoutingTrace) -> str:
    lines = [json.dumps({"meta": trace.meta}, sort_keys=True)]
    lines.extend(json.dumps(row, sort_keys=True) for row in trace.rows())
    return "\n".join(lines) + "\n"


def log_trace(model: MoeModel, x, out_path, example_ids=None, dataset_id: str = "") -> RoutingTrace:
    """Collect a trace and write it as JSONL (header line, then one row per example and layer)."""
    trace = collect_trace(model, x, example_ids, dataset_id)
    atomic_write(out_path, trace_lines(trace))
    return trace


def read_trace(path) -> RoutingTrace:
    path = Path(path)
    with path.open() as fh:
        header = json.loads(fh.readline())
        if "meta" not in header:
            raise ValueError(f"{path}: first line is not a trace header")
        meta = header["meta"]
        rows = [json.loads(line) for line in fh if line.strip()]
    L = meta["num_layers"]
    M = meta["experts_per_layer"]
    ids = [r["ex"] for r in rows if r["layer"] == 0]
    probs = [np.array([r["probs"] for r in rows if r["layer"] == l], dtype=np.float64).reshape(-1, M) for l in range(L)]
    sel = []
    for l in range(L):
        s = [r["sel"] for r in rows if r["layer"] == l]
        sel.append(np.array(s, dtype=np.int64) if s else np.zeros((0, 0), dtype=np.int64))
    return RoutingTrace(np.array(ids, dtype=np.int64), probs, sel, meta)


def _layerwise_ranking(scores: list[np.ndarray]) -> list[list[int]]:
    return [np.argsort(-a, kind="stable").tolist() for a in scores]


def _global_ranking(scores: list[np.ndarray]) -> list[tuple[int, int]]:
    pairs = [(l, i) for l, a in enumerate(scores) for i in range(len(a))]
    return sorted(pairs, key=lambda p: (-scores[p[0]][p[1]], p[0], p[1]))


def _report(mode: str, scores: list[np.ndarray], trace: RoutingTrace) -> AttributionReport:
    meta = {
        "model_hash": trace.meta.get("model_hash"),
        "dataset_id": trace.meta.get("dataset_id"),
        "active_mask": trace.meta.get("active_mask"),
        "global_ranking_caveat": GLOBAL_RANKING_CAVEAT,
    }
    return AttributionReport(
        mode=mode,
        scores=scores,
        layerwise=_layerwise_ranking(scores),
        global_ranking=_global_ranking(scores),
        num_tokens=len(trace.example_ids),
        meta=meta,
    )


def _require_rows(trace: RoutingTrace) -> None:
    if len(trace.example_ids) == 0:
        raise ValueError("empty trace")


def attribution_hard(trace: RoutingTrace) -> AttributionReport:
    _require_rows(trace)
    scores = []
    for probs, sel in zip(trace.probs, trace.selected):
        counts = np.bincount(sel.reshape(-1), minlength=probs.shape[1]).astype(np.float64)
        # normalized by actual selections so masked layers (k' < k) still sum to 1
        scores.append(counts / counts.sum())
    return _report("hard", scores, trace)


def attribution_soft(trace: RoutingTrace) -> AttributionReport:
    _require_rows(trace)
    scores = []
    for probs in trace.probs:
        mass = probs.sum(axis=0)
        scores.append(mass / mass.sum())
    return _report("soft", scores, trace)


def attribute(trace: RoutingTrace, mode: str = "soft") -> AttributionReport:
    if mode == "hard":
        return attribution_hard(trace)
    if mode == "soft":
        return attribution_soft(trace)
    raise ValueError(f"unknown attribution mode {mode!r}")


def rank_experts(report: AttributionReport, scope: str = "layerwise"):
    if scope == "layerwise":
        return _layerwise_ranking(report.scores)
    if scope == "global":
        return _global_ranking(report.scores)
    raise ValueError(f"unknown ranking scope {scope!r}")

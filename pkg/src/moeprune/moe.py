"""Toy Mixture-of-Experts classifier with top-k routing and analytic gradients.

Architecture (row-vector convention, ``N`` examples)::

    h0 = x @ input_proj
    for each layer:  h <- h + sum_{e in topk(h)} gate_e * expert_e(h)
    logits = h @ head.W + head.b

Each expert is a two-layer ReLU perceptron. Routers have no bias. Gates
are a softmax over the k selected logits (``gate_norm="topk"``, the
default). The experimental ``"full"`` option instead uses the selected
experts' probabilities under the softmax over all active experts; gates
then no longer sum to 1, and pruning any expert, even a never-selected
one, rescales the survivors' gates.

The training objective is

    CE + lambda_lb * mean_layers(load_balance) + lambda_ent * mean_layers(entanglement)

where both auxiliary terms are computed on the full (all-active-expert)
gate distribution. The top-k choice itself carries no gradient.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .numcore import (
    DimensionError,
    OptimState,
    Rng,
    StateError,
    adam_step,
    batch_cross_entropy,
    log_softmax,
)

CHECKPOINT_FORMAT_VERSION = 1
EXPERT_PARAMS = ("W1", "b1", "W2", "b2")
GATE_NORMS = ("topk", "full")


@dataclass
class ModelConfig:
    input_dim: int = 16
    model_dim: int = 16
    num_layers: int = 2
    experts_per_layer: int = 8
    top_k: int = 2
    expert_hidden_dim: int = 32
    num_classes: int = 4
    lambda_lb: float = 0.01
    lambda_ent: float = 0.0
    gate_norm: str = "topk"
    seed: int = 0

    def validate(self) -> None:
        for name in ("input_dim", "model_dim", "expert_hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not 1 <= self.top_k <= self.experts_per_layer:
            raise ValueError(
                f"top_k must satisfy 1 <= k <= experts_per_layer, got k={self.top_k}, "
                f"M={self.experts_per_layer}"
            )
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.lambda_lb < 0 or self.lambda_ent < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.gate_norm not in GATE_NORMS:
            raise ValueError(f"gate_norm must be one of {GATE_NORMS}, got {self.gate_norm!r}")


@dataclass
class MoeModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    active_mask: np.ndarray  # (L, M) bool

    def copy(self) -> "MoeModel":
        return copy.deepcopy(self)

    @property
    def has_adapters(self) -> bool:
        return "layer0.adapter_scale" in self.params

    def active_count(self, layer: int) -> int:
        return int(self.active_mask[layer].sum())


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    lb_loss: float
    ent_loss: float
    eval_accuracy: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)


@dataclass
class LayerRouting:
    full_probs: np.ndarray  # (N, M)
    selected: np.ndarray  # (N, k')
    gates: np.ndarray  # (N, k')


@dataclass
class ForwardOutput:
    logits: np.ndarray
    routing: list[LayerRouting] | None
    lb_loss: float
    ent_loss: float


def build_model(config: ModelConfig, rng: Rng) -> MoeModel:
    """Scaled-uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases."""
    config.validate()
    d, h, M = config.model_dim, config.expert_hidden_dim, config.experts_per_layer

    def fan_in(shape, fan):
        bound = 1.0 / np.sqrt(fan)
        return rng.uniform(-bound, bound, shape)

    params: dict[str, np.ndarray] = {"input_proj": fan_in((config.input_dim, d), config.input_dim)}
    for l in range(config.num_layers):
        params[f"layer{l}.router"] = fan_in((M, d), d)
        params[f"layer{l}.W1"] = fan_in((M, d, h), d)
        params[f"layer{l}.b1"] = np.zeros((M, h))
        params[f"layer{l}.W2"] = fan_in((M, h, d), h)
        params[f"layer{l}.b2"] = np.zeros((M, d))
    params["head.W"] = fan_in((d, config.num_classes), d)
    params["head.b"] = np.zeros(config.num_classes)
    mask = np.ones((config.num_layers, M), dtype=bool)
    return MoeModel(config=config, params=params, active_mask=mask)


def attach_adapters(model: MoeModel) -> MoeModel:
    """Copy of ``model`` with identity adapters (scale 1, bias 0) on every expert output."""
    out = model.copy()
    M, d = out.config.experts_per_layer, out.config.model_dim
    for l in range(out.config.num_layers):
        out.params[f"layer{l}.adapter_scale"] = np.ones((M, d))
        out.params[f"layer{l}.adapter_bias"] = np.zeros((M, d))
    return out


def _topk_rows(masked_logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated logits: equal values keep ascending index order
    order = np.argsort(-masked_logits, axis=-1, kind="stable")
    return order[..., :k]


def route(router_logits, k: int, mask, gate_norm: str = "topk") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k routing for one token.

    Returns ``(selected, gates, full_probs)``. Inactive experts are never
    selected and get probability exactly 0 in ``full_probs``. With
    ``gate_norm="topk"`` the gates are a softmax over the selected logits;
    with ``"full"`` they are the selected entries of ``full_probs``.
    """
    z = np.asarray(router_logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if z.shape != mask.shape:
        raise DimensionError(f"logits {z.shape} and mask {mask.shape} differ")
    if not mask.any():
        raise StateError("route called with no active experts")
    kk = min(k, int(mask.sum()))
    masked = np.where(mask, z, -np.inf)
    selected = _topk_rows(masked, kk)
    full = np.where(mask, np.exp(log_softmax(masked)), 0.0)
    if gate_norm == "topk":
        gates = np.exp(log_softmax(z[selected]))
    elif gate_norm == "full":
        gates = full[selected]
    else:
        raise ValueError(f"unknown gate_norm {gate_norm!r}")
    return selected, gates, full


def load_balance_loss(full_probs: np.ndarray, mask=None) -> float:
    """M_active * sum_i f_i * mean_prob_i, f_i = share of tokens whose top-1 is i."""
    p = np.asarray(full_probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    mask = np.ones(p.shape[1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    m_active = int(mask.sum())
    top1 = _topk_rows(np.where(mask, p, -np.inf), 1)[:, 0]
    f = np.bincount(top1, minlength=p.shape[1]) / p.shape[0]
    return float(m_active * np.sum(f * p.mean(axis=0)))


def entanglement_loss(full_probs: np.ndarray, num_active: int) -> float:
    """Mean over tokens of KL(g_t || Uniform(num_active))."""
    p = np.asarray(full_probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    kl = plogp.sum(axis=1) + np.log(num_active)
    return float(np.maximum(kl, 0.0).mean())


def _check_width(model: MoeModel, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise DimensionError(
            f"input has shape {x.shape}, expected (N, {model.config.input_dim})"
        )


def _run(model: MoeModel, params: dict[str, np.ndarray], x: np.ndarray, keep_cache: bool):
    cfg = model.config
    adapters = "layer0.adapter_scale" in params
    h = x @ params["input_proj"]
    caches = []
    lb_total = 0.0
    ent_total = 0.0
    for l in range(cfg.num_layers):
        mask = model.active_mask[l]
        n_active = int(mask.sum())
        if n_active == 0:
            raise StateError(f"layer {l} has no active experts")
        kk = min(cfg.top_k, n_active)
        R = params[f"layer{l}.router"]
        z = h @ R.T
        masked = np.where(mask, z, -np.inf)
        logp = np.where(mask, log_softmax(masked, axis=1), 0.0)
        p = np.where(mask, np.exp(logp), 0.0)
        sel = _topk_rows(masked, kk)
        if cfg.gate_norm == "topk":
            zs = np.take_along_axis(z, sel, axis=1)
            gates = np.exp(log_softmax(zs, axis=1))
        else:
            gates = np.take_along_axis(p, sel, axis=1)

        out = h.copy()
        expert_cache = []
        for e in range(cfg.experts_per_layer):
            rows, slot = np.nonzero(sel == e)
            if rows.size == 0:
                expert_cache.append(None)
                continue
            g = gates[rows, slot]
            hin = h[rows]
            u = hin @ params[f"layer{l}.W1"][e] + params[f"layer{l}.b1"][e]
            a = np.maximum(u, 0.0)
            y = a @ params[f"layer{l}.W2"][e] + params[f"layer{l}.b2"][e]
            if adapters:
                yo = y * params[f"layer{l}.adapter_scale"][e] + params[f"layer{l}.adapter_bias"][e]
            else:
                yo = y
            out[rows] += g[:, None] * yo
            if keep_cache:
                expert_cache.append((rows, slot, g, u, a, y, yo))
        top1 = sel[:, 0]
        f = np.bincount(top1, minlength=cfg.experts_per_layer) / h.shape[0]
        lb_total += n_active * float(np.sum(f * p.mean(axis=0)))
        kl = np.sum(p * logp, axis=1) + np.log(n_active)
        ent_total += float(np.maximum(kl, 0.0).mean())
        caches.append(
            dict(h=h, p=p, logp=logp, sel=sel, gates=gates, f=f, n_active=n_active, experts=expert_cache)
        )
        h = out
    logits = h @ params["head.W"] + params["head.b"]
    return logits, h, caches, lb_total / cfg.num_layers, ent_total / cfg.num_layers


def forward(model: MoeModel, x, record_trace: bool = False) -> ForwardOutput:
    x = np.asarray(x, dtype=np.float64)
    _check_width(model, x)
    logits, _, caches, lb, ent = _run(model, model.params, x, keep_cache=False)
    routing = None
    if record_trace:
        routing = [LayerRouting(c["p"], c["sel"], c["gates"]) for c in caches]
    return ForwardOutput(logits=logits, routing=routing, lb_loss=lb, ent_loss=ent)


def loss_and_grads(
    model: MoeModel,
    x: np.ndarray,
    y: np.ndarray,
    params: dict[str, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray], dict[str, float]]:
    """Composite loss, gradients for every parameter, and the loss parts."""
    params = model.params if params is None else params
    cfg = model.config
    x = np.asarray(x, dtype=np.float64)
    _check_width(model, x)
    logits, h_last, caches, lb, ent = _run(model, params, x, keep_cache=True)
    ce, dlogits = batch_cross_entropy(logits, y)
    loss = ce + cfg.lambda_lb * lb + cfg.lambda_ent * ent
    n = x.shape[0]
    L = cfg.num_layers
    adapters = "layer0.adapter_scale" in params

    grads = {name: np.zeros_like(v) for name, v in params.items()}
    grads["head.W"] = h_last.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dh = dlogits @ params["head.W"].T

    for l in reversed(range(L)):
        c = caches[l]
        h = c["h"]
        dout = dh
        dh = dout.copy()
        dgate = np.zeros_like(c["gates"])
        W1, W2 = params[f"layer{l}.W1"], params[f"layer{l}.W2"]
        for e, ec in enumerate(c["experts"]):
            if ec is None:
                continue
            rows, slot, g, u, a, yv, yo = ec
            d_rows = dout[rows]
            dgate[rows, slot] = np.sum(d_rows * yo, axis=1)
            dyo = d_rows * g[:, None]
            if adapters:
                grads[f"layer{l}.adapter_scale"][e] = np.sum(dyo * yv, axis=0)
                grads[f"layer{l}.adapter_bias"][e] = dyo.sum(axis=0)
                dy = dyo * params[f"layer{l}.adapter_scale"][e]
            else:
                dy = dyo
            grads[f"layer{l}.W2"][e] = a.T @ dy
            grads[f"layer{l}.b2"][e] = dy.sum(axis=0)
            du = (dy @ W2[e].T) * (u > 0)
            grads[f"layer{l}.W1"][e] = h[rows].T @ du
            grads[f"layer{l}.b1"][e] = du.sum(axis=0)
            dh[rows] += du @ W1[e].T

        gates = c["gates"]
        p = c["p"]
        dz = np.zeros((n, cfg.experts_per_layer))
        # auxiliary losses act on the full distribution p
        dp = (cfg.lambda_lb / L) * c["n_active"] * np.broadcast_to(c["f"], p.shape) / n
        if cfg.gate_norm == "topk":
            dzs = gates * (dgate - np.sum(gates * dgate, axis=1, keepdims=True))
            np.put_along_axis(dz, c["sel"], dzs, axis=1)
        else:
            dsel = np.zeros_like(p)
            np.put_along_axis(dsel, c["sel"], dgate, axis=1)
            dp = dp + dsel
        if cfg.lambda_ent:
            dp = dp + (cfg.lambda_ent / L) * np.where(p > 0, c["logp"] + 1.0, 0.0) / n
        dz += p * (dp - np.sum(p * dp, axis=1, keepdims=True))

        R = params[f"layer{l}.router"]
        grads[f"layer{l}.router"] = dz.T @ h
        dh = dh + dz @ R

    grads["input_proj"] = x.T @ dh
    return loss, grads, {"task": ce, "lb": lb, "ent": ent}


def predict_proba(model: MoeModel, x) -> np.ndarray:
    return np.exp(log_softmax(forward(model, x).logits, axis=1))


def accuracy(model: MoeModel, x, y) -> float:
    logits = forward(model, x).logits
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


def train(
    model: MoeModel,
    x,
    y,
    epochs: int,
    batch_size: int,
    optim: OptimState,
    rng: Rng,
    eval_data: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[MoeModel, TrainHistory]:
    """Epoch-shuffled minibatch Adam. Returns a new model and its history."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    _check_width(model, x)
    model = model.copy()
    history = TrainHistory()
    n = x.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        parts = np.zeros(3)
        batches = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grads, info = loss_and_grads(model, x[idx], y[idx])
            adam_step(model.params, grads, optim)
            parts += (info["task"], info["lb"], info["ent"])
            batches += 1
        parts /= batches
        ex, ey = eval_data if eval_data is not None else (x, y)
        history.records.append(
            EpochRecord(epoch + 1, float(parts[0]), float(parts[1]), float(parts[2]), accuracy(model, ex, ey))
        )
    return model, history


def gate_entropy(model: MoeModel, x) -> float:
    """Mean per-token entropy of the full gate distribution, averaged over layers."""
    out = forward(model, x, record_trace=True)
    vals = []
    for r in out.routing:
        p = r.full_probs
        ent = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
        vals.append(ent.mean())
    return float(np.mean(vals))


# -- checkpoints -------------------------------------------------------------


def checkpoint_dict(model: MoeModel) -> dict:
    """JSON-ready checkpoint; arrays of pruned experts are left out."""
    cfg = model.config
    arrays: dict[str, list] = {}
    for name in sorted(model.params):
        arr = model.params[name]
        layer, _, kind = name.partition(".")
        if layer.startswith("layer") and kind in EXPERT_PARAMS + ("adapter_scale", "adapter_bias"):
            l = int(layer[5:])
            for e in range(cfg.experts_per_layer):
                if model.active_mask[l, e]:
                    arrays[f"{layer}.expert{e}.{kind}"] = arr[e].tolist()
        else:
            arrays[name] = arr.tolist()
    return {
        "header": {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": asdict(cfg),
            "seed": cfg.seed,
            "active_mask": model.active_mask.astype(int).tolist(),
            "adapters": model.has_adapters,
        },
        "params": arrays,
    }


def model_from_checkpoint(doc: dict) -> MoeModel:
    header = doc["header"]
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in header["config"].items() if k in known})
    cfg.validate()
    model = build_model(cfg, Rng(cfg.seed))
    if header.get("adapters"):
        model = attach_adapters(model)
    model.active_mask = np.array(header["active_mask"], dtype=bool)
    arrays = doc["params"]
    for name, arr in model.params.items():
        layer, _, kind = name.partition(".")
        if layer.startswith("layer") and kind in EXPERT_PARAMS + ("adapter_scale", "adapter_bias"):
            l = int(layer[5:])
            arr[...] = 0.0
            for e in range(cfg.experts_per_layer):
                key = f"{layer}.expert{e}.{kind}"
                if key in arrays:
                    arr[e] = np.array(arrays[key], dtype=np.float64)
        else:
            model.params[name] = np.array(arrays[name], dtype=np.float64).reshape(arr.shape)
    return model


def checkpoint_json(model: MoeModel) -> str:
    return json.dumps(checkpoint_dict(model), sort_keys=True)

"""Deterministic numeric primitives: seeded RNG, softmax/CE, Adam, gradient checking.

Dense tensors are plain ``numpy`` float64 arrays. Everything here is
single-threaded and reproducible bit-for-bit given the same seed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    """Shapes of the operands do not agree."""


class NumericError(ArithmeticError):
    """A NaN or infinity showed up where a finite value was required."""


class StateError(RuntimeError):
    """An operation was asked to act on an unusable state."""


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def derive_seed(master: int, tag: str) -> int:
    """Child seed for an independent stream identified by ``tag``."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    _, z = _splitmix64((master ^ int.from_bytes(digest[:8], "little")) & MASK64)
    return z


class Rng:
    """xoshiro256** stream seeded through splitmix64."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            sm, z = _splitmix64(sm)
            s.append(z)
        self._s = s

    def spawn(self, tag: str) -> "Rng":
        return Rng(derive_seed(self.seed, tag))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float, size: int | tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(size))
        out = np.array([self.random() for _ in range(n)], dtype=np.float64)
        return (low + (high - low) * out).reshape(size)

    def normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(size))
        vals = []
        while len(vals) < n:
            # Box-Muller; 1 - u keeps the log argument in (0, 1]
            u1 = 1.0 - self.random()
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            vals.append(r * math.cos(2.0 * math.pi * u2))
            vals.append(r * math.sin(2.0 * math.pi * u2))
        return np.array(vals[:n], dtype=np.float64).reshape(size)

    def integer(self, n: int) -> int:
        """Unbiased integer in [0, n)."""
        if n <= 0:
            raise ValueError(f"integer bound must be positive, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx, dtype=np.int64)

    def sample(self, items: list, count: int) -> list:
        """Uniform sample without replacement (partial Fisher-Yates)."""
        pool = list(items)
        count = min(count, len(pool))
        for i in range(count):
            j = i + self.integer(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:count]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(logits) for a single example."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    loss = -float(log_softmax(logits)[label])
    grad = softmax(logits)
    grad[label] -= 1.0
    return loss, grad


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over a batch, with gradient w.r.t. the (N, C) logits."""
    n = logits.shape[0]
    logp = log_softmax(logits, axis=1)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass
class OptimState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    masks: Mapping[str, np.ndarray] | None = None,
) -> None:
    """In-place bias-corrected Adam update.

    ``masks`` restricts the update to selected entries; entries outside a
    mask (and parameters absent from ``grads``) are left bit-identical.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f"moment {name} has shape {m.shape}, parameter has {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if masks is not None and name in masks:
            keep = masks[name]
            params[name] = np.where(keep, p - update, p)
        else:
            params[name] = p - update


def finite_diff_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    rng: Rng,
    probes: int,
    step: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` maps a parameter dict to ``(loss, grads)``. Coordinates are
    drawn uniformly over all entries of all parameters.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    names = sorted(params)
    sizes = [params[n].size for n in names]
    total = sum(sizes)
    work = {n: params[n].copy() for n in names}
    _, grads = loss_fn(work)

    worst = 0.0
    for _ in range(probes):
        flat = rng.integer(total)
        for name, size in zip(names, sizes):
            if flat < size:
                break
            flat -= size
        arr = work[name].reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + step
        lp, _ = loss_fn(work)
        arr[flat] = orig - step
        lm, _ = loss_fn(work)
        arr[flat] = orig
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise NumericError(f"non-finite loss probing {name}[{flat}]")
        numeric = (lp - lm) / (2.0 * step)
        g = grads.get(name)
        analytic = 0.0 if g is None else float(g.reshape(-1)[flat])
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst

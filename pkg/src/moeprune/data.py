"""Seeded synthetic multi-subtask classification data.

Each subtask is a Gaussian cluster with its own linear labeling rule: the
projection of ``x - center`` on a subtask-specific direction is cut at its
empirical quantiles into ``C`` ordered classes, so every subtask is linearly
separable on its own and class counts are balanced up to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Rng

SPLITS = ("train", "pool", "test")

# clusters are stretched along their labeling direction by this factor
ELONGATION = 3.0


@dataclass
class DatasetSpec:
    num_subtasks: int = 4
    input_dim: int = 16
    num_classes: int = 4
    examples_per_subtask: int = 500
    cluster_separation: float = 4.0
    label_noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_subtasks < 1 or self.input_dim < 1:
            raise ValueError("num_subtasks and input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes > self.examples_per_subtask:
            raise ValueError(
                f"num_classes ({self.num_classes}) exceeds examples_per_subtask "
                f"({self.examples_per_subtask})"
            )
        if self.cluster_separation <= 0:
            raise ValueError("cluster_separation must be positive")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    subtask: np.ndarray
    split: np.ndarray  # 0 train, 1 pool, 2 test
    centers: np.ndarray
    directions: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def ids(self, split: str | None = None, subtasks=None) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if split is not None:
            keep &= self.split == SPLITS.index(split)
        if subtasks is not None:
            keep &= np.isin(self.subtask, np.asarray(list(subtasks)))
        return np.flatnonzero(keep)

    def view(self, split: str | None = None, subtasks=None) -> tuple[np.ndarray, np.ndarray]:
        idx = self.ids(split, subtasks)
        return self.x[idx], self.y[idx]


def gen_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = Rng(spec.seed)
    S, D, C, n = spec.num_subtasks, spec.input_dim, spec.num_classes, spec.examples_per_subtask

    centers = rng.normal((S, D))
    centers *= spec.cluster_separation / np.linalg.norm(centers, axis=1, keepdims=True)
    directions = rng.normal((S, D))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    xs, ys, tags = [], [], []
    for s in range(S):
        noise = rng.normal((n, D))
        noise += (ELONGATION - 1.0) * np.outer(noise @ directions[s], directions[s])
        pts = centers[s] + noise
        proj = (pts - centers[s]) @ directions[s]
        rank = np.empty(n, dtype=np.int64)
        rank[np.argsort(proj, kind="stable")] = np.arange(n)
        labels = rank * C // n
        if spec.label_noise > 0:
            per_class = int(round(spec.label_noise * n / C))
            flip = []
            for c in range(C):
                members = np.flatnonzero(labels == c).tolist()
                flip.extend(rng.sample(members, per_class))
            # shifting equal-sized groups by one class keeps counts balanced
            labels[np.array(flip, dtype=np.int64)] = (labels[np.array(flip, dtype=np.int64)] + 1) % C
        xs.append(pts)
        ys.append(labels)
        tags.append(np.full(n, s, dtype=np.int64))

    x = np.concatenate(xs)
    y = np.concatenate(ys)
    subtask = np.concatenate(tags)
    total = x.shape[0]
    order = rng.permutation(total)
    n_train = (total * 6) // 10
    n_pool = (total * 2) // 10
    split = np.empty(total, dtype=np.int64)
    split[order[:n_train]] = 0
    split[order[n_train : n_train + n_pool]] = 1
    split[order[n_train + n_pool :]] = 2
    return Dataset(x=x, y=y, subtask=subtask, split=split, centers=centers, directions=directions)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from moeprune.data import DatasetSpec, gen_dataset


def test_same_seed_same_bytes():
    a, b = gen_dataset(DatasetSpec(seed=4)), gen_dataset(DatasetSpec(seed=4))
    for field in ("x", "y", "subtask", "split"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()
    assert gen_dataset(DatasetSpec(seed=5)).x.tobytes() != a.x.tobytes()


def test_default_size_and_split_fractions():
    d = gen_dataset(DatasetSpec())
    assert len(d) == 2000
    assert np.bincount(d.split).tolist() == [1200, 400, 400]
    assert np.bincount(d.subtask).tolist() == [500] * 4


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(5, 60), st.floats(0.0, 0.45), st.integers(0, 1000))
def test_labels_balanced_and_ids_partitioned(S, C, n, noise, seed):
    if C > n:
        return
    d = gen_dataset(DatasetSpec(num_subtasks=S, num_classes=C, examples_per_subtask=n, label_noise=noise, seed=seed))
    for s in range(S):
        counts = np.bincount(d.y[d.subtask == s], minlength=C)
        assert counts.max() - counts.min() <= 1
    seen = np.concatenate([d.ids(split) for split in ("train", "pool", "test")])
    assert sorted(seen.tolist()) == list(range(len(d)))


def test_linear_probe_separates_each_subtask():
    d = gen_dataset(DatasetSpec(seed=0))
    for s in range(4):
        x, y = d.view("train", [s])
        probe = LogisticRegression(C=1e6, max_iter=20000).fit(x, y)
        assert probe.score(x, y) == 1.0


def test_too_many_classes():
    with pytest.raises(ValueError):
        gen_dataset(DatasetSpec(num_classes=6, examples_per_subtask=5))


def test_view_filters_by_subtask():
    d = gen_dataset(DatasetSpec(seed=1))
    ids = d.ids("pool", [0, 1])
    assert set(d.subtask[ids].tolist()) <= {0, 1}
    assert np.all(d.split[ids] == 1)

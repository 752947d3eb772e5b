import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipt_lab.splits import kfold_split, sample_few_shot


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 60), st.integers(2, 4), st.integers(0, 1000))
def test_kfold_validation_folds_partition_the_items(n, folds, seed):
    parts = kfold_split(n, folds, seed)
    assert len(parts) == folds
    seen = sorted(i for _, va in parts for i in va)
    assert seen == list(range(n))
    for tr, va in parts:
        assert not set(tr) & set(va)
        assert len(tr) + len(va) == n


def test_kfold_stratifies_when_possible():
    labels = [0] * 8 + [1] * 8
    for _, va in kfold_split(16, 4, seed=3, labels=labels):
        assert sorted(labels[i] for i in va) == [0, 0, 1, 1]


def test_kfold_errors():
    with pytest.raises(ValueError):
        kfold_split(10, folds=1)
    with pytest.raises(ValueError):
        kfold_split(3, folds=4)


def test_few_shot_draws_2k_per_label():
    labels = [0] * 100 + [1] * 80
    split = sample_few_shot(labels, k=32, seed=0)
    assert len(split.train) == 64 and len(split.dev) == 64
    assert sum(labels[i] == 0 for i in split.train) == 32
    assert sum(labels[i] == 1 for i in split.dev) == 32
    assert not set(split.train) & set(split.dev)
    assert len(split.pool) == 180 - 128
    assert len(split.folds) == 4
    assert sorted(i for _, va in split.folds for i in va) == sorted(split.sampled)


def test_few_shot_is_deterministic_under_seed():
    labels = [0, 1] * 40
    a, b = sample_few_shot(labels, 8, seed=5), sample_few_shot(labels, 8, seed=5)
    assert a.train == b.train and a.dev == b.dev and a.folds == b.folds
    assert sample_few_shot(labels, 8, seed=6).train != a.train


def test_few_shot_needs_2k_examples_per_label():
    with pytest.raises(ValueError, match="needs 64"):
        sample_few_shot([0] * 100 + [1] * 63, k=32, seed=0, label_names=["no", "yes"])
    with pytest.raises(ValueError):
        sample_few_shot([0, 1], k=0, seed=0)


def test_few_shot_names_a_label_without_examples():
    with pytest.raises(ValueError, match=r"label 'c' has 0 examples, needs 4"):
        sample_few_shot([0] * 10 + [1] * 10, k=2, seed=0, folds=0, label_names=["a", "b", "c"])
    with pytest.raises(ValueError, match="have no name"):
        sample_few_shot([0] * 10 + [3] * 10, k=2, seed=0, folds=0, label_names=["a", "b"])

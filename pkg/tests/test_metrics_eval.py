import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hepacascade.metrics_eval import CaseMismatchError, component_recall, dice, evaluate, kfold_split
from oracles import pooled_dice


def test_dice_hand_values():
    a = np.ones((3, 3))
    assert dice(a, a) == 1.0
    b = np.zeros((3, 3))
    b[0] = 1
    c = np.zeros((3, 3))
    c[2] = 1
    assert dice(b, c) == 0.0
    x = np.zeros(10)
    y = np.zeros(10)
    x[:4] = 1
    y[1:7] = 1  # |A|=4, |B|=6, |A&B|=3
    assert dice(x, y) == pytest.approx(0.6, abs=1e-12)


def test_dice_empty_convention():
    z = np.zeros((4, 4))
    assert dice(z, z) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros(3), np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(arrays(np.bool_, 30), arrays(np.bool_, 30))
def test_dice_symmetric_and_bounded(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0
    assert dice(a, a) == 1.0


def test_evaluate_mean_and_single_case():
    one = np.ones((2, 2))
    zero = np.zeros((2, 2))
    r = evaluate({"a": one, "b": one}, {"a": one, "b": zero})
    assert r.dice_per_case == 0.5
    r = evaluate({"a": np.eye(3)}, {"a": np.ones((3, 3))})
    assert r.dice_per_case == r.dice_overall == dice(np.eye(3), np.ones((3, 3)))


def test_dice_overall_matches_pooled_oracle(rng):
    preds, gts = {}, {}
    for i in range(10):
        shape = tuple(rng.integers(2, 9, 3))
        preds[f"c{i}"] = rng.random(shape) < 0.3
        gts[f"c{i}"] = rng.random(shape) < 0.3
    r = evaluate(preds, gts)
    assert r.dice_overall == pytest.approx(pooled_dice(preds, gts), abs=1e-12)
    assert r.dice_per_case == pytest.approx(np.mean([dice(preds[k], gts[k]) for k in gts]), abs=1e-12)
    shuffled = dict(reversed(list(preds.items())))
    assert evaluate(shuffled, gts).dice_overall == r.dice_overall


def test_evaluate_mismatched_ids():
    with pytest.raises(CaseMismatchError):
        evaluate({"a": np.ones(2)}, {"b": np.ones(2)})


def test_component_recall():
    gt = np.zeros((10, 10))
    gt[1, 1] = gt[5, 5] = gt[8, 8] = 1
    pred = np.zeros((10, 10))
    pred[5, 5] = pred[0, 0] = 1
    assert component_recall(pred, gt) == (1, 3)
    assert component_recall(pred, np.zeros((10, 10))) == (0, 0)


def test_kfold_basic():
    folds = kfold_split(["a", "b", "c", "d"], 2, seed=3)
    assert len(folds) == 2
    tests = [set(t) for _, t in folds]
    assert all(len(t) == 2 for t in tests)
    assert tests[0].isdisjoint(tests[1]) and tests[0] | tests[1] == {"a", "b", "c", "d"}
    for train, test in folds:
        assert set(train) == {"a", "b", "c", "d"} - set(test)
    assert kfold_split(["a", "b", "c", "d"], 2, seed=3) == folds


def test_kfold_lits_training_set():
    folds = kfold_split([f"volume-{i}" for i in range(130)], 2, seed=0)
    assert [len(t) for _, t in folds] == [65, 65]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(0, 1000), st.data())
def test_kfold_sizes(n, seed, data):
    k = data.draw(st.integers(2, n))
    folds = kfold_split([str(i) for i in range(n)], k, seed)
    sizes = [len(t) for _, t in folds]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == n
    assert sorted(x for _, t in folds for x in t) == sorted(str(i) for i in range(n))


@pytest.mark.parametrize("k", [1, 5])
def test_kfold_out_of_range(k):
    with pytest.raises(ValueError):
        kfold_split(["a", "b", "c"], k)

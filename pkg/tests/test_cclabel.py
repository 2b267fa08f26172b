import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hepacascade.cclabel import Component, SizeRule, filter_by_rule, is_small, label
from oracles import flood_fill_label


def _as_oracle_form(labels, comps):
    """Components keyed by their voxel set, for comparison up to renumbering."""
    out = {}
    for c in comps:
        vox = frozenset(zip(*np.nonzero(labels == c.label)))
        out[vox] = (c.voxel_count, c.bbox)
    return out


def check_against_flood_fill(mask, connectivity):
    labels, comps = label(mask, connectivity)
    ref_labels, ref_comps = flood_fill_label(mask, connectivity)
    assert len(comps) == len(ref_comps)
    assert [c.label for c in comps] == list(range(1, len(comps) + 1))
    # both enumerate in raster order of first voxel, so labels agree exactly
    np.testing.assert_array_equal(labels, ref_labels)
    for c, (count, bbox, centroid) in zip(comps, ref_comps):
        assert c.voxel_count == count
        assert c.bbox == bbox
        np.testing.assert_allclose(c.centroid, centroid, atol=1e-9)


def test_empty_mask():
    labels, comps = label(np.zeros((5, 5)))
    assert comps == [] and not labels.any()


def test_diagonal_connectivity():
    m = np.array([[1, 0], [0, 1]])
    assert len(label(m, "face")[1]) == 2
    assert len(label(m, "full")[1]) == 1


def test_3d_diagonal_connectivity():
    m = np.zeros((2, 2, 2))
    m[0, 0, 0] = m[1, 1, 1] = 1
    assert len(label(m, "face")[1]) == 2
    assert len(label(m, "full")[1]) == 1


def test_bad_connectivity():
    with pytest.raises(ValueError):
        label(np.zeros((2, 2)), "edge")


def test_random_masks_match_flood_fill(rng):
    for i in range(100):
        ndim = 2 if i % 2 == 0 else 3
        shape = tuple(rng.integers(1, 33 if ndim == 3 else 65, ndim))
        mask = rng.random(shape) < rng.uniform(0.05, 0.6)
        for conn in ("face", "full"):
            check_against_flood_fill(mask, conn)


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 9), st.integers(1, 9))), st.sampled_from(["face", "full"]))
def test_partition_and_consistency(mask, conn):
    labels, comps = label(mask, conn)
    assert np.array_equal(labels > 0, mask)
    for c in comps:
        where = np.argwhere(labels == c.label)
        assert len(where) == c.voxel_count
        assert tuple(zip(where.min(0).tolist(), where.max(0).tolist())) == c.bbox
        for (lo, hi), x in zip(c.bbox, c.centroid):
            assert lo <= x <= hi


def _comp(h, w):
    return Component(1, h * w, ((0, h - 1), (0, w - 1)), ((h - 1) / 2, (w - 1) / 2))


@pytest.mark.parametrize("h, w, small", [(32, 32, True), (33, 10, False), (10, 33, False), (33, 40, False), (1, 1, True)])
def test_is_small(h, w, small):
    assert is_small(_comp(h, w), SizeRule(32)) is small


def test_size_rule_invariant():
    with pytest.raises(ValueError):
        SizeRule(0)


def test_filter_keeps_large_blob():
    m = np.zeros((100, 100), np.uint8)
    m[5:45, 5:45] = 1
    m[70:75, 70:75] = 1
    big_only = np.zeros_like(m)
    big_only[5:45, 5:45] = 1
    np.testing.assert_array_equal(filter_by_rule(m, SizeRule(32), "large"), big_only)
    np.testing.assert_array_equal(filter_by_rule(m, SizeRule(32), "small"), m - big_only)


def test_filter_empty():
    assert not filter_by_rule(np.zeros((8, 8)), SizeRule(2), "large").any()


@settings(max_examples=80, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 20), st.integers(1, 20))), st.integers(1, 6))
def test_filter_split_is_partition_and_idempotent(mask, t):
    rule = SizeRule(t)
    large = filter_by_rule(mask, rule, "large")
    small = filter_by_rule(mask, rule, "small")
    assert not (large & small).any()
    np.testing.assert_array_equal(large | small, mask.astype(np.uint8))
    np.testing.assert_array_equal(filter_by_rule(large, rule, "large"), large)
    np.testing.assert_array_equal(filter_by_rule(small, rule, "small"), small)
    # no survivor of the large filter is itself small
    assert all(not is_small(c, rule) for c in label(large)[1])

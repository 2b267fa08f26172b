import numpy as np
import pytest

from hepacascade.cclabel import SizeRule, is_small, label
from hepacascade.sampler import (
    Case,
    cube_arrays,
    lesion_slice_set,
    liver_slice_set,
    round_half_down,
    small_lesion_cubes,
    window_start,
)
from hepacascade.volume_io import CTVolume, ShapeMismatchError


def _case(shape, cid="c", liver=None, lesions=None, rng=None):
    vox = (rng.random(shape) if rng is not None else np.ones(shape)).astype(np.float32)
    liver = np.ones(shape, np.uint8) if liver is None else liver
    lesions = np.zeros(shape, np.uint8) if lesions is None else lesions
    return Case(cid, CTVolume(vox), liver, lesions)


def test_liver_slices_count():
    x, y = liver_slice_set([_case((5, 4, 4))])
    assert x.shape == y.shape == (5, 4, 4)
    x, y = liver_slice_set([_case((5, 4, 4)), _case((3, 4, 4))])
    assert len(x) == 8


def test_case_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        Case("x", CTVolume(np.zeros((2, 2, 2))), np.zeros((2, 2, 3), np.uint8))


def test_lesion_slices_require_liver():
    case = _case((4, 8, 8), liver=np.zeros((4, 8, 8), np.uint8))
    x, _ = lesion_slice_set([case])
    assert len(x) == 0


def test_lesion_slices_mask_and_clean(rng):
    liver = np.zeros((4, 64, 64), np.uint8)
    liver[1:3, 4:60, 4:60] = 1
    lesions = np.zeros_like(liver)
    lesions[1, 10:15, 10:15] = 1  # 5x5: small, cleaned away
    lesions[2, 10:50, 10:50] = 1  # 40x40: kept
    case = _case((4, 64, 64), liver=liver, lesions=lesions, rng=rng)
    x, y = lesion_slice_set([case], SizeRule(32))
    assert len(x) == 2
    np.testing.assert_array_equal(x[0], case.volume.voxels[1] * liver[1])
    assert not y[0].any()
    np.testing.assert_array_equal(y[1], lesions[2])


def test_cleaned_targets_have_no_small_components(rng):
    shape = (6, 40, 40)
    lesions = (rng.random(shape) < 0.08).astype(np.uint8)
    lesions[2, 5:20, 5:30] = 1
    _, y = lesion_slice_set([_case(shape, lesions=lesions, rng=rng)], SizeRule(4))
    for sl in y:
        assert all(not is_small(c, SizeRule(4)) for c in label(sl)[1])


def test_round_half_down():
    assert [round_half_down(v) for v in (2.5, 2.4, 2.6, 3.0, 0.5)] == [2, 2, 3, 3, 0]


def test_window_clamping():
    assert window_start(40, 15, 32, 100) == 25
    assert window_start(5, 15, 32, 100) == 0
    assert window_start(95, 15, 32, 100) == 68


def _one_lesion_case(z, y, x, shape=(80, 64, 64)):
    lesions = np.zeros(shape, np.uint8)
    lesions[z, y - 1 : y + 2, x - 1 : x + 2] = 1
    return _case(shape, lesions=lesions)


def test_cube_centered_deep_lesion():
    cubes = small_lesion_cubes(_one_lesion_case(40, 30, 30), SizeRule(32))
    assert len(cubes) == 1
    c = cubes[0]
    assert c.cube.shape == c.target.shape == (32, 32, 32)
    assert c.source == ("c", (40, 30, 30))
    # lesion voxel (40, 30, 30) sits at local (15, 15, 15): slices 25..56
    assert c.target[15, 15, 15] == 1
    assert c.target.sum() == 9


def test_cube_clamped_near_top():
    cubes = small_lesion_cubes(_one_lesion_case(5, 30, 30), SizeRule(32))
    assert cubes[0].target[5, 15, 15] == 1  # slices 0..31


def test_cube_uses_liver_masked_intensity(rng):
    shape = (40, 40, 40)
    lesions = np.zeros(shape, np.uint8)
    lesions[20, 20, 20] = 1
    liver = np.zeros(shape, np.uint8)
    liver[10:30, 10:30, 10:30] = 1
    case = _case(shape, liver=liver, lesions=lesions, rng=rng)
    (c,) = small_lesion_cubes(case, SizeRule(32))
    np.testing.assert_array_equal(c.cube, case.masked[5:37, 5:37, 5:37])


def test_cubes_skip_thin_volumes(caplog):
    with caplog.at_level("WARNING"):
        assert small_lesion_cubes(_one_lesion_case(5, 20, 20, shape=(16, 64, 64))) == []
    assert "skipping" in caplog.text


def test_cube_contracts_on_random_lesions(rng):
    shape = (40, 48, 48)
    lesions = (rng.random(shape) < 0.01).astype(np.uint8)
    lesions[10:20, 5:30, 5:30] = 1  # large component, no cubes from it
    case = _case(shape, lesions=lesions, rng=rng)
    cubes = small_lesion_cubes(case, SizeRule(8), cube_edge=16, slices_above=7, slices_below=8)
    expected = sum(
        sum(is_small(c, SizeRule(8)) for c in label(lesions[z])[1]) for z in range(shape[0])
    )
    assert len(cubes) == expected > 0
    for c in cubes:
        assert c.cube.shape == (16, 16, 16)
        z, y, x = c.source[1]
        z0, y0, x0 = (window_start(v, 7, 16, n) for v, n in zip((z, y, x), shape))
        np.testing.assert_array_equal(c.target, lesions[z0 : z0 + 16, y0 : y0 + 16, x0 : x0 + 16])
        # the window is shifted off the 7-before/8-after split only when clamped
        for v, v0, n in zip((z, y, x), (z0, y0, x0), shape):
            assert v0 == v - 7 or v0 in (0, n - 16)
    X, Y = cube_arrays(cubes)
    assert X.shape == (len(cubes), 16, 16, 16)

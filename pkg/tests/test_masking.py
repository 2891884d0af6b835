import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfx3d.geom import FeaturizedPointCloud, serialize_order
from rfx3d.masking import MaskSpec, fixed_count_masks, make_mask, radius_mask, serialized_percent_mask


def runs_in_order(order, masked):
    """Number of maximal contiguous runs of masked positions along ``order``."""
    hit = np.isin(order, masked).astype(int)
    return int(np.sum(np.diff(np.concatenate([[0], hit])) == 1))


def test_maskspec_invariants():
    with pytest.raises(ValueError):
        MaskSpec(np.array([], dtype=int), 5, "x")
    with pytest.raises(ValueError):
        MaskSpec(np.array([1, 1]), 5, "x")
    with pytest.raises(ValueError):
        MaskSpec(np.array([5]), 5, "x")
    m = MaskSpec(np.array([0, 3]), 5, "x")
    np.testing.assert_array_equal(m.visible, [1, 2, 4])


def test_serialized_eight_percent_of_thousand():
    rng = np.random.default_rng(0)
    order = rng.permutation(1000)
    m = serialized_percent_mask(order, 0.08, (0.02, 0.08), rng)
    assert len(m) == 80


def test_serialized_single_block_degenerate():
    rng = np.random.default_rng(1)
    order = rng.permutation(500)
    m = serialized_percent_mask(order, 0.1, (0.1, 0.1), rng)
    assert len(m) == 50
    assert runs_in_order(order, m.masked) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(20, 3000), st.floats(0.05, 0.9), st.floats(0.1, 1.0), st.floats(0.1, 1.0),
       st.integers(0, 2 ** 32 - 1))
def test_serialized_exact_count_and_partition(n, ratio, a, b, seed):
    lo, hi = sorted((a * ratio, b * ratio))
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    target = int(np.floor(ratio * n))
    if target < 1:
        with pytest.raises(ValueError):
            serialized_percent_mask(order, ratio, (lo, hi), rng)
        return
    m = serialized_percent_mask(order, ratio, (lo, hi), rng)
    assert len(m) == target
    assert len(np.unique(m.masked)) == target
    assert np.all((m.masked >= 0) & (m.masked < n))
    assert np.all(np.sort(np.concatenate([m.masked, m.visible])) == np.arange(n))


def test_serialized_rejects_bad_arguments():
    order = np.arange(10)
    with pytest.raises(ValueError):
        serialized_percent_mask(order, 0.05, (0.01, 0.05))  # 0.5 points
    with pytest.raises(ValueError):
        serialized_percent_mask(order, 0.5, (0.3, 0.2))
    with pytest.raises(ValueError):
        serialized_percent_mask(order, 1.0, (0.1, 0.2))


def brute_nearest(coords, seed, count):
    d = [(float(np.sum((coords[i] - coords[seed]) ** 2)), i) for i in range(len(coords))]
    return sorted(i for _, i in sorted(d)[:count])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 120), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_radius_matches_bruteforce(n, seed, lattice):
    rng = np.random.default_rng(seed)
    # lattice clouds create many exact distance ties
    coords = rng.integers(0, 4, (n, 3)).astype(float) if lattice else rng.normal(size=(n, 3))
    count = int(rng.integers(1, n + 1))
    s = int(rng.integers(0, n))
    m = radius_mask(coords, count, seed_index=s)
    assert m.masked.tolist() == brute_nearest(coords, s, count)
    far = max(np.sum((coords[m.masked] - coords[s]) ** 2, axis=1))
    rest = np.sum((coords[m.visible] - coords[s]) ** 2, axis=1)
    assert np.all(rest >= far)


def test_radius_extremes():
    coords = np.random.default_rng(0).normal(size=(30, 3))
    assert len(radius_mask(coords, 30, np.random.default_rng(0))) == 30
    m = radius_mask(coords, 1, seed_index=7)
    np.testing.assert_array_equal(m.masked, [7])
    with pytest.raises(ValueError):
        radius_mask(coords, 31)


def test_fixed_count_cases():
    coords = np.random.default_rng(3).normal(size=(200, 3))
    m = fixed_count_masks(coords, 20, 0.1, np.random.default_rng(0))
    assert len(m) == 20
    m2 = fixed_count_masks(coords, 7, 0.3, np.random.default_rng(1))
    assert 60 <= len(m2) <= 60 + 7
    with pytest.raises(ValueError):
        fixed_count_masks(coords, 201, 0.1)


@pytest.mark.parametrize("strategy", ["serialized", "radius", "fixed"])
def test_make_mask_deterministic(strategy):
    rng0 = np.random.default_rng(0)
    pc = FeaturizedPointCloud(rng0.uniform(0, 2, (300, 3)), rng0.normal(size=(300, 4)))
    order = serialize_order(pc)
    a = make_mask(pc, order, strategy, np.random.default_rng(5))
    b = make_mask(pc, order, strategy, np.random.default_rng(5))
    np.testing.assert_array_equal(a.masked, b.masked)
    assert a.strategy == strategy
    with pytest.raises(ValueError):
        make_mask(pc, order, "nope", np.random.default_rng(0))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rfx3d.geom import (
    Box3,
    FeaturizedPointCloud,
    NoDetection,
    VoxelGridSpec,
    box_from_mask,
    giou3,
    group,
    harmonic_encode,
    iou3,
    morton_decode,
    morton_encode,
    project,
    serialize_order,
    trilinear_weights,
    unproject,
    voxelize,
)


def cube(lo, size=1.0):
    lo = np.asarray(lo, dtype=float)
    return Box3.from_bounds(lo, lo + size)


# --- types ---------------------------------------------------------------

def test_box_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        Box3((0, 0, 0), (1, 0, 1))
    with pytest.raises(ValueError):
        Box3((0, np.nan, 0), (1, 1, 1))


def test_cloud_rejects_length_mismatch():
    with pytest.raises(ValueError, match="disagree"):
        FeaturizedPointCloud(np.zeros((3, 3)), np.zeros((2, 4)))


def test_grid_rejects_nonpositive_voxel():
    with pytest.raises(ValueError):
        VoxelGridSpec(0.0)


# --- unproject -------------------------------------------------------------

def test_unproject_principal_ray():
    d = np.zeros((2, 2))
    d[0, 0] = 1.0
    np.testing.assert_array_equal(unproject(d, (1, 1, 0, 0)), [[0.0, 0.0, 1.0]])


def test_unproject_hand_pinhole_case():
    d = np.zeros((3, 4))
    d[1, 3] = 2.0  # row v=1, column u=3
    np.testing.assert_allclose(unproject(d, (2, 2, 1, 1)), [[2.0, 0.0, 2.0]])
    pose = np.eye(4)
    pose[0, 3] = 1.0
    np.testing.assert_allclose(unproject(d, (2, 2, 1, 1), pose), [[3.0, 0.0, 2.0]])


def test_unproject_skips_nan_and_zero_depth():
    d = np.array([[1.0, np.nan], [0.0, 2.0]])
    pts, pix = unproject(d, (1, 1, 0, 0), return_pixels=True)
    assert len(pts) == 2
    np.testing.assert_array_equal(pix, [0, 3])


def test_unproject_rejects_nonrigid_pose():
    pose = np.eye(4)
    pose[0, 0] = 2.0
    with pytest.raises(ValueError):
        unproject(np.ones((2, 2)), (1, 1, 0, 0), pose)
    reflect = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(ValueError):
        unproject(np.ones((2, 2)), (1, 1, 0, 0), reflect)


def _rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.linalg.det(q))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_unproject_project_roundtrip(seed):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0.5, 4.0, (5, 6))
    pose = np.eye(4)
    pose[:3, :3] = _rotation(rng)
    pose[:3, 3] = rng.normal(size=3)
    k = (rng.uniform(200, 600), rng.uniform(200, 600), 3.0, 2.5)
    pts, pix = unproject(depth, k, pose, return_pixels=True)
    uvz = project(pts, k, pose)
    v, u = np.divmod(pix, depth.shape[1])
    expect = np.stack([u, v, depth.ravel()[pix]], axis=1).astype(float)
    np.testing.assert_allclose(uvz, expect, rtol=1e-9, atol=1e-9)


# --- voxelize ----------------------------------------------------------------

def test_trilinear_face_center_weight_is_half():
    s = 0.1
    c = np.array([0.05, 0.05, 0.05])
    assert trilinear_weights(c + [s / 2, 0, 0], c, s) == pytest.approx(0.5, abs=1e-12)


def test_voxelize_single_point_at_center_is_identity():
    spec = VoxelGridSpec(0.1)
    f = np.array([[0.3, -7.0, 2.5]])
    out = voxelize([[0.05, 0.15, 0.25]], f, spec)
    np.testing.assert_array_equal(out.feats, f)
    np.testing.assert_allclose(out.coords, [[0.05, 0.15, 0.25]])


@given(hnp.arrays(np.float64, 3, elements=st.floats(-50, 50)), hnp.arrays(np.float64, 5, elements=st.floats(-1e6, 1e6)),
       st.sampled_from([0.05, 0.1, 0.3]))
def test_voxelize_single_point_anywhere_is_bit_exact(p, f, size):
    out = voxelize(p[None], f[None], VoxelGridSpec(size))
    np.testing.assert_array_equal(out.feats[0], f)


def test_voxelize_symmetric_pair_averages():
    spec = VoxelGridSpec(1.0)
    out = voxelize([[0.3, 0.5, 0.5], [0.7, 0.5, 0.5]], [[0.0], [2.0]], spec)
    assert len(out) == 1
    assert out.feats[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_voxelize_validity_is_any_contributor():
    spec = VoxelGridSpec(1.0)
    out = voxelize([[0.2, 0.2, 0.2], [0.6, 0.6, 0.6], [1.5, 0.5, 0.5]], np.eye(3), spec, valid=[False, True, False])
    np.testing.assert_array_equal(out.valid, [True, False])
    # the valid contributor alone defines the first voxel's features
    np.testing.assert_allclose(out.feats[0], [0.0, 1.0, 0.0])


def test_voxelize_rejects_row_mismatch():
    with pytest.raises(ValueError):
        voxelize(np.zeros((3, 3)), np.zeros((2, 1)))


clouds = st.integers(1, 60).flatmap(lambda n: st.tuples(
    hnp.arrays(np.float64, (n, 3), elements=st.floats(-1, 1, allow_nan=False)),
    hnp.arrays(np.float64, (n, 2), elements=st.floats(-10, 10, allow_nan=False)),
    hnp.arrays(np.bool_, (n,)),
))


@settings(max_examples=60, deadline=None)
@given(clouds, st.sampled_from([0.05, 0.2, 0.5]))
def test_voxelize_convex_and_count(cloud, size):
    pts, f, valid = cloud
    spec = VoxelGridSpec.covering(pts, size)
    out = voxelize(pts, f, spec, valid)
    vid = spec.index(pts)
    keys = {tuple(k) for k in vid}
    assert len(out) == len(keys) <= len(pts)
    out_idx = spec.index(out.coords)
    for i, key in enumerate(map(tuple, out_idx)):
        members = np.all(vid == key, axis=1)
        assert out.valid[i] == valid[members].any()
        lo = f[members].min(axis=0) - 1e-9
        hi = f[members].max(axis=0) + 1e-9
        assert np.all(out.feats[i] >= lo) and np.all(out.feats[i] <= hi)


# --- harmonic -------------------------------------------------------------------

def test_harmonic_hand_values():
    np.testing.assert_allclose(harmonic_encode(0.0, 1), [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(harmonic_encode(1.0, 1), [0.0, -1.0], atol=1e-15)
    np.testing.assert_allclose(harmonic_encode(0.5, 2), [1.0, 0.0, 0.0, -1.0], atol=1e-15)


def test_harmonic_clamps_and_is_channelwise():
    np.testing.assert_allclose(harmonic_encode(1.7, 2), harmonic_encode(1.0, 2))
    rgb = np.array([[0.0, 0.5, 1.0]])
    enc = harmonic_encode(rgb, 4)
    assert enc.shape == (1, 24)
    np.testing.assert_allclose(enc[0, 8:16], harmonic_encode(0.5, 4))
    with pytest.raises(ValueError):
        harmonic_encode(0.2, 0)


# --- boxes -------------------------------------------------------------------

def test_iou_giou_hand_cases():
    a = cube([0, 0, 0])
    assert iou3(a, a) == 1.0 and giou3(a, a) == 1.0
    half = Box3.from_bounds([0.5, 0, 0], [1.5, 1, 1])
    assert abs(iou3(a, half) - 1 / 3) < 1e-12
    touch = cube([1, 0, 0])
    assert iou3(a, touch) == 0.0
    assert abs(giou3(a, touch)) < 1e-12
    gap = cube([2, 0, 0])
    assert abs(giou3(a, gap) + 1 / 3) < 1e-12


boxes = st.tuples(
    st.tuples(*[st.floats(-2, 2)] * 3), st.tuples(*[st.floats(0.05, 2)] * 3)
).map(lambda cs: Box3(*cs))


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_giou_properties(a, b):
    assert iou3(a, b) == pytest.approx(iou3(b, a), abs=1e-12)
    assert giou3(a, b) == pytest.approx(giou3(b, a), abs=1e-12)
    assert 0.0 <= iou3(a, b) <= 1.0 + 1e-12
    assert -1.0 < giou3(a, b) <= iou3(a, b) + 1e-12


def test_box_from_mask_cases():
    pts = np.array([[0, 0, 0], [1, 1, 1], [0.5, 0.2, 0.1], [9, 9, 9]], dtype=float)
    b = box_from_mask(pts, [1, 1, 1, 0])
    np.testing.assert_allclose(b.lo, [0, 0, 0])
    np.testing.assert_allclose(b.hi, [1, 1, 1])
    assert box_from_mask(pts, [1, 1, 1, 1]).hi[0] == 9.0
    with pytest.raises(NoDetection):
        box_from_mask(pts, np.zeros(4), 0.5)


# --- morton / serialization ------------------------------------------------------

def test_morton_hand_codes():
    assert morton_encode(0, 0, 0) == 0
    assert [morton_encode(*p) for p in [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)]] == [1, 2, 4, 7]


def _interleave_oracle(x, y, z, bits):
    code = 0
    for b in range(bits):
        code |= ((x >> b) & 1) << (3 * b) | ((y >> b) & 1) << (3 * b + 1) | ((z >> b) & 1) << (3 * b + 2)
    return code


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 21 - 1), st.integers(0, 2 ** 21 - 1), st.integers(0, 2 ** 21 - 1))
def test_morton_matches_bitwise_oracle_and_roundtrips(x, y, z):
    c = morton_encode(x, y, z)
    assert c == _interleave_oracle(x, y, z, 21)
    assert morton_decode(c) == (x, y, z)


def test_morton_rejects_out_of_range():
    with pytest.raises(ValueError):
        morton_encode(16, 0, 0, bits=4)
    with pytest.raises(ValueError):
        morton_encode(-1, 0, 0)
    with pytest.raises(ValueError):
        morton_encode(0, 0, 0, bits=22)


def test_serialize_lattice_is_identity():
    idx = np.array([morton_decode(c) for c in range(64)])
    pts = (idx + 0.5) * 0.1
    np.testing.assert_array_equal(serialize_order(pts, VoxelGridSpec(0.1)), np.arange(64))


def test_serialize_same_voxel_keeps_input_order():
    pts = np.array([[0.31, 0.3, 0.3], [0.01, 0.0, 0.0], [0.32, 0.31, 0.3]])
    np.testing.assert_array_equal(serialize_order(pts, VoxelGridSpec(0.1)), [1, 0, 2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_serialize_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    cells = rng.choice(4096, size=40, replace=False)
    pts = (np.stack(np.unravel_index(cells, (16, 16, 16)), 1) + 0.5) * 0.1
    spec = VoxelGridSpec(0.1)
    o = serialize_order(pts, spec)
    assert sorted(o) == list(range(40))
    perm = rng.permutation(40)
    o2 = serialize_order(pts[perm], spec)
    np.testing.assert_array_equal(pts[perm][o2], pts[o])


def test_group_sizes():
    assert [len(g) for g in group(np.arange(10), 5)] == [5, 5]
    assert [len(g) for g in group(np.arange(7), 3)] == [3, 3, 1]
    assert [len(g) for g in group(np.arange(7), 9)] == [7]
    shifted = group(np.arange(7), 3, offset=1)
    np.testing.assert_array_equal(np.concatenate(shifted), np.arange(7))
    with pytest.raises(ValueError):
        group(np.arange(3), 0)

"""Geometry kernels: unprojection, voxelization, harmonic encoding, boxes and
space-filling-curve serialization.

Everything here is a pure numpy function; points are ``(N, 3)`` float arrays
in meters and boxes are :class:`Box3` values (center + positive size).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MORTON_MAX_BITS = 21
DEFAULT_VOXEL_SIZE = 0.05
DEFAULT_HARMONIC_OCTAVES = 4
DEFAULT_CURVE_BITS = 16


class NoDetection(ValueError):
    """Raised when a mask selects no point, so no box can be formed."""


@dataclass(frozen=True)
class Box3:
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("Box3 needs 3 center and 3 size components")
        if not all(np.isfinite(c)) or not all(np.isfinite(s)):
            raise ValueError("Box3 components must be finite")
        if min(s) <= 0:
            raise ValueError(f"Box3 size must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @classmethod
    def from_bounds(cls, lo, hi, min_size: float = 1e-6) -> "Box3":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        size = np.maximum(hi - lo, min_size)
        return cls(tuple((lo + hi) / 2.0), tuple(size))

    @classmethod
    def from_array(cls, a) -> "Box3":
        a = np.asarray(a, dtype=np.float64).reshape(6)
        return cls(tuple(a[:3]), tuple(a[3:]))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2.0

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def as_array(self) -> np.ndarray:
        return np.array(self.center + self.size, dtype=np.float64)

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=1)


@dataclass(frozen=True)
class VoxelGridSpec:
    voxel_size: float = DEFAULT_VOXEL_SIZE
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @classmethod
    def covering(cls, coords, voxel_size: float = DEFAULT_VOXEL_SIZE) -> "VoxelGridSpec":
        """Grid whose origin sits on the voxel lattice just below ``coords``."""
        lo = np.asarray(coords, dtype=np.float64).reshape(-1, 3).min(axis=0)
        origin = np.floor(lo / voxel_size) * voxel_size
        return cls(voxel_size, tuple(origin))

    def index(self, coords) -> np.ndarray:
        p = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        return np.floor((p - np.asarray(self.origin)) / self.voxel_size).astype(np.int64)

    def center(self, idx) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * self.voxel_size


@dataclass
class FeaturizedPointCloud:
    coords: np.ndarray
    feats: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.feats = np.ascontiguousarray(self.feats, dtype=np.float64)
        if self.feats.ndim == 1:
            self.feats = self.feats.reshape(len(self.coords), -1)
        if self.valid is None:
            self.valid = np.ones(len(self.coords), dtype=bool)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool).reshape(-1)
        n = len(self.coords)
        if self.feats.shape[0] != n or self.valid.shape[0] != n:
            raise ValueError(
                f"coords/feats/valid lengths disagree: {n}, {self.feats.shape[0]}, {self.valid.shape[0]}"
            )
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coordinates must be finite")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    def subset(self, idx) -> "FeaturizedPointCloud":
        idx = np.asarray(idx)
        return FeaturizedPointCloud(self.coords[idx], self.feats[idx], self.valid[idx])

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.coords.min(axis=0), self.coords.max(axis=0)


def _check_rigid(pose: np.ndarray, tol: float = 1e-6) -> None:
    if pose.shape != (4, 4):
        raise ValueError("pose must be 4x4")
    r = pose[:3, :3]
    if not np.allclose(pose[3], [0, 0, 0, 1], atol=tol):
        raise ValueError("pose bottom row must be [0, 0, 0, 1]")
    if not np.allclose(r @ r.T, np.eye(3), atol=tol) or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("pose rotation is not orthonormal with det +1")


def unproject(depth, intrinsics, pose=None, return_pixels: bool = False):
    """Lift a depth image to world-frame points.

    ``intrinsics`` is ``(fx, fy, cx, cy)``; pixel ``(u, v)`` is column ``u``,
    row ``v``. Pixels with non-positive or NaN depth are skipped. With
    ``return_pixels`` the flat pixel indices of the kept points are returned too.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError("depth must be H x W")
    pose = np.eye(4) if pose is None else np.asarray(pose, dtype=np.float64)
    _check_rigid(pose)
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    h, w = depth.shape
    vv, uu = np.mgrid[0:h, 0:w]
    with np.errstate(invalid="ignore"):
        keep = np.isfinite(depth) & (depth > 0)
    if np.any(np.isfinite(depth) & (depth < 0)):
        raise ValueError("depth must be non-negative")
    z = depth[keep]
    x = (uu[keep] - cx) * z / fx
    y = (vv[keep] - cy) * z / fy
    cam = np.stack([x, y, z], axis=1)
    world = cam @ pose[:3, :3].T + pose[:3, 3]
    if return_pixels:
        return world, np.flatnonzero(keep.ravel())
    return world


def project(points, intrinsics, pose=None) -> np.ndarray:
    """Inverse of :func:`unproject`: world points to ``(u, v, z)`` pixel coordinates."""
    pose = np.eye(4) if pose is None else np.asarray(pose, dtype=np.float64)
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (p - pose[:3, 3]) @ pose[:3, :3]
    z = cam[:, 2]
    return np.stack([cam[:, 0] * fx / z + cx, cam[:, 1] * fy / z + cy, z], axis=1)


def trilinear_weights(points, centers, voxel_size: float) -> np.ndarray:
    """Per-axis tent weight product ``prod(max(0, 1 - |p - c| / s))``."""
    d = np.abs(np.asarray(points) - np.asarray(centers)) / voxel_size
    return np.prod(np.maximum(0.0, 1.0 - d), axis=-1)


def voxelize(points, feats, spec: VoxelGridSpec | None = None, valid=None) -> FeaturizedPointCloud:
    """Merge points into voxels with tent-weighted feature averaging.

    Output points sit at voxel centers, ordered by first occurrence in the input.
    A voxel is valid iff any contributing point was valid; only valid points
    contribute features when at least one exists.
    """
    spec = spec or VoxelGridSpec()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if feats.shape[0] != len(points):
        raise ValueError(f"feats has {feats.shape[0]} rows for {len(points)} points")
    valid = np.ones(len(points), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if len(points) == 0:
        return FeaturizedPointCloud(np.zeros((0, 3)), np.zeros((0, feats.shape[1])), np.zeros(0, bool))

    idx = spec.index(points)
    _, first, inverse = np.unique(idx, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # relabel voxels by first occurrence so output order follows the input
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    vox = rank[inverse]
    n_vox = len(first)

    centers = spec.center(idx)
    w = trilinear_weights(points, centers, spec.voxel_size)

    any_valid = np.zeros(n_vox, dtype=bool)
    np.logical_or.at(any_valid, vox, valid)
    # invalid points only contribute to voxels that have no valid point
    use = valid | ~any_valid[vox]

    w = np.where(use, w, 0.0)
    wsum = np.zeros(n_vox)
    np.add.at(wsum, vox, w)
    ok = wsum > 0
    acc = np.zeros((n_vox, feats.shape[1]))
    np.add.at(acc, vox, w[:, None] * feats)
    acc /= np.where(ok, wsum, 1.0)[:, None]

    cnt = np.zeros(n_vox)
    np.add.at(cnt, vox, use.astype(np.float64))
    mean = np.zeros_like(acc)
    np.add.at(mean, vox, np.where(use, 1.0, 0.0)[:, None] * feats)
    mean /= cnt[:, None]

    out = np.where(ok[:, None], acc, mean)
    # rounding can step just outside the contributors' range; clipping keeps the
    # average convex and makes single-contributor and constant voxels exact
    lo = np.full_like(out, np.inf)
    hi = np.full_like(out, -np.inf)
    np.minimum.at(lo, vox[use], feats[use])
    np.maximum.at(hi, vox[use], feats[use])
    out = np.clip(out, lo, hi)
    out_coords = np.empty((n_vox, 3))
    out_coords[vox] = centers
    return FeaturizedPointCloud(out_coords, out, any_valid)


def harmonic_encode(v, octaves: int = DEFAULT_HARMONIC_OCTAVES) -> np.ndarray:
    """``[sin(2^k pi v), cos(2^k pi v)]`` for ``k < octaves``, per input channel.

    Scalar input gives ``2 * octaves`` values; an array of shape ``(..., C)``
    gives ``(..., C * 2 * octaves)`` with each channel's block contiguous.
    """
    if octaves < 1:
        raise ValueError("octaves must be >= 1")
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    ang = v[..., None] * (np.pi * 2.0 ** np.arange(octaves))
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    if v.ndim == 0:
        return enc.reshape(-1)
    return enc.reshape(*v.shape[:-1], -1)


def _overlap(a: Box3, b: Box3) -> np.ndarray:
    return np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0.0, None)


def iou3(a: Box3, b: Box3) -> float:
    inter = float(np.prod(_overlap(a, b)))
    union = a.volume + b.volume - inter
    return inter / union


def giou3(a: Box3, b: Box3) -> float:
    inter = float(np.prod(_overlap(a, b)))
    union = a.volume + b.volume - inter
    hull = float(np.prod(np.maximum(a.hi, b.hi) - np.minimum(a.lo, b.lo)))
    return inter / union - (hull - union) / hull


def box_from_mask(pc, mask, threshold: float = 0.5) -> Box3:
    coords = pc.coords if isinstance(pc, FeaturizedPointCloud) else np.asarray(pc).reshape(-1, 3)
    sel = np.asarray(mask) >= threshold
    if not np.any(sel):
        raise NoDetection("mask selects no point above threshold")
    p = coords[sel]
    return Box3.from_bounds(p.min(axis=0), p.max(axis=0))


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(ix, iy, iz, bits: int = MORTON_MAX_BITS):
    """Interleave bits with x in the least-significant slot of each triple.

    Accepts ints or integer arrays; returns the same kind.
    """
    if not 1 <= bits <= MORTON_MAX_BITS:
        raise ValueError(f"bits must be in [1, {MORTON_MAX_BITS}]")
    scalar = np.isscalar(ix) and np.isscalar(iy) and np.isscalar(iz)
    arr = [np.asarray(c, dtype=np.int64) for c in (ix, iy, iz)]
    for c in arr:
        if np.any(c < 0) or np.any(c >= (1 << bits)):
            raise ValueError(f"coordinate out of range for {bits} bits")
    code = _spread_bits(arr[0]) | (_spread_bits(arr[1]) << np.uint64(1)) | (_spread_bits(arr[2]) << np.uint64(2))
    return int(code) if scalar else code


def morton_decode(code):
    scalar = np.isscalar(code)
    c = np.asarray(code, dtype=np.uint64)
    out = tuple(_compact_bits(c >> np.uint64(s)) for s in range(3))
    if scalar:
        return tuple(int(v) for v in out)
    return tuple(v.astype(np.int64) for v in out)


def serialize_order(pc, spec: VoxelGridSpec | None = None, curve: str = "morton",
                    bits: int = DEFAULT_CURVE_BITS) -> np.ndarray:
    """Permutation visiting points in space-filling-curve order of their voxels.

    Ties (points sharing a voxel) keep their input order. When ``spec`` is None
    the grid origin is snapped below the cloud's minimum corner.
    """
    coords = pc.coords if isinstance(pc, FeaturizedPointCloud) else np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    if len(coords) == 0:
        return np.zeros(0, dtype=np.int64)
    spec = spec or VoxelGridSpec.covering(coords)
    q = spec.index(coords)
    if np.any(q < 0) or np.any(q >= (1 << bits)):
        raise ValueError("points fall outside the quantization range of the grid")
    if curve != "morton":
        raise ValueError(f"unsupported curve {curve!r}")
    codes = morton_encode(q[:, 0], q[:, 1], q[:, 2], bits=bits)
    return np.argsort(codes, kind="stable")


def group(order, group_size: int, offset: int = 0) -> list[np.ndarray]:
    """Split an ordering into contiguous chunks of ``group_size``.

    ``offset`` shortens the first chunk (shifted windows); ``offset=0`` gives
    ``ceil(N / g)`` groups where only the last may be short.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    order = np.asarray(order)
    n = len(order)
    offset = offset % group_size
    starts = [0] if offset == 0 else [0, offset]
    starts += list(range(starts[-1] + group_size, n, group_size))
    starts = [s for s in starts if s < n]
    bounds = starts + [n]
    return [order[bounds[i]:bounds[i + 1]] for i in range(len(starts))]

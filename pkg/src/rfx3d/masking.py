"""Mask construction for latent masked prediction.

Three strategies: contiguous blocks along the serialized order covering a
fixed fraction of the cloud, a single radius (k-nearest) region, and a union
of fixed-size radius regions. All take an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import FeaturizedPointCloud

STRATEGIES = ("serialized", "radius", "fixed")


@dataclass(frozen=True)
class MaskSpec:
    masked: np.ndarray
    total_n: int
    strategy: str

    def __post_init__(self):
        m = np.asarray(self.masked, dtype=np.int64)
        if m.size == 0:
            raise ValueError("mask must hide at least one point")
        if m.min() < 0 or m.max() >= self.total_n:
            raise ValueError("masked index out of range")
        if np.any(np.diff(m) <= 0):
            raise ValueError("masked indices must be strictly increasing")
        object.__setattr__(self, "masked", m)

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.total_n, dtype=bool)
        keep[self.masked] = False
        return np.flatnonzero(keep)

    def __len__(self) -> int:
        return len(self.masked)


def serialized_percent_mask(order, ratio: float, block_range=(0.02, 0.08),
                            rng: np.random.Generator | None = None) -> MaskSpec:
    """Mask ``floor(ratio * N)`` points as a union of runs along ``order``."""
    rng = rng if rng is not None else np.random.default_rng()
    order = np.asarray(order, dtype=np.int64)
    n = len(order)
    lo, hi = block_range
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if not 0 < lo <= hi <= ratio:
        raise ValueError("block_range must satisfy 0 < lo <= hi <= ratio")
    target = int(np.floor(ratio * n))
    if target < 1:
        raise ValueError(f"ratio * N = {ratio * n:.3f} masks no point")

    # the small slack keeps products like 0.08 * 1000 from rounding past an integer
    lo_len = max(1, int(np.ceil(lo * n - 1e-9)))
    hi_len = max(lo_len, int(np.floor(hi * n + 1e-9)))
    hit = np.zeros(n, dtype=bool)
    picked: list[int] = []  # positions in serialized order, in pick order
    while len(picked) < target:
        length = int(rng.integers(lo_len, hi_len + 1))
        start = int(rng.integers(0, n - length + 1))
        for pos in range(start, start + length):
            if not hit[pos]:
                hit[pos] = True
                picked.append(pos)
    # truncate the tail of the last block
    keep = np.asarray(picked[:target])
    return MaskSpec(np.sort(order[keep]), n, "serialized")


def _coords(pc) -> np.ndarray:
    if isinstance(pc, FeaturizedPointCloud):
        return pc.coords
    return np.asarray(pc, dtype=np.float64).reshape(-1, 3)


def nearest_indices(coords: np.ndarray, seed: int, count: int) -> np.ndarray:
    d = np.sum((coords - coords[seed]) ** 2, axis=1)
    # lexsort: distance first, index breaks ties
    return np.lexsort((np.arange(len(coords)), d))[:count]


def radius_mask(pc, count: int, rng: np.random.Generator | None = None, seed_index: int | None = None) -> MaskSpec:
    """A random seed point plus its ``count - 1`` nearest neighbours."""
    rng = rng if rng is not None else np.random.default_rng()
    coords = _coords(pc)
    n = len(coords)
    if not 1 <= count <= n:
        raise ValueError(f"count must lie in [1, {n}]")
    seed = int(rng.integers(0, n)) if seed_index is None else int(seed_index)
    return MaskSpec(np.sort(nearest_indices(coords, seed, count)), n, "radius")


def fixed_count_masks(pc, mask_size: int, ratio: float, rng: np.random.Generator | None = None) -> MaskSpec:
    """Union of radius masks of ``mask_size`` points until ``floor(ratio * N)`` are hidden."""
    rng = rng if rng is not None else np.random.default_rng()
    coords = _coords(pc)
    n = len(coords)
    if mask_size < 1:
        raise ValueError("mask_size must be >= 1")
    if mask_size > n:
        raise ValueError(f"mask_size {mask_size} exceeds point count {n}")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    target = max(1, int(np.floor(ratio * n)))
    hit = np.zeros(n, dtype=bool)
    while hit.sum() < target:
        seed = int(rng.integers(0, n))
        hit[nearest_indices(coords, seed, mask_size)] = True
    return MaskSpec(np.flatnonzero(hit), n, "fixed")


def make_mask(pc: FeaturizedPointCloud, order, strategy: str, rng: np.random.Generator,
              ratio_range=(0.2, 0.5), block_range=(0.02, 0.08), fixed_size: int = 32) -> MaskSpec:
    """Dispatch used by pretraining; the masked fraction is drawn per call."""
    n = len(pc)
    ratio = float(rng.uniform(*ratio_range))
    if strategy == "serialized":
        lo, hi = block_range
        return serialized_percent_mask(order, ratio, (min(lo, ratio), min(hi, ratio)), rng)
    if strategy == "radius":
        return radius_mask(pc, max(1, int(np.floor(ratio * n))), rng)
    if strategy == "fixed":
        return fixed_count_masks(pc, min(fixed_size, n), ratio, rng)
    raise ValueError(f"unknown mask strategy {strategy!r}; expected one of {STRATEGIES}")

"""Sparse voxel tensors, coordinate indexing and convolution rulebooks.

Coordinates are stored as an ``(N, 3)`` int32 array with columns ``(x, y, z)``.
Whenever an ordering over voxels or kernel offsets is needed it is
lexicographic by ``(z, y, x)``, matching the dense layout where ``x`` varies
fastest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DuplicateCoordinate, ShapeMismatch, SupportMismatch

INT32_MIN = np.iinfo(np.int32).min
INT32_MAX = np.iinfo(np.int32).max


def as_coords(coords) -> np.ndarray:
    arr = np.asarray(coords, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int32)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatch(f"coords must be (N, 3), got {arr.shape}")
    if arr.min() < INT32_MIN or arr.max() > INT32_MAX:
        raise ValueError("coordinate outside signed 32-bit range")
    return arr.astype(np.int32)


def zyx_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting coords lexicographically by (z, y, x)."""
    return np.lexsort((coords[:, 0], coords[:, 1], coords[:, 2]))


@dataclass(frozen=True, eq=False)
class SparseTensor:
    """Active voxel coordinates with one feature row per voxel."""

    coords: np.ndarray
    features: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        coords = as_coords(self.coords)
        feats = np.asarray(self.features)
        if feats.ndim == 1:
            feats = feats[:, None]
        if feats.dtype not in (np.float32, np.float64):
            feats = feats.astype(np.float32)
        if feats.shape[0] != coords.shape[0]:
            raise ShapeMismatch(
                f"{coords.shape[0]} coords but {feats.shape[0]} feature rows")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (coords.shape[0],):
                raise ShapeMismatch("labels must have one entry per voxel")
            if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
                raise ValueError("labels must fit in unsigned 16 bits")
            object.__setattr__(self, "labels", labels.astype(np.uint16))

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> "SparseTensor":
        return SparseTensor(self.coords, features, self.labels)

    def permute(self, perm: np.ndarray) -> "SparseTensor":
        labels = None if self.labels is None else self.labels[perm]
        return SparseTensor(self.coords[perm], self.features[perm], labels)

    def check_distinct(self) -> None:
        build_coord_index(self.coords)


class CoordIndex:
    """Map from voxel coordinate to row index.

    Coordinates are packed into int64 keys relative to a padded bounding box and
    looked up with a binary search. A Python dict is used only when the box is
    too large to pack.
    """

    _MARGIN = 2

    def __init__(self, coords):
        coords = as_coords(coords)
        self.size = coords.shape[0]
        self._dict = None
        if self.size == 0:
            self._lo = np.zeros(3, np.int64)
            self._ext = np.ones(3, np.int64)
            self._keys = np.zeros(0, np.int64)
            self._rows = np.zeros(0, np.int64)
            return
        c = coords.astype(np.int64)
        self._lo = c.min(axis=0) - self._MARGIN
        self._ext = c.max(axis=0) + self._MARGIN - self._lo + 1
        if float(np.prod(self._ext.astype(float))) >= 2.0**62:
            self._dict = {}
            for i, t in enumerate(map(tuple, c.tolist())):
                if t in self._dict:
                    raise DuplicateCoordinate(f"duplicate coordinate {t}")
                self._dict[t] = i
            return
        keys = self._pack(c)
        order = np.argsort(keys, kind="stable")
        sk = keys[order]
        dup = np.nonzero(sk[1:] == sk[:-1])[0]
        if dup.size:
            raise DuplicateCoordinate(
                f"duplicate coordinate {tuple(c[order[dup[0]]].tolist())}")
        self._keys = sk
        self._rows = order.astype(np.int64)

    def _pack(self, c: np.ndarray) -> np.ndarray:
        r = c - self._lo
        return (r[:, 2] * self._ext[1] + r[:, 1]) * self._ext[0] + r[:, 0]

    def lookup(self, coord) -> int:
        """Row of a single coordinate; ``KeyError`` when absent."""
        row = int(self.lookup_many(np.asarray([coord]))[0])
        if row < 0:
            raise KeyError(tuple(coord))
        return row

    def lookup_many(self, coords: np.ndarray) -> np.ndarray:
        """Rows for each query coordinate, -1 where not present."""
        q = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if self._dict is not None:
            return np.array([self._dict.get(t, -1) for t in map(tuple, q.tolist())],
                            dtype=np.int64)
        out = np.full(q.shape[0], -1, dtype=np.int64)
        if self.size == 0 or q.shape[0] == 0:
            return out
        r = q - self._lo
        inside = np.all((r >= 0) & (r < self._ext), axis=1)
        keys = self._pack(q[inside])
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, self.size - 1)
        hit = self._keys[pos] == keys
        rows = np.where(hit, self._rows[pos], -1)
        out[inside] = rows
        return out

    def __len__(self) -> int:
        return self.size


def build_coord_index(coords) -> CoordIndex:
    return CoordIndex(coords)


@dataclass(frozen=True, eq=False)
class KernelSpec:
    size: tuple
    stride: int
    offsets: np.ndarray = field(repr=False)

    @property
    def volume(self) -> int:
        return self.offsets.shape[0]


def _offsets(ranges: Sequence[range]) -> np.ndarray:
    # itertools.product varies the last factor fastest: (dz, dy, dx)
    rows = [(dx, dy, dz) for dz, dy, dx in itertools.product(ranges[2], ranges[1], ranges[0])]
    return np.array(rows, dtype=np.int32).reshape(-1, 3)


def submanifold_kernel(size: int = 3) -> KernelSpec:
    if size % 2 != 1:
        raise ValueError("submanifold kernels need an odd size")
    h = size // 2
    r = range(-h, h + 1)
    return KernelSpec((size,) * 3, 1, _offsets([r, r, r]))


def downsample_kernel() -> KernelSpec:
    r = range(0, 2)
    return KernelSpec((2, 2, 2), 2, _offsets([r, r, r]))


@dataclass(frozen=True, eq=False)
class Rulebook:
    """Per-offset ``(in_rows, out_rows)`` pair lists.

    Within one offset every output row occurs at most once, so gathers and
    scatters over a single offset never collide.
    """

    kind: str
    kernel: KernelSpec
    in_rows: tuple
    out_rows: tuple
    in_count: int
    out_count: int

    @property
    def num_pairs(self) -> int:
        return sum(len(r) for r in self.in_rows)

    def pair_set(self) -> set:
        return {(k, int(i), int(o))
                for k, (ir, orr) in enumerate(zip(self.in_rows, self.out_rows))
                for i, o in zip(ir, orr)}

    def offset_index(self, delta) -> int:
        hit = np.nonzero(np.all(self.kernel.offsets == np.asarray(delta), axis=1))[0]
        if hit.size == 0:
            raise KeyError(delta)
        return int(hit[0])


def _sorted_pairs(in_rows: np.ndarray, out_rows: np.ndarray):
    order = np.lexsort((in_rows, out_rows))
    return in_rows[order].astype(np.int64), out_rows[order].astype(np.int64)


def build_rulebook_subm(coords, index: Optional[CoordIndex] = None,
                        kernel: Optional[KernelSpec] = None) -> Rulebook:
    """Neighbour pairs for a support-preserving convolution."""
    coords = as_coords(coords)
    kernel = kernel or submanifold_kernel()
    if kernel.stride != 1 or any(s % 2 == 0 for s in kernel.size):
        raise ValueError("submanifold rulebook needs stride 1 and odd kernel")
    index = index if index is not None else build_coord_index(coords)
    if len(index) != coords.shape[0]:
        raise ShapeMismatch("index does not match coords")
    n = coords.shape[0]
    rows = np.arange(n, dtype=np.int64)
    c64 = coords.astype(np.int64)
    ins, outs = [], []
    for delta in kernel.offsets:
        nbr = index.lookup_many(c64 + delta)
        hit = nbr >= 0
        i, o = _sorted_pairs(nbr[hit], rows[hit])
        ins.append(i)
        outs.append(o)
    return Rulebook("subm", kernel, tuple(ins), tuple(outs), n, n)


def build_downsample(coords, kernel: Optional[KernelSpec] = None):
    """Coarse support ``floor(c / 2)`` and the stride-2 rulebook into it."""
    coords = as_coords(coords)
    kernel = kernel or downsample_kernel()
    if kernel.stride != 2 or kernel.size != (2, 2, 2):
        raise ValueError("downsample needs a 2^3 kernel with stride 2")
    n = coords.shape[0]
    if n == 0:
        empty = tuple(np.zeros(0, np.int64) for _ in range(kernel.volume))
        return np.zeros((0, 3), np.int32), Rulebook("down", kernel, empty, empty, 0, 0)
    c = coords.astype(np.int64)
    coarse = np.floor_divide(c, 2)
    delta = c - 2 * coarse
    uniq_zyx, inverse = np.unique(coarse[:, ::-1], axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    coarse_coords = uniq_zyx[:, ::-1].astype(np.int32)
    k_of = delta[:, 2] * 4 + delta[:, 1] * 2 + delta[:, 0]
    ins, outs = [], []
    fine_rows = np.arange(n, dtype=np.int64)
    for k in range(kernel.volume):
        sel = k_of == k
        i, o = _sorted_pairs(fine_rows[sel], inverse[sel])
        ins.append(i)
        outs.append(o)
    rb = Rulebook("down", kernel, tuple(ins), tuple(outs), n, coarse_coords.shape[0])
    return coarse_coords, rb


def transpose_rulebook(rb: Rulebook, fine_coords) -> Rulebook:
    """Swap input and output roles, targeting the stored fine support."""
    fine_coords = as_coords(fine_coords)
    if fine_coords.shape[0] != rb.in_count:
        raise ShapeMismatch(
            f"rulebook was built over {rb.in_count} rows, got {fine_coords.shape[0]}")
    kind = {"down": "up", "up": "down"}.get(rb.kind, rb.kind)
    ins, outs = [], []
    for i, o in zip(rb.in_rows, rb.out_rows):
        ni, no = _sorted_pairs(o, i)
        ins.append(ni)
        outs.append(no)
    return Rulebook(kind, rb.kernel, tuple(ins), tuple(outs), rb.out_count, rb.in_count)


def require_same_support(a: SparseTensor, b: SparseTensor) -> None:
    if a.coords.shape != b.coords.shape or not np.array_equal(a.coords, b.coords):
        raise SupportMismatch("coordinate lists differ")

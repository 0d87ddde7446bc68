"""Synthetic CT phantoms with labeled bone-like primitives.

Three primitive kinds are rasterized into a soft-tissue body surrounded by air:

* ``ellipsoid``: solid axis-aligned blob with per-axis radii;
* ``tube``: straight capsule of fixed radius along a random direction;
* ``stack``: column of discs along z separated by gaps.

Bone HU is drawn per voxel from a clipped normal. Additive noise is truncated
at three standard deviations, so bone never drops below ``bone_clip[0] - 3 *
noise_std``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import InvalidConfig, OccupancyExceeded

KINDS = ("ellipsoid", "tube", "stack")


@dataclass
class PrimitiveSpec:
    kind: str
    class_id: int
    count: int = 1
    radius: Tuple[float, float] = (2.0, 4.0)
    length: Tuple[float, float] = (10.0, 20.0)
    thickness: int = 3
    gap: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown primitive kind {self.kind!r}")
        self.radius = tuple(float(r) for r in self.radius)
        self.length = tuple(float(v) for v in self.length)


def _default_primitives() -> List[PrimitiveSpec]:
    return [
        PrimitiveSpec("ellipsoid", 2, count=2, radius=(4.0, 7.0)),
        PrimitiveSpec("stack", 3, count=1, radius=(3.0, 4.0), length=(5, 8), thickness=3, gap=2),
        PrimitiveSpec("tube", 1, count=5, radius=(1.2, 1.8), length=(20.0, 40.0)),
    ]


@dataclass
class PhantomSpec:
    shape: Tuple[int, int, int] = (64, 64, 64)
    num_classes: int = 4
    primitives: List[PrimitiveSpec] = field(default_factory=_default_primitives)
    bone_mean: float = 700.0
    bone_std: float = 150.0
    bone_clip: Tuple[float, float] = (250.0, 1500.0)
    soft_tissue_hu: float = 40.0
    air_hu: float = -1000.0
    noise_std: float = 15.0
    max_occupancy: float = 0.05
    hu_lo: float = 200.0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.bone_clip = tuple(float(v) for v in self.bone_clip)
        self.primitives = [p if isinstance(p, PrimitiveSpec) else PrimitiveSpec(**p)
                           for p in self.primitives]
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise InvalidConfig("shape must be three positive extents")
        if any(not 0 <= p.class_id < self.num_classes for p in self.primitives):
            raise InvalidConfig("primitive class id outside [0, K)")
        for p in self.primitives:
            if p.kind != "tube" and 2 * p.radius[1] + 3 > min(self.shape[:2 if p.kind == "stack" else 3]):
                raise InvalidConfig(f"{p.kind} radius {p.radius[1]} does not fit in {self.shape}")
        margin = 3.0 * self.noise_std
        if self.bone_clip[0] - margin < self.hu_lo:
            raise InvalidConfig("noise could push bone below the HU threshold")
        if self.soft_tissue_hu + margin >= self.hu_lo:
            raise InvalidConfig("noise could push soft tissue above the HU threshold")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)


def _grid(shape_xyz):
    x, y, z = shape_xyz
    zz, yy, xx = np.meshgrid(np.arange(z), np.arange(y), np.arange(x), indexing="ij")
    return xx.astype(np.float64), yy.astype(np.float64), zz.astype(np.float64)


def _ellipsoid(g, p, rng, shape):
    r = rng.uniform(*p.radius, size=3)
    c = [rng.uniform(ri + 1, s - ri - 2) for ri, s in zip(r, shape)]
    d = sum(((gi - ci) / ri) ** 2 for gi, ci, ri in zip(g, c, r))
    return d <= 1.0


def _tube(g, p, rng, shape):
    r = rng.uniform(*p.radius)
    length = rng.uniform(*p.length)
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    half = 0.5 * length * np.abs(v)
    c = np.array([rng.uniform(min(h + r + 1, s / 2), max(s - h - r - 2, s / 2))
                  for h, s in zip(half, shape)])
    a = c - 0.5 * length * v
    rel = [gi - ai for gi, ai in zip(g, a)]
    t = np.clip(sum(ri * vi for ri, vi in zip(rel, v)), 0.0, length)
    d2 = sum((ri - t * vi) ** 2 for ri, vi in zip(rel, v))
    return d2 <= r * r


def _stack(g, p, rng, shape):
    r = rng.uniform(*p.radius)
    n = int(rng.integers(int(p.length[0]), int(p.length[1]) + 1))
    period = p.thickness + p.gap
    height = n * period - p.gap
    cx = rng.uniform(r + 1, shape[0] - r - 2)
    cy = rng.uniform(r + 1, shape[1] - r - 2)
    z0 = int(rng.integers(0, max(shape[2] - height, 0) + 1))
    gx, gy, gz = g
    rel = gz - z0
    in_disc = (rel >= 0) & (rel < height) & (np.mod(rel, period) < p.thickness)
    return in_disc & ((gx - cx) ** 2 + (gy - cy) ** 2 <= r * r)


_RASTER = {"ellipsoid": _ellipsoid, "tube": _tube, "stack": _stack}


def generate_phantom(spec: PhantomSpec, seed: int):
    """Return ``(hu, labels)`` as int16 / uint16 arrays indexed ``[z, y, x]``.

    Primitives are placed in spec order; a placement that would touch already
    drawn bone is redrawn a few times before later primitives overwrite.
    """
    rng = np.random.default_rng(seed)
    shape = spec.shape
    g = _grid(shape)
    labels = np.zeros(shape[::-1], dtype=np.uint16)
    bone = np.zeros(shape[::-1], dtype=bool)
    for p in spec.primitives:
        for _ in range(p.count):
            for _attempt in range(50):
                m = _RASTER[p.kind](g, p, rng, shape)
                grown = m.copy()
                for ax in range(3):
                    grown |= np.roll(m, 1, ax) | np.roll(m, -1, ax)
                if not (grown & bone).any():
                    break
            labels[m] = p.class_id
            bone |= m
    occupancy = bone.mean()
    if occupancy > spec.max_occupancy:
        raise OccupancyExceeded(f"bone occupancy {occupancy:.4f} exceeds {spec.max_occupancy}")

    cx, cy = (shape[0] - 1) / 2, (shape[1] - 1) / 2
    body = ((g[0] - cx) / (0.48 * shape[0])) ** 2 + ((g[1] - cy) / (0.48 * shape[1])) ** 2 <= 1.0
    hu = np.where(body, spec.soft_tissue_hu, spec.air_hu)
    bone_hu = np.clip(rng.normal(spec.bone_mean, spec.bone_std, size=hu.shape), *spec.bone_clip)
    hu = np.where(bone, bone_hu, hu)
    if spec.noise_std > 0:
        lim = 3.0 * spec.noise_std
        hu = hu + np.clip(rng.normal(0.0, spec.noise_std, size=hu.shape), -lim, lim)
    return np.rint(hu).astype(np.int16), labels

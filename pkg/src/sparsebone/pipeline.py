"""Volume preprocessing, window sampling, Gaussian-decay fusion and prediction.

Dense volumes are numpy arrays indexed ``[z, y, x]``; sparse coordinates are
``(x, y, z)`` columns. ``extent`` always means the per-axis size in ``(x, y, z)``
order.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import DegenerateStats, InvalidConfig, UncoveredVoxel
from .network import Checkpoint, network_forward
from .objective import softmax
from .voxgrid import SparseTensor

WORKERS_ENV = "BONNET_NUM_WORKERS"


@dataclass
class DatasetStats:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DegenerateStats("sigma must be positive")


@dataclass
class SamplingConfig:
    window: int = 128
    rho: float = 0.33

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidConfig("rho must lie in [0, 1]")
        if self.window < 8:
            raise InvalidConfig("window edge must be at least 8")


@dataclass
class FusionConfig:
    overlap: float = 0.5
    decay: float = 0.5
    hu_lo: float = 200.0
    hu_hi: float = 3000.0

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise InvalidConfig("overlap must lie in [0, 1)")
        if not self.decay > 0:
            raise InvalidConfig("decay must be positive")
        if not self.hu_lo < self.hu_hi:
            raise InvalidConfig("hu_lo must be below hu_hi")


@dataclass(frozen=True)
class WindowPlacement:
    origin: tuple
    edge: tuple

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin, float) + np.asarray(self.edge, float) / 2.0

    def contains(self, coords: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.origin)
        hi = lo + np.asarray(self.edge)
        return np.all((coords >= lo) & (coords < hi), axis=1)


def extent_of(volume: np.ndarray) -> tuple:
    return tuple(int(s) for s in volume.shape[::-1])


# -- preprocessing -------------------------------------------------------------

def hu_threshold_to_sparse(volume: np.ndarray, cfg: FusionConfig = FusionConfig(),
                           labels: Optional[np.ndarray] = None) -> SparseTensor:
    """Voxels with ``hu_lo <= HU <= hu_hi`` in z-major scan order, feature = HU."""
    volume = np.asarray(volume)
    keep = (volume >= cfg.hu_lo) & (volume <= cfg.hu_hi)
    z, y, x = np.nonzero(keep)
    coords = np.stack([x, y, z], axis=1)
    feats = volume[z, y, x].astype(np.float32)
    lab = None if labels is None else np.asarray(labels)[z, y, x]
    return SparseTensor(coords, feats, lab)


def compute_dataset_stats(volumes: Sequence[np.ndarray],
                          cfg: FusionConfig = FusionConfig()) -> DatasetStats:
    vals = [np.asarray(v, dtype=np.float64)[(np.asarray(v) >= cfg.hu_lo) & (np.asarray(v) <= cfg.hu_hi)]
            for v in volumes]
    vals = np.concatenate(vals) if vals else np.zeros(0)
    if vals.size == 0:
        raise DegenerateStats("no voxel survives thresholding")
    mu = float(vals.mean())
    sigma = float(np.sqrt(((vals - mu) ** 2).mean()))
    if sigma < 1e-6:
        raise DegenerateStats(f"sigma {sigma} too small")
    return DatasetStats(mu, sigma)


def zscore(st: SparseTensor, stats: DatasetStats, dtype=np.float32) -> SparseTensor:
    f = (st.features.astype(np.float64) - stats.mu) / stats.sigma
    return st.with_features(f.astype(dtype))


# -- windows -------------------------------------------------------------------

def crop_window(st: SparseTensor, placement: WindowPlacement):
    """Voxels inside ``placement`` in local coordinates, plus their global rows."""
    rows = np.nonzero(placement.contains(st.coords))[0]
    local = st.coords[rows] - np.asarray(placement.origin, dtype=np.int32)
    labels = None if st.labels is None else st.labels[rows]
    return SparseTensor(local, st.features[rows], labels), rows


def _clamp_placement(origin, extent, window) -> WindowPlacement:
    edge = tuple(min(window, e) for e in extent)
    origin = tuple(int(min(max(o, 0), e - w)) for o, e, w in zip(origin, extent, edge))
    return WindowPlacement(origin, edge)


def sample_training_window(st: SparseTensor, extent: Sequence[int], cfg: SamplingConfig,
                           rng: np.random.Generator):
    """Draw one training window; returns ``(window, placement)``.

    With probability ``rho`` the window is centred on a random foreground
    voxel, otherwise its origin is uniform over valid origins.
    """
    extent = tuple(int(e) for e in extent)
    w = cfg.window
    fg = None
    if st.labels is not None:
        fg = np.nonzero(st.labels > 0)[0]
    use_fg = rng.random() < cfg.rho
    if use_fg and fg is not None and fg.size:
        center = st.coords[fg[rng.integers(fg.size)]]
        placement = _clamp_placement([int(c) - w // 2 for c in center], extent, w)
    else:
        origin = [int(rng.integers(0, max(e - w, 0) + 1)) for e in extent]
        placement = _clamp_placement(origin, extent, w)
    window, _ = crop_window(st, placement)
    return window, placement


def _axis_origins(extent: int, edge: int, overlap: float) -> List[int]:
    if extent <= edge:
        return [0]
    stride = max(1, int(math.floor(edge * (1.0 - overlap) + 0.5)))
    origins = list(range(0, extent - edge + 1, stride))
    if origins[-1] + edge < extent:
        origins.append(extent - edge)
    return origins


def enumerate_inference_windows(extent: Sequence[int], cfg: FusionConfig,
                                window: int) -> List[WindowPlacement]:
    """Overlapping placements covering the volume, sorted by origin (z, y, x)."""
    ox, oy, oz = (_axis_origins(int(e), window, cfg.overlap) for e in extent)
    edge = tuple(min(window, int(e)) for e in extent)
    return [WindowPlacement((x, y, z), edge) for z in oz for y in oy for x in ox]


def gaussian_weight(x, placement: WindowPlacement, decay: float = 0.5) -> np.ndarray:
    """Per-axis Gaussian decay from the window centre, 1 at the centre."""
    x = np.asarray(x, dtype=np.float64)
    d = (x - placement.center) / (decay * np.asarray(placement.edge, float))
    return np.exp(-0.5 * np.sum(d * d, axis=-1))


def fuse_predictions(window_probs: Sequence[np.ndarray], window_rows: Sequence[np.ndarray],
                     placements: Sequence[WindowPlacement], coords: np.ndarray,
                     num_classes: int, decay: float = 0.5, weight_scale: float = 1.0):
    """Gaussian-weighted sum of window scores followed by argmax.

    Windows are accumulated in the given order, so the result does not depend
    on how the windows were computed. Ties resolve to the smallest class id.
    """
    n = coords.shape[0]
    fused = np.zeros((n, num_classes), dtype=np.float64)
    covered = np.zeros(n, dtype=bool)
    for probs, rows, pl in zip(window_probs, window_rows, placements):
        if rows.size == 0:
            continue
        a = gaussian_weight(coords[rows], pl, decay) * weight_scale
        fused[rows] += a[:, None] * probs.astype(np.float64)
        covered[rows] = True
    if not covered.all():
        raise UncoveredVoxel(f"{int((~covered).sum())} active voxels lie in no window")
    return fused, np.argmax(fused, axis=1).astype(np.uint16)


def resolve_workers(workers: Optional[int] = None) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    return max(1, int(workers))


ForwardFn = Callable[[SparseTensor, Checkpoint], np.ndarray]


def sparse_forward(window: SparseTensor, ckpt: Checkpoint) -> np.ndarray:
    return network_forward(window, ckpt.params, ckpt.config)


@dataclass
class Prediction:
    coords: np.ndarray
    fused: np.ndarray
    labels: np.ndarray
    timings: dict = field(default_factory=dict)
    num_windows: int = 0


def predict_sparse(ckpt: Checkpoint, volume: np.ndarray, fusion: FusionConfig, window: int,
                   workers: Optional[int] = None, forward: ForwardFn = sparse_forward,
                   dtype=None) -> Prediction:
    """Threshold, standardize, run every window and fuse onto the active voxels."""
    t0 = time.perf_counter()
    stats = DatasetStats(ckpt.mu, ckpt.sigma)
    dtype = dtype or ckpt.params["head.w2"].dtype
    st = zscore(hu_threshold_to_sparse(volume, fusion), stats, dtype)
    placements = enumerate_inference_windows(extent_of(volume), fusion, window)
    crops = [crop_window(st, pl) for pl in placements]
    jobs = [(w, r, pl) for (w, r), pl in zip(crops, placements) if r.size]
    t1 = time.perf_counter()

    def run(job):
        return softmax(forward(job[0], ckpt))

    n_workers = resolve_workers(workers)
    if n_workers == 1 or len(jobs) <= 1:
        probs = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            probs = list(pool.map(run, jobs))
    t2 = time.perf_counter()
    k = ckpt.config.num_classes
    fused, labels = fuse_predictions(probs, [j[1] for j in jobs], [j[2] for j in jobs],
                                     st.coords, k, fusion.decay)
    t3 = time.perf_counter()
    return Prediction(st.coords, fused, labels,
                      {"preprocess": t1 - t0, "forward": t2 - t1, "fuse": t3 - t2},
                      num_windows=len(jobs))


def scatter_labels(pred: Prediction, volume_shape: Sequence[int]) -> np.ndarray:
    out = np.zeros(tuple(volume_shape), dtype=np.uint16)
    c = pred.coords
    out[c[:, 2], c[:, 1], c[:, 0]] = pred.labels
    return out


def predict_volume(ckpt: Checkpoint, volume: np.ndarray, fusion: FusionConfig, window: int,
                   workers: Optional[int] = None, forward: ForwardFn = sparse_forward):
    """Dense label volume (background 0 below threshold) and stage timings."""
    pred = predict_sparse(ckpt, volume, fusion, window, workers, forward)
    return scatter_labels(pred, np.shape(volume)), pred.timings

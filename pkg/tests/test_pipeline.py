import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsebone.errors import DegenerateStats, InvalidConfig, UncoveredVoxel
from sparsebone.network import Checkpoint, UNetConfig, init_network, network_forward
from sparsebone.objective import softmax
from sparsebone.pipeline import (DatasetStats, FusionConfig, SamplingConfig, WindowPlacement,
                                 compute_dataset_stats, crop_window, enumerate_inference_windows,
                                 extent_of, fuse_predictions, gaussian_weight,
                                 hu_threshold_to_sparse, predict_sparse, predict_volume,
                                 sample_training_window, zscore)
from sparsebone.phantom import PhantomSpec, generate_phantom
from sparsebone.voxgrid import SparseTensor

FUSION = FusionConfig()


def test_threshold_keeps_inclusive_range():
    vol = np.array([100, 250, 3500], dtype=np.int16).reshape(1, 1, 3)
    st_ = hu_threshold_to_sparse(vol)
    assert st_.coords.tolist() == [[1, 0, 0]]
    assert st_.features[:, 0].tolist() == [250.0]
    edges = np.array([199, 200, 3000, 3001], dtype=np.int16).reshape(1, 1, 4)
    assert hu_threshold_to_sparse(edges).features[:, 0].tolist() == [200.0, 3000.0]


def test_threshold_all_air():
    assert len(hu_threshold_to_sparse(np.full((4, 4, 4), -1000, np.int16))) == 0


@given(st.integers(0, 2**32 - 1))
def test_threshold_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    vol = rng.integers(-1000, 3500, size=(8, 8, 8)).astype(np.int16)
    st_ = hu_threshold_to_sparse(vol)
    expected = [(x, y, z) for z in range(8) for y in range(8) for x in range(8)
                if 200 <= vol[z, y, x] <= 3000]
    assert [tuple(c) for c in st_.coords.tolist()] == expected  # z-major scan order
    # thresholding a reconstruction of the retained voxels is idempotent
    recon = np.full_like(vol, -1000)
    recon[st_.coords[:, 2], st_.coords[:, 1], st_.coords[:, 0]] = st_.features[:, 0]
    again = hu_threshold_to_sparse(recon)
    assert np.array_equal(again.coords, st_.coords)
    assert np.array_equal(again.features, st_.features)


def test_dataset_stats():
    vol = np.full((2, 2, 2), -1000, np.int16)
    vol[0, 0, 0], vol[1, 1, 1] = 200, 400
    s = compute_dataset_stats([vol])
    assert (s.mu, s.sigma) == (300.0, 100.0)
    noisy = vol.copy()
    noisy[0, 1, 0], noisy[1, 0, 1] = 150, -20
    assert compute_dataset_stats([noisy]) == s
    with pytest.raises(DegenerateStats):
        compute_dataset_stats([np.full((2, 2, 2), 300, np.int16)])
    with pytest.raises(DegenerateStats):
        compute_dataset_stats([np.full((2, 2, 2), 0, np.int16)])


def test_zscore():
    s = DatasetStats(300.0, 100.0)
    st_ = SparseTensor([(0, 0, 0), (1, 0, 0)], [300.0, 500.0])
    z = zscore(st_, s)
    assert z.features[:, 0].tolist() == [0.0, 2.0]
    np.testing.assert_allclose(z.features[:, 0] * 100.0 + 300.0, [300.0, 500.0], atol=1e-4)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        FusionConfig(overlap=1.0)
    with pytest.raises(InvalidConfig):
        FusionConfig(decay=0.0)
    with pytest.raises(InvalidConfig):
        FusionConfig(hu_lo=3000, hu_hi=200)
    with pytest.raises(InvalidConfig):
        SamplingConfig(rho=1.5)
    with pytest.raises(InvalidConfig):
        SamplingConfig(window=4)


# -- windows -------------------------------------------------------------------

def _origins(pls, axis=0):
    return sorted({p.origin[axis] for p in pls})


def test_window_enumeration_examples():
    pls = enumerate_inference_windows((128, 128, 128), FUSION, 128)
    assert [p.origin for p in pls] == [(0, 0, 0)]
    pls = enumerate_inference_windows((192, 192, 192), FUSION, 128)
    assert len(pls) == 8 and _origins(pls) == [0, 64]
    pls = enumerate_inference_windows((130, 130, 130), FUSION, 128)
    assert _origins(pls) == [0, 2]
    pls = enumerate_inference_windows((20, 300, 64), FUSION, 64)
    assert pls[0].edge == (20, 64, 64)
    zyx = [p.origin[::-1] for p in pls]
    assert zyx == sorted(zyx)


@given(st.tuples(*[st.integers(8, 90)] * 3), st.sampled_from([8, 16, 32]),
       st.sampled_from([0.0, 0.25, 0.5, 0.75]))
def test_windows_cover_every_voxel(extent, window, overlap):
    pls = enumerate_inference_windows(extent, FusionConfig(overlap=overlap), window)
    for axis in range(3):
        covered = np.zeros(extent[axis], bool)
        for o in _origins(pls, axis):
            covered[o:o + min(window, extent[axis])] = True
        assert covered.all()
        assert max(_origins(pls, axis)) + min(window, extent[axis]) <= extent[axis]


def test_gaussian_weight_examples():
    pl = WindowPlacement((0, 0, 0), (32, 32, 32))
    assert gaussian_weight(pl.center, pl) == 1.0
    x = pl.center + np.array([0.5 * 32, 0, 0])
    assert abs(gaussian_weight(x, pl, 0.5) - math.exp(-0.5)) <= 1e-12
    assert abs(gaussian_weight(x, pl, 0.5) - 0.606531) <= 1e-6
    corner = gaussian_weight((0, 0, 0), pl, 0.5)
    assert abs(corner - math.exp(-1.5)) <= 1e-9
    assert abs(corner - 0.223130) <= 1e-6


def test_fusion_hand_example():
    coords = np.array([[4, 4, 4]])
    a = WindowPlacement((0, 0, 0), (8, 8, 8))
    b = WindowPlacement((0, 0, 0), (8, 8, 8))
    fused, labels = fuse_predictions([np.array([[0.6, 0.4]]), np.array([[0.3, 0.7]])],
                                     [np.array([0]), np.array([0])], [a, b], coords, 2)
    np.testing.assert_allclose(fused, [[0.9, 1.1]])
    assert labels.tolist() == [1]


def test_fusion_ties_and_coverage():
    coords = np.array([[0, 0, 0], [1, 0, 0]])
    pl = WindowPlacement((0, 0, 0), (1, 1, 1))
    with pytest.raises(UncoveredVoxel):
        fuse_predictions([np.array([[0.5, 0.5]])], [np.array([0])], [pl], coords, 2)
    _, labels = fuse_predictions([np.array([[0.5, 0.5], [0.2, 0.8]])], [np.array([0, 1])],
                                 [WindowPlacement((0, 0, 0), (2, 1, 1))], coords, 2)
    assert labels.tolist() == [0, 1]


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_fusion_invariants(seed, scale):
    rng = np.random.default_rng(seed)
    extent = (20, 20, 20)
    pls = enumerate_inference_windows(extent, FUSION, 12)
    coords = np.unique(rng.integers(0, 20, size=(80, 3)), axis=0)
    probs, rows = [], []
    for pl in pls:
        r = np.nonzero(pl.contains(coords))[0]
        rows.append(r)
        probs.append(softmax(rng.normal(size=(len(r), 3))).astype(np.float32))
    fused, labels = fuse_predictions(probs, rows, pls, coords, 3)
    assert np.all(fused >= 0)
    _, scaled = fuse_predictions(probs, rows, pls, coords, 3, weight_scale=scale)
    assert np.array_equal(labels, scaled)
    norm = fused / fused.sum(axis=1, keepdims=True)
    assert np.array_equal(np.argmax(norm, axis=1), labels)


# -- sampling ------------------------------------------------------------------

def _labeled(rng, extent=(64, 64, 64), n=300, fg_frac=0.5):
    c = np.unique(np.stack([rng.integers(0, e, n) for e in extent], axis=1), axis=0)
    labels = (rng.random(len(c)) < fg_frac).astype(np.uint16)
    return SparseTensor(c, rng.normal(size=(len(c), 1)), labels)


def test_sample_small_volume_returns_everything(rng):
    st_ = _labeled(rng, (10, 12, 9), 50)
    w, pl = sample_training_window(st_, (10, 12, 9), SamplingConfig(window=32), rng)
    assert pl.origin == (0, 0, 0)
    assert len(w) == len(st_)
    assert np.array_equal(w.labels, st_.labels)


def test_sample_local_coordinates(rng):
    st_ = _labeled(rng)
    for _ in range(50):
        w, pl = sample_training_window(st_, (64, 64, 64), SamplingConfig(window=16), rng)
        assert w.coords.min(initial=0) >= 0 and w.coords.max(initial=0) < 16
        back = w.coords + np.asarray(pl.origin)
        idx = {tuple(c): i for i, c in enumerate(st_.coords.tolist())}
        for c, lab in zip(back.tolist(), w.labels):
            assert st_.labels[idx[tuple(c)]] == lab


def test_sample_no_foreground_falls_back(rng):
    st_ = _labeled(rng, fg_frac=0.0)
    draws = [sample_training_window(st_, (64, 64, 64), SamplingConfig(window=16, rho=1.0),
                                    np.random.default_rng(s))[1].origin for s in range(200)]
    assert len(set(draws)) > 100


def test_sample_foreground_priority():
    spec = PhantomSpec(shape=(64, 64, 64), num_classes=2, primitives=[
        {"kind": "ellipsoid", "class_id": 1, "count": 1, "radius": (8.0, 8.8)}])
    hu, labels = generate_phantom(spec, 3)
    frac = (labels > 0).mean()
    assert 0.005 < frac <= 0.012
    st_ = hu_threshold_to_sparse(hu, labels=labels)
    rng = np.random.default_rng(2024)
    cfg = SamplingConfig(window=16, rho=0.33)
    hits = sum(bool((sample_training_window(st_, (64, 64, 64), cfg, rng)[0].labels > 0).any())
               for _ in range(2000))
    assert hits / 2000 >= 0.30


# -- prediction ----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_model():
    cfg = UNetConfig(levels=3, base_widths=(2, 4, 8), num_classes=3)
    return Checkpoint(cfg, init_network(cfg, 11), mu=700.0, sigma=150.0)


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(PhantomSpec(shape=(40, 36, 44), num_classes=3, primitives=[
        {"kind": "ellipsoid", "class_id": 1, "count": 2, "radius": (3, 6)},
        {"kind": "tube", "class_id": 2, "count": 3, "radius": (1.2, 1.8), "length": (15, 25)}]), 5)


def test_single_window_equals_plain_forward(tiny_model, phantom):
    hu, _ = phantom
    pred = predict_sparse(tiny_model, hu, FUSION, window=64)
    assert pred.num_windows == 1
    st_ = zscore(hu_threshold_to_sparse(hu), DatasetStats(700.0, 150.0))
    logits = network_forward(st_, tiny_model.params, tiny_model.config)
    assert np.array_equal(pred.labels, np.argmax(logits, axis=1))


def test_predict_volume_workers_bit_identical(tiny_model, phantom):
    hu, _ = phantom
    ref, _ = predict_volume(tiny_model, hu, FUSION, 16, workers=1)
    for w in (2, 8):
        out, _ = predict_volume(tiny_model, hu, FUSION, 16, workers=w)
        assert np.array_equal(out, ref)
    pa = predict_sparse(tiny_model, hu, FUSION, 16, workers=1)
    pb = predict_sparse(tiny_model, hu, FUSION, 16, workers=8)
    assert pa.fused.tobytes() == pb.fused.tobytes()


def test_predict_all_air(tiny_model):
    out, timings = predict_volume(tiny_model, np.full((8, 9, 10), -1000, np.int16), FUSION, 16)
    assert out.shape == (8, 9, 10) and not out.any() and out.dtype == np.uint16
    assert all(v >= 0 for v in timings.values())


def test_predict_background_below_threshold(tiny_model, phantom):
    hu, _ = phantom
    out, _ = predict_volume(tiny_model, hu, FUSION, 16)
    assert not out[hu < 200].any()
    assert out.max() < 3


def test_crop_window_rows(phantom):
    hu, labels = phantom
    st_ = hu_threshold_to_sparse(hu, labels=labels)
    pl = WindowPlacement((8, 4, 10), (16, 16, 16))
    w, rows = crop_window(st_, pl)
    assert np.array_equal(w.coords + np.array([8, 4, 10]), st_.coords[rows])
    assert extent_of(hu) == (40, 36, 44)

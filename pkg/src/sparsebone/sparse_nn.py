"""Sparse U-Net layers: forward passes and their exact gradients.

Every layer is a pure function of ``(tensor, rulebook, params)``. Forward
functions take ``return_cache=True`` to also return the :class:`LayerCache`
that :func:`layer_backward` consumes.

Convolution weights are stored as ``(|K|, C_in, C_out)`` so that one output row
is ``bias + sum_pairs in_row @ W[k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyTensor, MissingCache, ShapeMismatch
from .voxgrid import Rulebook, SparseTensor, require_same_support

LEAKY_SLOPE = 0.01


@dataclass
class ConvParams:
    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weights.ndim != 3:
            raise ShapeMismatch("conv weights must be (|K|, C_in, C_out)")
        if self.bias is not None and self.bias.shape != (self.weights.shape[2],):
            raise ShapeMismatch("bias length must equal C_out")

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]


@dataclass
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeMismatch("gamma and beta must be equal-length vectors")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass
class HeadParams:
    """Two affine maps with a LeakyReLU between them."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class LayerCache:
    kind: str
    saved: dict = field(default_factory=dict)


@dataclass
class LayerGrads:
    d_input: np.ndarray
    params: dict = field(default_factory=dict)
    d_skip: Optional[np.ndarray] = None


# -- convolutions ------------------------------------------------------------

def conv_apply(feats: np.ndarray, rb: Rulebook, weights: np.ndarray,
               bias: Optional[np.ndarray] = None) -> np.ndarray:
    if feats.shape[0] != rb.in_count:
        raise ShapeMismatch(f"rulebook expects {rb.in_count} rows, got {feats.shape[0]}")
    if feats.shape[1] != weights.shape[1]:
        raise ShapeMismatch(f"weights expect C_in={weights.shape[1]}, got {feats.shape[1]}")
    if weights.shape[0] != rb.kernel.volume:
        raise ShapeMismatch("weight offset count does not match kernel")
    dtype = np.result_type(feats.dtype, weights.dtype)
    out = np.zeros((rb.out_count, weights.shape[2]), dtype=dtype)
    # fixed offset order gives a fixed summation order per output row
    for k in range(rb.kernel.volume):
        i, o = rb.in_rows[k], rb.out_rows[k]
        if i.size:
            out[o] += feats[i] @ weights[k]
    if bias is not None:
        out += bias
    return out


def conv_grads(feats: np.ndarray, rb: Rulebook, weights: np.ndarray,
               upstream: np.ndarray):
    d_in = np.zeros_like(feats, dtype=np.result_type(feats.dtype, upstream.dtype))
    d_w = np.zeros_like(weights, dtype=d_in.dtype)
    for k in range(rb.kernel.volume):
        i, o = rb.in_rows[k], rb.out_rows[k]
        if i.size:
            g = upstream[o]
            d_w[k] = feats[i].T @ g
            d_in[i] += g @ weights[k].T
    return d_in, d_w


def _conv_forward(kind, st, rb, p: ConvParams, out_coords, return_cache):
    out = conv_apply(st.features, rb, p.weights, p.bias)
    res = SparseTensor(out_coords, out)
    if not return_cache:
        return res
    cache = LayerCache(kind, {"x": st.features, "rb": rb, "weights": p.weights,
                              "has_bias": p.bias is not None})
    return res, cache


def subm_conv_forward(st: SparseTensor, rb: Rulebook, p: ConvParams,
                      return_cache: bool = False):
    if rb.in_count != len(st) or rb.out_count != len(st):
        raise ShapeMismatch("submanifold rulebook does not match tensor")
    return _conv_forward("subm", st, rb, p, st.coords, return_cache)


def strided_conv_forward(st: SparseTensor, rb: Rulebook, p: ConvParams,
                         coarse_coords: np.ndarray, return_cache: bool = False):
    if len(coarse_coords) != rb.out_count:
        raise ShapeMismatch("coarse coords do not match rulebook")
    return _conv_forward("strided", st, rb, p, coarse_coords, return_cache)


def inverse_conv_forward(st_coarse: SparseTensor, rb_t: Rulebook, p: ConvParams,
                         fine_coords: np.ndarray, return_cache: bool = False):
    if len(fine_coords) != rb_t.out_count:
        raise ShapeMismatch("fine coords do not match transposed rulebook")
    return _conv_forward("inverse", st_coarse, rb_t, p, fine_coords, return_cache)


# -- normalization and activation -------------------------------------------

def sparse_instance_norm(st: SparseTensor, p: NormParams, return_cache: bool = False):
    x = st.features
    n = x.shape[0]
    if n == 0:
        raise EmptyTensor("instance norm over an empty tensor")
    if x.shape[1] != p.gamma.shape[0]:
        raise ShapeMismatch("norm parameters do not match channel count")
    mean = x.mean(axis=0)
    xc = x - mean
    var = (xc * xc).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv_std
    out = st.with_features(xhat * p.gamma + p.beta)
    if not return_cache:
        return out
    return out, LayerCache("norm", {"xhat": xhat, "inv_std": inv_std, "gamma": p.gamma})


def leaky_relu(st: SparseTensor, slope: float = LEAKY_SLOPE, return_cache: bool = False):
    x = st.features
    out = st.with_features(np.where(x >= 0, x, x * slope).astype(x.dtype, copy=False))
    if not return_cache:
        return out
    return out, LayerCache("leaky", {"x": x, "slope": slope})


def concat_skip(decoder: SparseTensor, encoder: SparseTensor, return_cache: bool = False):
    require_same_support(decoder, encoder)
    out = decoder.with_features(np.concatenate([decoder.features, encoder.features], axis=1))
    if not return_cache:
        return out
    return out, LayerCache("concat", {"split": decoder.num_channels})


def mlp_head_forward(st: SparseTensor, p: HeadParams, slope: float = LEAKY_SLOPE,
                     return_cache: bool = False):
    x = st.features
    if x.shape[1] != p.w1.shape[0]:
        raise ShapeMismatch("head input width does not match features")
    z = x @ p.w1 + p.b1
    a = np.where(z >= 0, z, z * slope)
    out = st.with_features(a @ p.w2 + p.b2)
    if not return_cache:
        return out
    return out, LayerCache("head", {"x": x, "z": z, "a": a, "slope": slope,
                                    "w1": p.w1, "w2": p.w2})


# -- backward ----------------------------------------------------------------

def layer_backward(kind: str, cache: Optional[LayerCache], upstream: np.ndarray) -> LayerGrads:
    """Gradients of a scalar loss w.r.t. a layer's input and parameters.

    ``upstream`` holds dL/d(output) with one row per output voxel.
    """
    if cache is None:
        raise MissingCache(f"no cache for {kind} layer")
    if cache.kind != kind:
        raise MissingCache(f"cache belongs to a {cache.kind} layer, not {kind}")
    s = cache.saved
    if kind in ("subm", "strided", "inverse"):
        d_in, d_w = conv_grads(s["x"], s["rb"], s["weights"], upstream)
        grads = {"weights": d_w}
        if s["has_bias"]:
            grads["bias"] = upstream.sum(axis=0)
        return LayerGrads(d_in, grads)
    if kind == "norm":
        xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
        n = xhat.shape[0]
        d_beta = upstream.sum(axis=0)
        d_gamma = (upstream * xhat).sum(axis=0)
        dxhat = upstream * gamma
        d_in = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                - xhat * (dxhat * xhat).sum(axis=0))
        return LayerGrads(d_in, {"gamma": d_gamma, "beta": d_beta})
    if kind == "leaky":
        x = s["x"]
        return LayerGrads(np.where(x >= 0, upstream, upstream * s["slope"]))
    if kind == "concat":
        c = s["split"]
        return LayerGrads(upstream[:, :c], d_skip=upstream[:, c:])
    if kind == "head":
        d_w2 = s["a"].T @ upstream
        d_b2 = upstream.sum(axis=0)
        d_a = upstream @ s["w2"].T
        d_z = np.where(s["z"] >= 0, d_a, d_a * s["slope"])
        d_w1 = s["x"].T @ d_z
        d_b1 = d_z.sum(axis=0)
        return LayerGrads(d_z @ s["w1"].T, {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2})
    raise ValueError(f"unknown layer kind {kind!r}")

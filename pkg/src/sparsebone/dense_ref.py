"""Dense reference forward pass.

Runs the same U-Net on a zero-padded dense grid: every convolution visits all
voxels, and outputs are then masked back to the active support so that the
result agrees with the sparse engine at active voxels. Arrays are laid out
``[z, y, x, channel]``.
"""

from __future__ import annotations

import numpy as np

from .network import Checkpoint, Params, UNetConfig
from .voxgrid import SparseTensor, downsample_kernel, submanifold_kernel

_SUBM_OFFSETS = submanifold_kernel().offsets
_DOWN_OFFSETS = downsample_kernel().offsets


def dense_conv3(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Zero-padded 3^3 convolution: ``out[v] = sum_d x[v + d] @ W[d]``."""
    Z, Y, X, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((Z, Y, X, weights.shape[2]), dtype=np.result_type(x, weights))
    for k, (dx, dy, dz) in enumerate(_SUBM_OFFSETS):
        sl = xp[1 + dz:1 + dz + Z, 1 + dy:1 + dy + Y, 1 + dx:1 + dx + X]
        out += sl @ weights[k]
    return out


def dense_strided(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Stride-2, kernel-2 convolution: ``out[c] = sum_d x[2c + d] @ W[d]``."""
    Z, Y, X, C = x.shape
    b = x.reshape(Z // 2, 2, Y // 2, 2, X // 2, 2, C)
    out = np.zeros((Z // 2, Y // 2, X // 2, weights.shape[2]), dtype=np.result_type(x, weights))
    for k, (dx, dy, dz) in enumerate(_DOWN_OFFSETS):
        out += b[:, dz, :, dy, :, dx, :] @ weights[k]
    return out


def dense_transposed(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`dense_strided`: ``out[2c + d] = x[c] @ W[d]``."""
    Z, Y, X, _ = x.shape
    cout = weights.shape[2]
    out = np.zeros((Z, 2, Y, 2, X, 2, cout), dtype=np.result_type(x, weights))
    for k, (dx, dy, dz) in enumerate(_DOWN_OFFSETS):
        out[:, dz, :, dy, :, dx, :] = x @ weights[k]
    return out.reshape(2 * Z, 2 * Y, 2 * X, cout)


def _norm_act(x, mask, gamma, beta, eps, slope):
    m = mask[..., None]
    n = mask.sum()
    mean = (x * m).sum(axis=(0, 1, 2)) / n
    xc = (x - mean) * m
    var = (xc * xc).sum(axis=(0, 1, 2)) / n
    y = xc / np.sqrt(var + eps) * gamma + beta
    y = np.where(y >= 0, y, y * slope)
    return y * m


def dense_network_forward(st: SparseTensor, params: Params, cfg: UNetConfig) -> np.ndarray:
    """Logits at the active voxels of ``st`` (nonnegative local coordinates)."""
    dtype = params["head.w2"].dtype
    c = st.coords.astype(np.int64)
    if c.size and c.min() < 0:
        raise ValueError("dense reference needs nonnegative coordinates")
    unit = 2 ** (cfg.levels - 1)
    ext = [int(-(-(int(c[:, a].max()) + 1) // unit) * unit) for a in range(3)]
    x = np.zeros((ext[2], ext[1], ext[0], cfg.in_channels), dtype=dtype)
    x[c[:, 2], c[:, 1], c[:, 0]] = st.features.astype(dtype)
    mask = np.zeros(x.shape[:3], dtype=bool)
    mask[c[:, 2], c[:, 1], c[:, 0]] = True

    def block(prefix, h, msk, op):
        y = op(h, params[f"{prefix}.conv.weights"])
        return _norm_act(y, msk, params[f"{prefix}.norm.gamma"], params[f"{prefix}.norm.beta"],
                         cfg.norm_eps, cfg.leaky_slope)

    masks, skips = [mask], []
    h = x
    for lvl in range(cfg.levels):
        for j in range(cfg.blocks_per_level):
            h = block(f"enc{lvl}.b{j}", h, masks[lvl], dense_conv3)
        if lvl < cfg.levels - 1:
            skips.append(h)
            m = masks[lvl]
            Z, Y, X = m.shape
            masks.append(m.reshape(Z // 2, 2, Y // 2, 2, X // 2, 2).any(axis=(1, 3, 5)))
            h = block(f"down{lvl}", h, masks[lvl + 1], dense_strided)
    for lvl in range(cfg.levels - 2, -1, -1):
        h = block(f"up{lvl}", h, masks[lvl], dense_transposed)
        h = np.concatenate([h, skips[lvl]], axis=-1)
        for j in range(cfg.blocks_per_level):
            h = block(f"dec{lvl}.b{j}", h, masks[lvl], dense_conv3)
    z = h @ params["head.w1"] + params["head.b1"]
    z = np.where(z >= 0, z, z * cfg.leaky_slope)
    logits = z @ params["head.w2"] + params["head.b2"]
    return logits[c[:, 2], c[:, 1], c[:, 0]]


def dense_forward(window: SparseTensor, ckpt: Checkpoint) -> np.ndarray:
    return dense_network_forward(window, ckpt.params, ckpt.config)

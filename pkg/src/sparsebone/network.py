"""Sparse U-Net assembly, training step, optimizer and checkpoint format."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ._fnv import fnv1a64
from .errors import (BadMagic, ChecksumMismatch, EmptyTensor, InvalidConfig,
                     ShapeMismatch, TruncatedFile, VersionMismatch)
from .objective import LossConfig, combined_loss
from .sparse_nn import (ConvParams, HeadParams, NormParams, concat_skip,
                        inverse_conv_forward, layer_backward, leaky_relu,
                        mlp_head_forward, sparse_instance_norm,
                        strided_conv_forward, subm_conv_forward)
from .voxgrid import (SparseTensor, build_downsample, build_rulebook_subm,
                      transpose_rulebook)

Params = Dict[str, np.ndarray]


@dataclass
class UNetConfig:
    levels: int = 4
    base_widths: Sequence[int] = (4, 8, 16, 32)
    width_factor: float = 4.0
    blocks_per_level: int = 2
    num_classes: int = 4
    in_channels: int = 1
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.base_widths = tuple(int(b) for b in self.base_widths)
        if self.levels < 2:
            raise InvalidConfig("need at least two levels")
        if len(self.base_widths) != self.levels:
            raise InvalidConfig("one base width per level")
        if any(b2 <= b1 for b1, b2 in zip(self.base_widths, self.base_widths[1:])):
            raise InvalidConfig("widths must be strictly increasing")
        if self.num_classes < 2:
            raise InvalidConfig("need at least two classes")
        if self.blocks_per_level < 1:
            raise InvalidConfig("need at least one block per level")
        if min(self.channels) < 1:
            raise InvalidConfig("width factor produces an empty level")

    @property
    def channels(self) -> List[int]:
        # round half up, not to even
        return [int(np.floor(b * self.width_factor + 0.5)) for b in self.base_widths]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_widths"] = list(self.base_widths)
        return d


# -- parameter layout ----------------------------------------------------------

def param_shapes(cfg: UNetConfig) -> "OrderedDict[str, tuple]":
    """Canonical parameter names and shapes, in initialization order."""
    ch = cfg.channels
    shapes: "OrderedDict[str, tuple]" = OrderedDict()

    def block(prefix, kvol, c_in, c_out):
        shapes[f"{prefix}.conv.weights"] = (kvol, c_in, c_out)
        shapes[f"{prefix}.norm.gamma"] = (c_out,)
        shapes[f"{prefix}.norm.beta"] = (c_out,)

    c_prev = cfg.in_channels
    for lvl in range(cfg.levels):
        for j in range(cfg.blocks_per_level):
            block(f"enc{lvl}.b{j}", 27, c_prev if j == 0 else ch[lvl], ch[lvl])
        c_prev = ch[lvl]
        if lvl < cfg.levels - 1:
            block(f"down{lvl}", 8, ch[lvl], ch[lvl + 1])
            c_prev = ch[lvl + 1]
    for lvl in range(cfg.levels - 2, -1, -1):
        block(f"up{lvl}", 8, ch[lvl + 1], ch[lvl])
        for j in range(cfg.blocks_per_level):
            block(f"dec{lvl}.b{j}", 27, 2 * ch[lvl] if j == 0 else ch[lvl], ch[lvl])
    c0, k = ch[0], cfg.num_classes
    shapes["head.w1"] = (c0, c0)
    shapes["head.b1"] = (c0,)
    shapes["head.w2"] = (c0, k)
    shapes["head.b2"] = (k,)
    return shapes


def count_parameters(cfg: UNetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_network(cfg: UNetConfig, seed: int, dtype=np.float32) -> Params:
    """He-normal conv and head weights, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    params: Params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weights"):
            fan_in = shape[0] * shape[1]
            val = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name in ("head.w1", "head.w2"):
            val = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
        elif name.endswith(".gamma"):
            val = np.ones(shape)
        else:
            val = np.zeros(shape)
        params[name] = val.astype(dtype)
    return params


# -- forward / backward --------------------------------------------------------

@dataclass
class Structure:
    """Supports and rulebooks for every level of one input window."""

    coords: list
    subm: list
    down: list
    up: list


def build_structure(coords: np.ndarray, levels: int) -> Structure:
    sup = [np.asarray(coords)]
    subm, down, up = [], [], []
    for lvl in range(levels):
        subm.append(build_rulebook_subm(sup[lvl]))
        if lvl < levels - 1:
            coarse, rb = build_downsample(sup[lvl])
            down.append(rb)
            up.append(transpose_rulebook(rb, sup[lvl]))
            sup.append(coarse)
    return Structure(sup, subm, down, up)


@dataclass
class Tape:
    """Recorded layer caches for one training-mode forward pass."""

    entries: list = field(default_factory=list)
    num_slots: int = 0

    def new_slot(self) -> int:
        self.num_slots += 1
        return self.num_slots - 1


class _Runner:
    def __init__(self, params: Params, cfg: UNetConfig, tape: Optional[Tape]):
        self.p = params
        self.cfg = cfg
        self.tape = tape

    def _rec(self, kind, prefix, result, ins):
        if self.tape is None:
            return result, None
        out, cache = result
        slot = self.tape.new_slot()
        self.tape.entries.append((kind, prefix, cache, ins, slot))
        return out, slot

    def conv(self, kind, prefix, x, slot, rb, out_coords):
        p = ConvParams(self.p[f"{prefix}.conv.weights"])
        train = self.tape is not None
        if kind == "subm":
            res = subm_conv_forward(x, rb, p, return_cache=train)
        elif kind == "strided":
            res = strided_conv_forward(x, rb, p, out_coords, return_cache=train)
        else:
            res = inverse_conv_forward(x, rb, p, out_coords, return_cache=train)
        x, slot = self._rec(kind, f"{prefix}.conv", res, [slot])
        norm = NormParams(self.p[f"{prefix}.norm.gamma"], self.p[f"{prefix}.norm.beta"],
                          self.cfg.norm_eps)
        x, slot = self._rec("norm", f"{prefix}.norm",
                            sparse_instance_norm(x, norm, return_cache=train), [slot])
        x, slot = self._rec("leaky", None,
                            leaky_relu(x, self.cfg.leaky_slope, return_cache=train), [slot])
        return x, slot

    def concat(self, dec, dslot, enc, eslot):
        return self._rec("concat", None,
                         concat_skip(dec, enc, return_cache=self.tape is not None),
                         [dslot, eslot])

    def head(self, x, slot):
        p = HeadParams(self.p["head.w1"], self.p["head.b1"], self.p["head.w2"], self.p["head.b2"])
        return self._rec("head", "head",
                         mlp_head_forward(x, p, self.cfg.leaky_slope,
                                          return_cache=self.tape is not None), [slot])


def network_forward(st: SparseTensor, params: Params, cfg: UNetConfig,
                    training: bool = False, structure: Optional[Structure] = None):
    """Logits ``(N, K)`` for every active voxel of ``st``.

    In training mode returns ``(logits, tape)``.
    """
    if len(st) == 0:
        raise EmptyTensor("network input has no active voxels")
    if st.num_channels != cfg.in_channels:
        raise ShapeMismatch(f"expected {cfg.in_channels} input channels")
    dtype = params["head.w2"].dtype
    s = structure or build_structure(st.coords, cfg.levels)
    tape = Tape() if training else None
    run = _Runner(params, cfg, tape)
    x = SparseTensor(st.coords, st.features.astype(dtype))
    slot = tape.new_slot() if training else None
    skips = []
    L = cfg.levels
    for lvl in range(L):
        for j in range(cfg.blocks_per_level):
            x, slot = run.conv("subm", f"enc{lvl}.b{j}", x, slot, s.subm[lvl], None)
        if lvl < L - 1:
            skips.append((x, slot))
            x, slot = run.conv("strided", f"down{lvl}", x, slot, s.down[lvl], s.coords[lvl + 1])
    for lvl in range(L - 2, -1, -1):
        x, slot = run.conv("inverse", f"up{lvl}", x, slot, s.up[lvl], s.coords[lvl])
        enc, eslot = skips[lvl]
        x, slot = run.concat(x, slot, enc, eslot)
        for j in range(cfg.blocks_per_level):
            x, slot = run.conv("subm", f"dec{lvl}.b{j}", x, slot, s.subm[lvl], None)
    logits, slot = run.head(x, slot)
    if training:
        return logits.features, tape
    return logits.features


def network_backward(tape: Tape, d_logits: np.ndarray) -> Params:
    """Parameter gradients given dL/dlogits, walking the tape in reverse."""
    grads: Params = {}
    pending: Dict[int, np.ndarray] = {tape.entries[-1][4]: d_logits}
    for kind, prefix, cache, ins, out_slot in reversed(tape.entries):
        g = pending.pop(out_slot)
        lg = layer_backward(kind, cache, g)
        if prefix is not None:
            for key, val in lg.params.items():
                grads[f"{prefix}.{key}"] = val
        for slot, d in zip(ins, (lg.d_input, lg.d_skip)):
            if d is None:
                continue
            if slot in pending:
                pending[slot] = pending[slot] + d
            else:
                pending[slot] = d
    return grads


def loss_and_grads(window: SparseTensor, params: Params, cfg: UNetConfig,
                   loss_cfg: LossConfig, structure: Optional[Structure] = None):
    if window.labels is None:
        raise ValueError("training window has no labels")
    logits, tape = network_forward(window, params, cfg, training=True, structure=structure)
    loss, d_logits = combined_loss(logits, window.labels, loss_cfg)
    return loss, network_backward(tape, d_logits)


# -- optimizer -----------------------------------------------------------------

@dataclass
class OptimState:
    """Adam moments and step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params, **hyper) -> "OptimState":
        st = cls(**hyper)
        st.m = OrderedDict((k, np.zeros_like(p)) for k, p in params.items())
        st.v = OrderedDict((k, np.zeros_like(p)) for k, p in params.items())
        return st

    def apply(self, params: Params, grads: Params) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def train_step(params: Params, opt: OptimState, window: SparseTensor,
               cfg: UNetConfig, loss_cfg: LossConfig) -> float:
    """One combined-loss Adam step on a labeled window; updates in place."""
    loss, grads = loss_and_grads(window, params, cfg, loss_cfg)
    opt.apply(params, grads)
    return loss


# -- checkpoint ----------------------------------------------------------------

MAGIC = b"BNT1"
VERSION = 1


@dataclass
class Checkpoint:
    config: UNetConfig
    params: Params
    mu: float = 0.0
    sigma: float = 1.0
    seed: int = 0
    extra: dict = field(default_factory=dict)
    optim: Optional[OptimState] = None


def _tensor_bytes(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blob = {"config": ckpt.config.to_dict(), "mu": ckpt.mu, "sigma": ckpt.sigma,
            "seed": ckpt.seed, "extra": ckpt.extra}
    tensors = list(ckpt.params.items())
    if ckpt.optim is not None:
        o = ckpt.optim
        blob["optim"] = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2,
                         "eps": o.eps, "step": o.step}
        tensors += [(f"optim.m.{k}", a) for k, a in o.m.items()]
        tensors += [(f"optim.v.{k}", a) for k, a in o.v.items()]
    jb = json.dumps(blob, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(jb)), jb,
             struct.pack("<I", len(tensors))]
    parts += [_tensor_bytes(n, a) for n, a in tensors]
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf = buf
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFile("checkpoint ends mid-record")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_checkpoint(buf: bytes, end: int):
    r = _Reader(buf, end)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    (blen,) = r.unpack("<I")
    blob = json.loads(r.take(blen).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(dims).astype(np.float32)
    return blob, tensors, r.pos


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    if len(buf) < 4 + 4 + 4 + 4 + 8:
        raise TruncatedFile(f"{path}: file too short")
    body_end = len(buf) - 8
    (stored,) = struct.unpack("<Q", buf[body_end:])
    if fnv1a64(buf[:body_end]) != stored:
        try:
            _, _, used = _parse_checkpoint(buf, body_end)
        except (TruncatedFile, UnicodeDecodeError, ValueError):
            raise TruncatedFile(f"{path}: truncated or corrupt checkpoint") from None
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    blob, tensors, used = _parse_checkpoint(buf, body_end)
    if used != body_end:
        raise ChecksumMismatch(f"{path}: trailing bytes after tensor table")
    cfg = UNetConfig(**blob["config"])
    expected = param_shapes(cfg)
    params = OrderedDict()
    for name, shape in expected.items():
        if name not in tensors:
            raise ShapeMismatch(f"checkpoint lacks parameter {name}")
        if tensors[name].shape != tuple(shape):
            raise ShapeMismatch(f"{name}: shape {tensors[name].shape}, config says {shape}")
        params[name] = tensors[name]
    optim = None
    if "optim" in blob:
        o = blob["optim"]
        optim = OptimState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                           step=o["step"])
        optim.m = OrderedDict((k, tensors[f"optim.m.{k}"]) for k in expected)
        optim.v = OrderedDict((k, tensors[f"optim.v.{k}"]) for k in expected)
    return Checkpoint(cfg, params, mu=blob["mu"], sigma=blob["sigma"], seed=blob["seed"],
                      extra=blob.get("extra", {}), optim=optim)

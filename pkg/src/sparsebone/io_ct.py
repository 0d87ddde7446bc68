"""Volume and sparse-cache file formats.

RAWZ
    ``<path>`` holds the raw little-endian payload (x fastest, then y, then z);
    ``<path>.json`` holds ``{"shape": [X, Y, Z], "spacing": [...], "kind": ...}``
    where ``kind`` is ``"hu"`` (int16) or ``"labels"`` (uint16).

BNC1 sparse cache
    magic, u32 version, u8 has_labels, u64 N, u32 C, int32 coords (N x 3),
    float32 features (N x C), optional uint16 labels, u64 FNV-1a checksum.

NIfTI-1 is read only: single-file ``.nii`` / ``.nii.gz``, little-endian,
3 dimensions, datatype int16 or float32.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from ._fnv import fnv1a64
from .errors import (BadMagic, ChecksumMismatch, FormatError, ManifestMissing,
                     SizeMismatch, TruncatedFile, UnknownKind, UnsupportedDatatype,
                     UnsupportedDim, VersionMismatch)
from .voxgrid import SparseTensor

KIND_DTYPES = {"hu": np.dtype("<i2"), "labels": np.dtype("<u2")}


@dataclass
class VolumeMeta:
    shape: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "hu"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise SizeMismatch(f"bad shape {self.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise FormatError(f"bad spacing {self.spacing}")
        if self.kind not in KIND_DTYPES:
            raise UnknownKind(f"unknown value kind {self.kind!r}")

    @property
    def array_shape(self) -> tuple:
        return self.shape[::-1]

    @property
    def dtype(self) -> np.dtype:
        return KIND_DTYPES[self.kind]


def manifest_path(path) -> Path:
    return Path(str(path) + ".json")


def write_rawz(path, volume: np.ndarray, meta: VolumeMeta) -> None:
    volume = np.asarray(volume)
    if volume.shape != meta.array_shape:
        raise SizeMismatch(f"volume shape {volume.shape} vs meta {meta.array_shape} (z, y, x)")
    if volume.dtype.kind == "f":
        info = np.iinfo(meta.dtype)
        volume = np.clip(np.rint(volume), info.min, info.max)
    payload = np.ascontiguousarray(volume, dtype=meta.dtype).tobytes()
    Path(path).write_bytes(payload)
    manifest = {"shape": list(meta.shape), "spacing": list(meta.spacing), "kind": meta.kind}
    manifest_path(path).write_text(json.dumps(manifest, sort_keys=True) + "\n")


def read_rawz(path):
    mpath = manifest_path(path)
    if not mpath.exists():
        raise ManifestMissing(f"{mpath} not found")
    m = json.loads(mpath.read_text())
    if m.get("kind") not in KIND_DTYPES:
        raise UnknownKind(f"unknown value kind {m.get('kind')!r}")
    meta = VolumeMeta(m["shape"], m.get("spacing", (1.0, 1.0, 1.0)), m["kind"])
    payload = Path(path).read_bytes()
    expected = int(np.prod(meta.shape)) * meta.dtype.itemsize
    if len(payload) != expected:
        raise SizeMismatch(f"{path}: {len(payload)} bytes, manifest needs {expected}")
    vol = np.frombuffer(payload, dtype=meta.dtype).reshape(meta.array_shape)
    return vol.astype(meta.dtype.newbyteorder("="), copy=True), meta


def export_mask(path, labels: np.ndarray, meta: VolumeMeta) -> None:
    labels = np.asarray(labels)
    if labels.dtype != np.uint16:
        raise UnsupportedDatatype("masks must be uint16")
    write_rawz(path, labels, VolumeMeta(meta.shape, meta.spacing, "labels"))


# -- NIfTI-1 -----------------------------------------------------------------

NIFTI_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}


def read_nifti1(path):
    """Return ``(hu, meta)`` with ``hu`` as float32 indexed ``[z, y, x]``."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 352:
        raise TruncatedFile(f"{path}: shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        if struct.unpack_from(">i", raw, 0)[0] == 348:
            raise UnsupportedDim(f"{path}: big-endian NIfTI is not supported")
        raise BadMagic(f"{path}: sizeof_hdr is {sizeof_hdr}, not 348")
    if raw[344:348] != b"n+1\x00":
        raise BadMagic(f"{path}: magic {raw[344:348]!r} is not single-file NIfTI-1")
    dim = struct.unpack_from("<8h", raw, 40)
    if not 1 <= dim[0] <= 7:
        raise UnsupportedDim(f"{path}: dim[0]={dim[0]}")
    if dim[0] != 3 and not (dim[0] > 3 and all(d == 1 for d in dim[4:dim[0] + 1])):
        raise UnsupportedDim(f"{path}: expected 3 dimensions, got {dim[0]}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<2f", raw, 112)
    shape = tuple(int(d) for d in dim[1:4])
    dt = NIFTI_DTYPES[datatype]
    start = int(vox_offset)
    nbytes = int(np.prod(shape)) * dt.itemsize
    if len(raw) < start + nbytes:
        raise TruncatedFile(f"{path}: image data truncated")
    data = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=start)
    data = data.reshape(shape[::-1]).astype(np.float64)
    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    hu = (data * slope + inter).astype(np.float32)
    spacing = tuple(abs(float(p)) if p else 1.0 for p in pixdim[1:4])
    return hu, VolumeMeta(shape, spacing, "hu")


def write_nifti1(path, volume: np.ndarray, spacing=(1.0, 1.0, 1.0), slope: float = 1.0,
                 inter: float = 0.0, datatype: int = 4) -> None:
    """Minimal NIfTI-1 writer, used to build test fixtures."""
    dt = NIFTI_DTYPES[datatype]
    shape = volume.shape[::-1]
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, slope, inter)
    hdr[344:348] = b"n+1\x00"
    data = bytes(hdr) + np.ascontiguousarray(volume, dtype=dt).tobytes()
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    Path(path).write_bytes(data)


def read_volume(path):
    """RAWZ or NIfTI-1, chosen by extension; returns ``(volume, meta)``."""
    name = str(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return read_nifti1(path)
    return read_rawz(path)


# -- BNC1 sparse cache -------------------------------------------------------

CACHE_MAGIC = b"BNC1"
CACHE_VERSION = 1
_CACHE_HEAD = struct.Struct("<4sIBQI")


def cache_bytes(st: SparseTensor) -> bytes:
    n, c = st.features.shape
    has_labels = st.labels is not None
    parts = [_CACHE_HEAD.pack(CACHE_MAGIC, CACHE_VERSION, int(has_labels), n, c),
             np.ascontiguousarray(st.coords, dtype="<i4").tobytes(),
             np.ascontiguousarray(st.features, dtype="<f4").tobytes()]
    if has_labels:
        parts.append(np.ascontiguousarray(st.labels, dtype="<u2").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def write_cache(path, st: SparseTensor) -> None:
    Path(path).write_bytes(cache_bytes(st))


def read_cache(path) -> SparseTensor:
    buf = Path(path).read_bytes()
    if buf[:4] != CACHE_MAGIC:
        raise BadMagic(f"{path}: not a sparse cache")
    if len(buf) < _CACHE_HEAD.size + 8:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, has_labels, n, c = _CACHE_HEAD.unpack_from(buf, 0)
    if version != CACHE_VERSION:
        raise VersionMismatch(f"{path}: cache version {version}")
    need = _CACHE_HEAD.size + 12 * n + 4 * n * c + (2 * n if has_labels else 0) + 8
    if len(buf) < need:
        raise TruncatedFile(f"{path}: {len(buf)} bytes, header implies {need}")
    body_end = len(buf) - 8
    (stored,) = struct.unpack_from("<Q", buf, body_end)
    if len(buf) != need or fnv1a64(buf[:body_end]) != stored:
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    off = _CACHE_HEAD.size
    coords = np.frombuffer(buf, "<i4", 3 * n, off).reshape(n, 3)
    off += 12 * n
    feats = np.frombuffer(buf, "<f4", n * c, off).reshape(n, c)
    off += 4 * n * c
    labels = np.frombuffer(buf, "<u2", n, off) if has_labels else None
    return SparseTensor(coords.astype(np.int32), feats.astype(np.float32),
                        None if labels is None else labels.astype(np.uint16))

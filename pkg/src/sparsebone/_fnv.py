import numba
import numpy as np

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


@numba.njit
def _fnv1a(buf, h, prime):
    for b in buf:
        h ^= np.uint64(b)
        h *= prime
    return h


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of ``data``."""
    buf = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a(buf, FNV_OFFSET, FNV_PRIME))

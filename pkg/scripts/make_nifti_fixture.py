"""Write tests/data/fixture_8x8x4.nii byte by byte.

Stored int16 values are ``x + 8*y + 64*z - 20`` with scl_slope 0.5 and
scl_inter 10, so the decoded HU is ``0.5 * stored + 10``.
"""

import struct
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "tests" / "data" / "fixture_8x8x4.nii"


def main():
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)                       # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, 8, 8, 4, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", hdr, 70, 4)                        # datatype: int16
    struct.pack_into("<h", hdr, 72, 16)                       # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, 0.8, 0.8, 2.5, 0, 0, 0, 0)  # pixdim
    struct.pack_into("<f", hdr, 108, 352.0)                   # vox_offset
    struct.pack_into("<f", hdr, 112, 0.5)                     # scl_slope
    struct.pack_into("<f", hdr, 116, 10.0)                    # scl_inter
    hdr[344:348] = b"n+1\x00"
    body = b"".join(struct.pack("<h", x + 8 * y + 64 * z - 20)
                    for z in range(4) for y in range(8) for x in range(8))
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_bytes(bytes(hdr) + body)
    print(f"wrote {OUT} ({352 + len(body)} bytes)")


if __name__ == "__main__":
    main()

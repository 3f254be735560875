import struct

import numpy as np
import pytest


def nifti_blob(values, dims, datatype=16, pixdim=(1.0, 1.0, 1.0), slope=0.0, inter=0.0,
               magic=b"n+1\x00", sizeof_hdr=348, vox_offset=352, endian="<"):
    """Assemble a NIfTI-1 file byte by byte, independent of the package writer."""
    codes = {2: "B", 4: "h", 16: "f"}
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, sizeof_hdr)
    dim = [len(dims), *dims] + [1] * (7 - len(dims))
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    struct.pack_into(endian + "hh", hdr, 70, datatype, {2: 8, 4: 16, 16: 32}.get(datatype, 64))
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "3f", hdr, 108, float(vox_offset), slope, inter)
    hdr[344:348] = magic
    code = codes.get(datatype, "d")
    payload = struct.pack(endian + f"{len(values)}{code}", *values)
    return bytes(hdr) + b"\x00" * (vox_offset - 348) + payload


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

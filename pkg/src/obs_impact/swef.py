"""Grid-field binary format "SWEF" and CSV field export.

Layout: magic bytes ``SWEF``, u32 little-endian version (=1), u32 q,
u32 nvars (=3), then 3*q*q IEEE-754 little-endian float64 in flattening
order (h block, uh block, vh block, each row-major).
"""

import struct

import numpy as np

from .errors import ObsImpactError

MAGIC = b"SWEF"
VERSION = 1
VAR_NAMES = ("h", "uh", "vh")


class SwefFormatError(ObsImpactError):
    pass


def write_swef(path, state: np.ndarray) -> None:
    """Write a (3, q, q) state to path."""
    state = np.asarray(state, dtype=np.float64)
    nvars, q, q2 = state.shape
    if nvars != 3 or q != q2:
        raise SwefFormatError(f"expected shape (3, q, q), got {state.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, q, nvars))
        fh.write(state.astype("<f8").tobytes())


def read_swef(path) -> np.ndarray:
    """Read a SWEF file back into a (3, q, q) array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise SwefFormatError(f"bad magic {magic!r}")
        version, q, nvars = struct.unpack("<III", fh.read(12))
        if version != VERSION:
            raise SwefFormatError(f"unsupported version {version}")
        if nvars != 3:
            raise SwefFormatError(f"expected 3 variables, got {nvars}")
        data = np.frombuffer(fh.read(8 * nvars * q * q), dtype="<f8")
        if data.size != nvars * q * q:
            raise SwefFormatError("truncated payload")
    return data.reshape(nvars, q, q).copy()


def field_to_csv(path, state: np.ndarray) -> None:
    """CSV export with columns (var, i, j, value)."""
    state = np.asarray(state)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("var,i,j,value\n")
        for v, name in enumerate(VAR_NAMES):
            for i in range(state.shape[1]):
                row = state[v, i]
                for j in range(state.shape[2]):
                    fh.write(f"{name},{i},{j},{float(row[j])!r}\n")

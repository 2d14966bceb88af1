"""Supported element dtypes and their numpy/binary representations.

All stored buffers are row-major little-endian; the table below is the
single source of truth for the name <-> numpy mapping.
"""

from __future__ import annotations

import numpy as np

from .errors import TreeError

# name -> little-endian numpy dtype
NUMPY_DTYPES: dict[str, np.dtype] = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("|u1"),
    "bool": np.dtype("|b1"),
}

FLOAT_DTYPES = frozenset({"f32", "f64"})
INT_DTYPES = frozenset({"i32", "i64", "u8"})
NUMERIC_DTYPES = FLOAT_DTYPES | INT_DTYPES


def numpy_dtype(name: str) -> np.dtype:
    try:
        return NUMPY_DTYPES[name]
    except KeyError:
        raise TreeError(f"unsupported dtype {name!r}") from None


def dtype_name(dt: np.dtype) -> str:
    kind_size = (np.dtype(dt).kind, np.dtype(dt).itemsize)
    for name, nd in NUMPY_DTYPES.items():
        if (nd.kind, nd.itemsize) == kind_size:
            return name
    raise TreeError(f"unsupported numpy dtype {dt!r}")


def itemsize(name: str) -> int:
    return numpy_dtype(name).itemsize

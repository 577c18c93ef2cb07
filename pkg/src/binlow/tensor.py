"""Dense tensor container with storage-dtype tagging.

Arithmetic always happens in compute precision (float32 by default).  The
storage dtype decides two things only: the rounding applied when a value is
written to its home buffer, and how many bytes the buffer is charged for.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

F16_MAX = 65504.0

_KINDS = ("f32", "f16", "bool1", "po2", "blockfp")


@dataclass(frozen=True)
class StorageDtype:
    """Element storage format.  ``k`` is only meaningful for po2 / blockfp."""

    kind: str
    k: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown storage dtype kind {self.kind!r}")
        if self.kind in ("po2", "blockfp"):
            if not 2 <= self.k <= 8:
                raise ValueError(f"{self.kind} width must be in [2, 8], got {self.k}")
        elif self.k:
            raise ValueError(f"{self.kind} takes no width parameter")

    @property
    def bits(self) -> int:
        if self.kind == "f32":
            return 32
        if self.kind == "f16":
            return 16
        if self.kind == "bool1":
            return 1
        return self.k

    @property
    def name(self) -> str:
        if self.kind == "po2":
            return f"po2_{self.k}"
        if self.kind == "blockfp":
            return f"blockfp_{self.k}"
        return self.kind

    def __str__(self):
        return self.name


F32 = StorageDtype("f32")
F16 = StorageDtype("f16")
BOOL1 = StorageDtype("bool1")


def po2(k: int = 5) -> StorageDtype:
    return StorageDtype("po2", k)


def blockfp(k: int = 5) -> StorageDtype:
    return StorageDtype("blockfp", k)


_ALIASES = {
    "f32": F32, "float32": F32,
    "f16": F16, "float16": F16,
    "bool": BOOL1, "bool1": BOOL1,
    "int5": blockfp(5),
}


def parse_dtype(text: str | StorageDtype) -> StorageDtype:
    """Parse names such as ``f32``, ``bool``, ``po2_5``, ``blockfp_5``, ``int5``."""
    if isinstance(text, StorageDtype):
        return text
    key = str(text).strip().lower()
    if key in _ALIASES:
        return _ALIASES[key]
    m = re.fullmatch(r"(po2|blockfp)_?(\d+)", key)
    if m:
        return StorageDtype(m.group(1), int(m.group(2)))
    raise ValueError(f"unknown storage dtype {text!r}")


def round_f16(values) -> np.ndarray:
    """Round to the nearest binary16 value (ties to even), saturating at +-65504.

    The result keeps the input's floating dtype so it can be used directly in
    compute precision.
    """
    a = np.asarray(values)
    out_dtype = a.dtype if a.dtype.kind == "f" else np.float32
    clipped = np.clip(a, -F16_MAX, F16_MAX)
    return clipped.astype(np.float16).astype(out_dtype)


def store(values, dtype: StorageDtype) -> np.ndarray:
    """Apply store-time rounding for a dense dtype (f32 is the identity)."""
    if dtype.kind == "f16":
        return round_f16(values)
    if dtype.kind == "f32":
        return np.asarray(values)
    raise ValueError(f"cannot store dense values as {dtype}; use quant module")


class Tensor:
    """Real-valued array tagged with its storage dtype.

    Values are rounded to the tag on construction, so a Tensor tagged f16
    only ever holds binary16-representable numbers.
    """

    __slots__ = ("values", "dtype")

    def __init__(self, values, dtype: StorageDtype = F32, compute=np.float32):
        dtype = parse_dtype(dtype)
        arr = np.asarray(values, dtype=compute)
        if dtype.kind == "bool1":
            if not np.all(np.abs(arr) == 1):
                raise ValueError("bool1 tensor values must be +-1")
        elif dtype.kind in ("f16", "f32"):
            arr = store(arr, dtype)
        else:
            raise ValueError(f"dense Tensor cannot carry {dtype}; use quant module")
        arr.flags.writeable = False
        self.values = arr
        self.dtype = dtype

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


def check_shape(dims) -> tuple:
    dims = tuple(int(d) for d in dims)
    if not dims or any(d < 1 for d in dims):
        raise ValueError(f"shape extents must be >= 1, got {dims}")
    return dims


def cast_to_storage(t, d) -> Tensor:
    """Return ``t`` re-tagged (and rounded) as f32 or f16."""
    d = parse_dtype(d)
    if d.kind not in ("f32", "f16"):
        raise ValueError(f"cannot cast to {d}: use quant module")
    values = t.values if isinstance(t, Tensor) else t
    return Tensor(values, d)


def nbytes_for(count: int, dtype: StorageDtype) -> int:
    """Bytes needed for ``count`` contiguous elements, final byte padded."""
    return math.ceil(int(count) * dtype.bits / 8)


def storage_bytes(t) -> int:
    """Footprint in bytes of a Tensor, BitTensor, Po2Tensor or BlockFpTensor."""
    return nbytes_for(int(np.prod(t.shape)), t.dtype)

"""Quantization codecs and bit-level matmul kernels.

Bit packing is row-major and LSB-first inside each byte (1 = +1, 0 = -1).
That layout is also what checkpoints store.
"""

from __future__ import annotations

import numpy as np

from .tensor import BOOL1, StorageDtype, blockfp, po2

_WORD_CHUNK = 1 << 22  # uint64 words per xnor block, bounds the temporary


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


class BitTensor:
    """Bit-packed +-1 tensor, one bit per element."""

    __slots__ = ("shape", "bits")

    def __init__(self, shape, bits: np.ndarray):
        self.shape = tuple(int(s) for s in shape)
        n = int(np.prod(self.shape))
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.size != (n + 7) // 8:
            raise ValueError(f"expected {(n + 7) // 8} packed bytes, got {bits.size}")
        self.bits = bits

    dtype = BOOL1

    @classmethod
    def from_bool(cls, positive) -> "BitTensor":
        positive = np.asarray(positive, dtype=bool)
        return cls(positive.shape, np.packbits(positive.ravel(), bitorder="little"))

    def to_bool(self) -> np.ndarray:
        n = int(np.prod(self.shape))
        flat = np.unpackbits(self.bits, count=n, bitorder="little")
        return flat.astype(bool).reshape(self.shape)

    def decode(self, dtype=np.float32) -> np.ndarray:
        return np.where(self.to_bool(), 1, -1).astype(dtype)

    def __eq__(self, other):
        return (isinstance(other, BitTensor) and self.shape == other.shape
                and np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"BitTensor(shape={self.shape})"


class Po2Tensor:
    """Sign bit plus (k-1)-bit exponent per element, shared bias per tensor."""

    __slots__ = ("shape", "signs", "exponents", "bias", "k")

    def __init__(self, signs: BitTensor, exponents: np.ndarray, bias: int, k: int):
        self.shape = signs.shape
        self.signs = signs
        self.exponents = np.asarray(exponents, dtype=np.int16).reshape(self.shape)
        self.bias = int(bias)
        self.k = int(k)
        lo, hi = po2_exponent_range(self.k)
        if self.exponents.size and (self.exponents.min() < lo or self.exponents.max() > hi):
            raise ValueError("po2 exponent outside its field")

    @property
    def dtype(self) -> StorageDtype:
        return po2(self.k)

    def __eq__(self, other):
        return (isinstance(other, Po2Tensor) and self.k == other.k
                and self.bias == other.bias and self.signs == other.signs
                and np.array_equal(self.exponents, other.exponents))

    def __repr__(self):
        return f"Po2Tensor(shape={self.shape}, k={self.k}, bias={self.bias})"


class BlockFpTensor:
    """Fixed-point mantissas sharing one exponent per tensor."""

    __slots__ = ("shape", "mantissas", "shared_exponent", "k")

    def __init__(self, mantissas: np.ndarray, shared_exponent: int, k: int):
        self.mantissas = np.asarray(mantissas, dtype=np.int16)
        self.shape = self.mantissas.shape
        self.shared_exponent = int(shared_exponent)
        self.k = int(k)

    @property
    def dtype(self) -> StorageDtype:
        return blockfp(self.k)

    @property
    def scale_exponent(self) -> int:
        return self.shared_exponent - (self.k - 2)

    def decode(self, dtype=np.float32) -> np.ndarray:
        return np.ldexp(self.mantissas.astype(np.float64), self.scale_exponent).astype(dtype)


def po2_exponent_range(k: int):
    return -(2 ** (k - 2)), 2 ** (k - 2) - 1


def sign_binarize(t) -> BitTensor:
    """sgn with sgn(0) = +1."""
    return BitTensor.from_bool(np.asarray(t) >= 0)


def sign(t) -> np.ndarray:
    """Dense +-1 version of sign_binarize, same dtype as the input."""
    t = np.asarray(t)
    return np.where(t >= 0, 1, -1).astype(t.dtype if t.dtype.kind == "f" else np.float32)


def _max_abs(a: np.ndarray, what: str) -> float:
    m = float(np.max(np.abs(a))) if a.size else 0.0
    if m == 0.0:
        raise ValueError(f"{what} bias undefined for zero tensor")
    if not np.isfinite(m):
        raise ValueError(f"{what} quantization of non-finite tensor")
    return m


def po2_quantize(t, k: int = 5) -> Po2Tensor:
    if not 2 <= k <= 8:
        raise ValueError(f"po2 width must be in [2, 8], got {k}")
    a = np.asarray(t, dtype=np.float64)
    m = _max_abs(a, "po2")
    lo, hi = po2_exponent_range(k)
    bias = int(hi - round_half_away(np.log2(m)))
    e = np.full(a.shape, lo, dtype=np.int64)
    nz = a != 0
    e[nz] = np.clip(round_half_away(np.log2(np.abs(a[nz]))) + bias, lo, hi)
    return Po2Tensor(sign_binarize(a), e, bias, k)


def po2_dequantize(p: Po2Tensor, dtype=np.float32) -> np.ndarray:
    mag = np.ldexp(1.0, p.exponents.astype(np.int64) - p.bias)
    return (p.signs.decode(np.float64) * mag).astype(dtype)


def blockfp_quantize(t, k: int = 5) -> BlockFpTensor:
    if not 2 <= k <= 8:
        raise ValueError(f"blockfp width must be in [2, 8], got {k}")
    a = np.asarray(t, dtype=np.float64)
    m = _max_abs(a, "blockfp")
    shared = int(round_half_away(np.log2(m)))
    lim = 2 ** (k - 1) - 1
    mant = np.clip(round_half_away(np.ldexp(a, -(shared - (k - 2)))), -lim, lim)
    return BlockFpTensor(mant.astype(np.int64), shared, k)


def blockfp_dequantize(b: BlockFpTensor, dtype=np.float32) -> np.ndarray:
    return b.decode(dtype)


# -- kernels ---------------------------------------------------------------

def _pack_rows(positive: np.ndarray) -> np.ndarray:
    """Pack a bool matrix row-wise into uint64 words (zero padded)."""
    packed = np.packbits(positive, axis=1, bitorder="little")
    pad = (-packed.shape[1]) % 8
    if pad:
        packed = np.pad(packed, ((0, 0), (0, pad)))
    return np.ascontiguousarray(packed).view(np.uint64)


def _as_bits(x) -> BitTensor:
    if isinstance(x, BitTensor):
        return x
    return sign_binarize(x)


def xnor_matmul(a, w) -> np.ndarray:
    """Product of +-1 matrices via XOR and popcount.

    ``a`` is [B, N], ``w`` is [N, M]; result[b, m] = N - 2 * popcount(a_b XOR w_m).
    Padding bits are zero in both operands so they never count.
    """
    a, w = _as_bits(a), _as_bits(w)
    if len(a.shape) != 2 or len(w.shape) != 2 or a.shape[1] != w.shape[0]:
        raise ValueError(f"xnor_matmul shape mismatch {a.shape} @ {w.shape}")
    n = a.shape[1]
    pa = _pack_rows(a.to_bool())
    pw = _pack_rows(np.ascontiguousarray(w.to_bool().T))
    words = pa.shape[1]
    out = np.empty((a.shape[0], w.shape[1]), dtype=np.int32)
    step = max(1, _WORD_CHUNK // max(1, pw.shape[0] * words))
    for r in range(0, pa.shape[0], step):
        x = pa[r:r + step, None, :] ^ pw[None, :, :]
        pop = np.bitwise_count(x).sum(axis=2, dtype=np.int64)
        out[r:r + step] = n - 2 * pop
    return out


def _round_ints_to_f32(n: np.ndarray, shift: int) -> np.ndarray:
    """Correctly rounded float32 of n * 2**shift (ties to even).

    Integers wider than 24 bits are rounded in the integer domain so there
    is exactly one rounding step.
    """
    if n.dtype == object:
        flat = [_round_int_to_f32(int(v), shift) for v in n.ravel()]
        return np.array(flat, dtype=np.float32).reshape(n.shape)
    n = n.astype(np.int64)
    mag = np.abs(n)
    _, exp = np.frexp(mag.astype(np.float64))
    length = exp.astype(np.int64)
    over = length > 0
    # float64 may round a 54+ bit magnitude up to the next power of two
    length = np.where(over & ((mag >> np.maximum(length - 1, 0)) == 0), length - 1, length)
    drop = np.maximum(length - 24, 0)
    q = mag >> drop
    rem = mag & ((np.int64(1) << drop) - 1)
    half = np.where(drop > 0, np.int64(1) << np.maximum(drop - 1, 0), 0)
    up = (drop > 0) & ((rem > half) | ((rem == half) & (q & 1 == 1)))
    q = q + up
    val = np.ldexp(q.astype(np.float64), drop + shift)
    return (np.sign(n) * val).astype(np.float32)


def _round_int_to_f32(v: int, shift: int) -> float:
    if v == 0:
        return 0.0
    mag = abs(v)
    drop = max(mag.bit_length() - 24, 0)
    q, rem = mag >> drop, mag & ((1 << drop) - 1)
    if drop:
        half = 1 << (drop - 1)
        if rem > half or (rem == half and q & 1):
            q += 1
    return float(np.float32(np.ldexp(float(q), drop + shift) * (1 if v > 0 else -1)))


def _po2_int_operand(g: Po2Tensor, inner: int):
    """Signed integer magnitudes aligned to the smallest exponent present."""
    e = g.exponents.astype(np.int64)
    e_lo = int(e.min())
    span = int(e.max()) - e_lo
    signs = np.where(g.signs.to_bool(), 1, -1)
    if span + int(np.ceil(np.log2(max(inner, 1)))) + 1 <= 62:
        q = signs.astype(np.int64) << (e - e_lo)
    else:
        q = np.empty(e.shape, dtype=object)
        for idx, (s, x) in enumerate(zip(signs.ravel(), (e - e_lo).ravel())):
            q.flat[idx] = int(s) << int(x)
    return q, e_lo - g.bias


def _pm1_int(bits: BitTensor, like) -> np.ndarray:
    s = np.where(bits.to_bool(), 1, -1)
    return s.astype(object) if like.dtype == object else s.astype(np.int64)


def po2_bit_matmul(g: Po2Tensor, w, *, transpose_w: bool = False) -> np.ndarray:
    """dequant(g) @ decode(w) by shift, sign-flip and integer accumulate.

    ``g`` is [B, M]; ``w`` is [M, N], or [N, M] when ``transpose_w`` (the
    backward dX = dY~ W^T product).  One final scaling by 2**(e_lo - b).
    """
    w = _as_bits(w)
    if len(g.shape) != 2 or len(w.shape) != 2:
        raise ValueError("po2_bit_matmul expects 2-d operands")
    inner = w.shape[1] if transpose_w else w.shape[0]
    if g.shape[1] != inner:
        raise ValueError(f"po2_bit_matmul shape mismatch {g.shape} @ {w.shape}"
                         f"{'^T' if transpose_w else ''}")
    q, scale = _po2_int_operand(g, inner)
    s = _pm1_int(w, q)
    if transpose_w:
        s = s.T
    return _round_ints_to_f32(q @ s, scale)


def bit_po2_matmul(x, g: Po2Tensor, *, transpose_x: bool = False) -> np.ndarray:
    """decode(x) @ dequant(g), or decode(x)^T @ dequant(g) when ``transpose_x``.

    The transposed form is the weight-gradient product dW = X^T dY~.
    """
    x = _as_bits(x)
    if len(g.shape) != 2 or len(x.shape) != 2:
        raise ValueError("bit_po2_matmul expects 2-d operands")
    inner = x.shape[0] if transpose_x else x.shape[1]
    if g.shape[0] != inner:
        raise ValueError(f"bit_po2_matmul shape mismatch {x.shape}"
                         f"{'^T' if transpose_x else ''} @ {g.shape}")
    q, scale = _po2_int_operand(g, inner)
    s = _pm1_int(x, q)
    if transpose_x:
        s = s.T
    return _round_ints_to_f32(s @ q, scale)

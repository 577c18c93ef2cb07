"""Binary dense and convolutional layers, max pooling and im2col lowering.

A layer here is the unit  input -> matmul -> [pool] -> BN -> [sgn] -> [pool].
It owns the binarizer that follows its batch norm, so ``forward`` returns the
next layer's (binary) input and ``backward`` takes the gradient with respect
to it.  Two orders are supported for conv layers with pooling:

* ``pool_bn``: conv -> pool -> BN -> sgn (BinaryNet style)
* ``bn_pool``: conv -> BN -> sgn -> pool (FINN CNV style)

Activations are NHWC; conv weights are [kh, kw, Cin, Cout].
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .batchnorm import (
    BnState, bn_forward, bn_l1_backward_bnn, bn_l1_backward_plain, bn_l2_backward,
)
from .quant import (
    BitTensor, bit_po2_matmul, blockfp_quantize, po2_bit_matmul, po2_dequantize,
    po2_quantize, sign, sign_binarize, xnor_matmul,
)
from .scheme import Scheme
from .tensor import store


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


# -- lowering ----------------------------------------------------------------

def conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    """Output size and (top, bottom, left, right) padding."""
    if padding == "valid":
        if h < kh or w < kw:
            raise ValueError(f"{kh}x{kw} kernel does not fit a {h}x{w} input")
        return ((h - kh) // stride + 1, (w - kw) // stride + 1), (0, 0, 0, 0)
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        return (ho, wo), (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def im2col(x, kh: int, kw: int, stride: int = 1, padding: str = "valid", pad_value=0.0):
    """[B, H, W, C] -> [B*Ho*Wo, kh*kw*C], columns ordered (kh, kw, C)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"im2col expects NHWC input, got shape {x.shape}")
    b, h, w, c = x.shape
    (ho, wo), (pt, pb, pl, pr) = conv_geometry(h, w, kh, kw, stride, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=pad_value)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)


def col2im(cols, x_shape, kh: int, kw: int, stride: int = 1, padding: str = "valid"):
    """Adjoint of im2col: scatter-add columns back to [B, H, W, C]."""
    b, h, w, c = x_shape
    (ho, wo), (pt, pb, pl, pr) = conv_geometry(h, w, kh, kw, stride, padding)
    d = np.asarray(cols).reshape(b, ho, wo, kh, kw, c)
    out = np.zeros((b, h + pt + pb, w + pl + pr, c), dtype=d.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += d[:, :, :, i, j, :]
    return out[:, pt:pt + h, pl:pl + w, :]


# -- pooling -----------------------------------------------------------------

def _windows(x, k: int):
    b, h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"pool window {k} does not divide spatial dims {h}x{w}")
    v = x.reshape(b, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return v.reshape(b, h // k, w // k, k * k, c)


def maxpool_forward(x, window: int = 2):
    """Max over non-overlapping windows; returns (out, argmax) with first-index ties."""
    v = _windows(np.asarray(x), window)
    idx = np.argmax(v, axis=3)
    out = np.take_along_axis(v, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, idx.astype(np.int8)


def maxpool_backward(dout, idx, window: int = 2):
    """Route each output gradient to its window's argmax."""
    dout = np.asarray(dout)
    b, ho, wo, c = dout.shape
    k = window
    d = np.zeros((b, ho, wo, k * k, c), dtype=dout.dtype)
    np.put_along_axis(d, idx.astype(np.int64)[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    d = d.reshape(b, ho, wo, k, k, c).transpose(0, 1, 3, 2, 4, 5)
    return d.reshape(b, ho * k, wo * k, c)


# -- activation helpers ------------------------------------------------------

def _activate(x, scheme: Scheme):
    if scheme.binary:
        return sign(x)
    if scheme.activation == "hardtanh":
        return np.clip(x, -1, 1)
    if scheme.activation == "relu":
        return np.maximum(x, 0)
    return x


def _activation_grad(g, x, scheme: Scheme, ste_bits=None):
    """Straight-through estimator (binary) or the activation's derivative.

    Without retained X the STE reads the packed |X| <= 1 mask instead.
    """
    if scheme.binary:
        if x is None:
            return g * (ste_bits.decode(g.dtype).reshape(g.shape) > 0)
        return g * (np.abs(x) <= 1)
    if scheme.activation == "hardtanh":
        return g * (np.abs(x) <= 1)
    if scheme.activation == "relu":
        return g * (x > 0)
    return g


def quantize_dy(dy, scheme: Scheme):
    """Apply the scheme's dY format.

    Returns (dense values to multiply with, packed object or None).  The
    dense po2 values are exact powers of two held in float64 so that a
    float matmul reproduces the integer shift-accumulate result exactly.
    """
    kind = scheme.dY_dtype.kind
    if kind == "f32":
        return dy, None
    if kind == "f16":
        return store(dy, scheme.dY_dtype), None
    if not np.any(dy):
        return np.zeros(dy.shape, dtype=np.float64), None
    if kind == "po2":
        p = po2_quantize(dy, scheme.dY_dtype.k)
        return po2_dequantize(p, np.float64), p
    b = blockfp_quantize(dy, scheme.dY_dtype.k)
    return b.decode(np.float64), b


# -- layers ------------------------------------------------------------------

class _WeightLayer:
    """Shared forward/backward logic; subclasses define lowering."""

    kind = ""

    def __init__(self, fan_in, fan_out, w_shape, channels, rng, *, first=False, last=False,
                 pool=None, order="pool_bn", compute=np.float32):
        if order not in ("pool_bn", "bn_pool"):
            raise ValueError(f"order must be 'pool_bn' or 'bn_pool', got {order!r}")
        self.fan_in = int(fan_in)
        self.fan_out = int(fan_out)
        self.first = first
        self.last = last
        self.pool = pool
        self.order = order
        self.compute = np.dtype(compute)
        self.W = glorot_uniform(rng, w_shape, self.fan_in, self.fan_out, self.compute)
        self.bn = BnState.zeros(channels, compute=self.compute)
        self.clear()

    # cached between forward and backward
    def clear(self):
        self.x = None          # retained high-precision BN output
        self.x_bits = None     # binary BN output when X is not retained
        self.ste_bits = None   # packed |X| <= 1 mask when X is not retained
        self.pool_idx = None   # argmax of the pre-BN pool (pool_bn order)
        self.in_shape = None
        self.stats = {}

    @property
    def channels(self) -> int:
        return self.bn.channels

    def weight_matrix(self) -> np.ndarray:
        return self.W.reshape(self.fan_in, -1)

    def _binary_input(self, scheme: Scheme) -> bool:
        return scheme.binary and not self.first

    # lowering hooks
    def lower(self, a, binary_input: bool):
        raise NotImplementedError

    def raise_grad(self, d_cols):
        raise NotImplementedError

    def _y_to_spatial(self, y, batch):
        return y

    def _x_flat(self, x):
        return x.reshape(-1, self.channels)

    def forward(self, a, scheme: Scheme):
        """Consume the previous layer's output, return this layer's output."""
        a = np.asarray(a, dtype=self.compute)
        self.clear()
        self.in_shape = a.shape
        binary_in = self._binary_input(scheme)
        cols = self.lower(a, binary_in)
        wm = self.weight_matrix()
        w_hat = sign(wm) if scheme.binary else wm
        if binary_in and scheme.kernels == "bit":
            y = xnor_matmul(sign_binarize(cols), sign_binarize(w_hat)).astype(self.compute)
        else:
            y = cols @ w_hat
        y = store(y, scheme.base_dtype)
        rows, k = cols.shape
        self.stats = {"rows": rows, "K": k, "M": wm.shape[1], "y": y.size,
                      "binary_in": binary_in}
        y = self._y_to_spatial(y, a.shape[0])
        if self.pool and self.order == "pool_bn":
            y, self.pool_idx = maxpool_forward(y, self.pool)
        self.bn.dtype = scheme.base_dtype
        x = bn_forward(y.reshape(-1, self.channels), self.bn, scheme.bn_variant)
        x = x.reshape(y.shape)
        if scheme.retains_x:
            self.x = store(x, scheme.base_dtype)
            x = self.x
        else:
            self.x_bits = sign_binarize(x)
            if not self.last:
                self.ste_bits = sign_binarize(np.where(np.abs(x) <= 1, 1, -1).astype(x.dtype))
        self.stats["x"] = x.size
        if self.last:
            return x.reshape(a.shape[0], -1)
        out = _activate(x, scheme)
        if self.pool and self.order == "bn_pool":
            out, _ = maxpool_forward(out, self.pool)
        return out

    def regenerate_output(self, scheme: Scheme):
        """Rebuild the forward output from retained state (for the next dW)."""
        if self.x is not None:
            out = _activate(self.x, scheme)
        else:
            out = self.x_bits.decode(self.compute)
        if self.pool and self.order == "bn_pool":
            out, _ = maxpool_forward(out, self.pool)
        return out

    def backward(self, g, a_in, scheme: Scheme):
        """Return (d_input or None, stored dW, dbeta, dY used for dW).

        ``a_in`` is this layer's forward input, regenerated by the caller.
        """
        if self.x is None and self.x_bits is None:
            raise ValueError("backward called without a cached forward pass")
        x_shape = self.x.shape if self.x is not None else self.x_bits.shape
        g = np.asarray(g, dtype=self.compute)
        if self.last:
            dx = g.reshape(x_shape)
        else:
            if self.pool and self.order == "bn_pool":
                full = (_activate(self.x, scheme) if self.x is not None
                        else self.x_bits.decode(self.compute))
                _, idx = maxpool_forward(full, self.pool)
                g = maxpool_backward(g, idx, self.pool)
            dx = _activation_grad(g.reshape(x_shape), self.x, scheme, self.ste_bits)
        dx = store(dx, scheme.base_dtype)
        dx2 = dx.reshape(-1, self.channels)
        if scheme.bn_variant == "l2":
            dy, dbeta = bn_l2_backward(dx2, self.bn, self.x.reshape(-1, self.channels))
        elif scheme.bn_variant == "l1" or self.x is not None:
            if scheme.bn_variant == "l1":
                dy, dbeta = bn_l1_backward_plain(dx2, self.bn, self.x.reshape(-1, self.channels))
            else:
                dy, dbeta = bn_l1_backward_bnn(dx2, self.bn, sign(self.x).reshape(-1, self.channels))
        else:
            bits = BitTensor(dx2.shape, self.x_bits.bits)
            dy, dbeta = bn_l1_backward_bnn(dx2, self.bn, bits)
        if self.pool and self.order == "pool_bn":
            dy = maxpool_backward(dy.reshape(x_shape), self.pool_idx, self.pool)
        dy = dy.reshape(-1, self.weight_matrix().shape[1])
        dy_dense, packed = quantize_dy(dy, scheme)
        binary_in = self._binary_input(scheme)
        cols = self.lower(np.asarray(a_in, dtype=self.compute), binary_in)
        wm = self.weight_matrix()
        w_hat = sign(wm) if scheme.binary else wm
        use_bits = (scheme.kernels == "bit" and scheme.binary
                    and scheme.dY_dtype.kind == "po2" and packed is not None)
        if use_bits and binary_in:
            dw = bit_po2_matmul(sign_binarize(cols), packed, transpose_x=True)
        else:
            dw = (cols.T @ dy_dense).astype(self.compute)
        d_in = None
        if not self.first:
            if use_bits:
                d_cols = po2_bit_matmul(packed, sign_binarize(w_hat), transpose_w=True)
            else:
                d_cols = (dy_dense @ w_hat.T).astype(self.compute)
            d_in = self.raise_grad(d_cols.astype(self.compute))
        dw = dw.astype(self.compute).reshape(self.W.shape)
        if scheme.dW_dtype.kind == "bool1":
            dw_stored = sign_binarize(dw)
        else:
            dw_stored = store(dw, scheme.dW_dtype)
        dbeta = store(dbeta.astype(self.compute), scheme.base_dtype)
        self.stats["dy_nonzero"] = packed is not None or scheme.dY_dtype.kind in ("f32", "f16")
        return d_in, dw_stored, dbeta, dy_dense


class DenseLayer(_WeightLayer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng, **opts):
        super().__init__(n_in, n_out, (n_in, n_out), n_out, rng, **opts)
        if self.pool:
            raise ValueError("dense layers cannot pool")

    def lower(self, a, binary_input):
        cols = a.reshape(a.shape[0], -1)
        if cols.shape[1] != self.fan_in:
            raise ValueError(f"dense layer expects {self.fan_in} features, got {cols.shape[1]}")
        return cols

    def raise_grad(self, d_cols):
        return d_cols.reshape(self.in_shape)


class ConvLayer(_WeightLayer):
    kind = "conv"

    def __init__(self, kh: int, kw: int, c_in: int, c_out: int, rng, *, stride=1,
                 padding="same", **opts):
        super().__init__(kh * kw * c_in, kh * kw * c_out, (kh, kw, c_in, c_out), c_out, rng,
                         **opts)
        self.kh, self.kw, self.c_in, self.c_out = kh, kw, c_in, c_out
        self.stride = stride
        self.padding = padding
        conv_geometry(kh, kw, kh, kw, stride, padding)  # validates padding name

    def lower(self, a, binary_input):
        if a.ndim != 4 or a.shape[3] != self.c_in:
            raise ValueError(f"conv layer expects NHWC input with {self.c_in} channels, "
                             f"got {a.shape}")
        # binary layers see padding zeros through sgn, so they read +1
        pad_value = 1.0 if binary_input else 0.0
        return im2col(a, self.kh, self.kw, self.stride, self.padding, pad_value)

    def _y_to_spatial(self, y, batch):
        _, h, w, _ = self.in_shape
        (ho, wo), _ = conv_geometry(h, w, self.kh, self.kw, self.stride, self.padding)
        return y.reshape(batch, ho, wo, self.c_out)

    def raise_grad(self, d_cols):
        return col2im(d_cols, self.in_shape, self.kh, self.kw, self.stride, self.padding)


def dense_forward(a, layer: DenseLayer, scheme: Scheme):
    return layer.forward(a, scheme)


def dense_backward(g, layer: DenseLayer, scheme: Scheme, a_in):
    return layer.backward(g, a_in, scheme)


def conv_forward(a, layer: ConvLayer, scheme: Scheme):
    return layer.forward(a, scheme)


def conv_backward(g, layer: ConvLayer, scheme: Scheme, a_in):
    return layer.backward(g, a_in, scheme)

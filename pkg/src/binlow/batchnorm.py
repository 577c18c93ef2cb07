"""Batch normalization without trainable scale: l2, l1 and the BNN-specific l1.

Inputs are 2-d [rows, channels]; conv activations are flattened so that
rows = B*H*W.  Statistics are population statistics over rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import BitTensor
from .tensor import F32, StorageDtype, store

EPS = 1e-5
VARIANTS = ("l2", "l1", "l1_bnn")


@dataclass
class BnState:
    """Per-channel bias and the statistics cached by the last forward pass.

    ``d`` is the full denominator, epsilon included.  ``dtype`` is the
    storage format of beta and of the cached statistics.
    """

    beta: np.ndarray
    dtype: StorageDtype = F32
    mu: np.ndarray | None = field(default=None, repr=False)
    d: np.ndarray | None = field(default=None, repr=False)
    alpha: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zeros(cls, channels: int, dtype: StorageDtype = F32, compute=np.float32):
        return cls(np.zeros(channels, dtype=compute), dtype)

    @property
    def channels(self) -> int:
        return int(self.beta.shape[0])


def _check_input(y: np.ndarray, s: BnState):
    if y.ndim != 2 or y.shape[1] != s.channels:
        raise ValueError(f"expected [rows, {s.channels}] input, got {y.shape}")
    if y.shape[0] < 2:
        raise ValueError("batch norm needs at least 2 rows")


def _check_grad(dx: np.ndarray, s: BnState, need_alpha=False):
    if s.mu is None or s.d is None:
        raise ValueError("batch norm backward called before forward")
    if need_alpha and s.alpha is None:
        raise ValueError("BNN-specific backward needs the cached alpha")
    if dx.ndim != 2 or dx.shape[1] != s.channels:
        raise ValueError(f"gradient shape {dx.shape} inconsistent with {s.channels} channels")


def bn_l2_forward(y, s: BnState, eps: float = EPS) -> np.ndarray:
    y = np.asarray(y)
    _check_input(y, s)
    s.mu = store(y.mean(axis=0), s.dtype)
    yc = y - s.mu
    s.d = store(np.sqrt(np.mean(yc * yc, axis=0)) + eps, s.dtype)
    s.alpha = None
    return yc / s.d + s.beta


def bn_l1_forward(y, s: BnState, eps: float = EPS) -> np.ndarray:
    y = np.asarray(y)
    _check_input(y, s)
    s.mu = store(y.mean(axis=0), s.dtype)
    yc = y - s.mu
    s.d = store(np.mean(np.abs(yc), axis=0) + eps, s.dtype)
    x = yc / s.d + s.beta
    # float64 accumulation: a channel of equal magnitudes gets exactly that magnitude
    alpha = np.mean(np.abs(x), axis=0, dtype=np.float64).astype(x.dtype)
    s.alpha = store(alpha, s.dtype)
    return x


def bn_forward(y, s: BnState, variant: str, eps: float = EPS) -> np.ndarray:
    if variant == "l2":
        return bn_l2_forward(y, s, eps)
    if variant in ("l1", "l1_bnn"):
        return bn_l1_forward(y, s, eps)
    raise ValueError(f"unknown batch norm variant {variant!r}")


def bn_l2_backward(dx, s: BnState, x):
    """Standard backward; ``x`` is the post-bias forward output.

    The normalizer derivative uses the centred value x - beta.
    """
    dx = np.asarray(dx)
    _check_grad(dx, s)
    xc = np.asarray(x) - s.beta
    v = dx / s.d
    dy = v - v.mean(axis=0) - np.mean(v * xc, axis=0) * xc
    return dy, dx.sum(axis=0)


def _sign(x):
    return np.where(x >= 0, 1, -1).astype(x.dtype)


def bn_l1_backward_plain(dx, s: BnState, x):
    """l1 backward in the mixed x / sign(x) form, reading high-precision x.

    As in the l2 backward, the x-term is centred (x - beta); the sign is that
    of the binary activation.
    """
    dx = np.asarray(dx)
    _check_grad(dx, s)
    x = np.asarray(x)
    v = dx / s.d
    dy = v - v.mean(axis=0) - np.mean(v * (x - s.beta), axis=0) * _sign(x)
    return dy, dx.sum(axis=0)


def bn_l1_backward_bnn(dx, s: BnState, x_hat):
    """l1 backward that only sees binary x_hat and the cached alpha.

    x is reconstructed as x_hat * alpha (centred as x_hat * alpha - beta); no
    [rows, channels] real-valued activation is read.
    """
    dx = np.asarray(dx)
    _check_grad(dx, s, need_alpha=True)
    if isinstance(x_hat, BitTensor):
        xh = x_hat.decode(dx.dtype)
    else:
        xh = np.asarray(x_hat, dtype=dx.dtype)
        if not np.all(np.abs(xh) == 1):
            raise ValueError("x_hat must be +-1")
    if xh.shape != dx.shape:
        raise ValueError(f"x_hat shape {xh.shape} does not match gradient {dx.shape}")
    v = dx / s.d
    dy = v - v.mean(axis=0) - np.mean(v * (xh * s.alpha - s.beta), axis=0) * xh
    return dy, dx.sum(axis=0)

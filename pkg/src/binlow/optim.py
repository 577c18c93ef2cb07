"""Weight-update rules, binary-gradient attenuation and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .quant import BitTensor
from .tensor import F32, StorageDtype, store

KINDS = ("adam", "sgd_momentum", "bop")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    gamma: float = 1e-4
    tau: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"optimizer must be one of {KINDS}, got {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class OptimizerState:
    """Momenta for one parameter tensor.

    ``dtype`` is the storage format of the momenta: they are computed in the
    compute dtype and rounded on store.
    """

    kind: str
    m: np.ndarray
    v: np.ndarray | None = None
    t: int = 0
    dtype: StorageDtype = F32

    @classmethod
    def zeros(cls, kind: str, shape, dtype: StorageDtype = F32, compute=np.float32):
        m = np.zeros(shape, dtype=compute)
        v = np.zeros(shape, dtype=compute) if kind == "adam" else None
        return cls(kind, m, v, 0, dtype)

    def arrays(self) -> dict:
        out = {"m": self.m}
        if self.v is not None:
            out["v"] = self.v
        return out


def attenuate_binary_gradient(dw_hat: BitTensor | np.ndarray, fan_in: int, dtype=np.float32):
    """+-1 gradient signs scaled to +-1/sqrt(N)."""
    if fan_in < 1:
        raise ValueError("fan-in must be at least 1")
    signs = dw_hat.decode(dtype) if isinstance(dw_hat, BitTensor) else np.asarray(dw_hat, dtype)
    return signs / np.asarray(math.sqrt(fan_in), dtype=dtype)


def _check(w, g):
    if np.shape(w) != np.shape(g):
        raise ValueError(f"parameter shape {np.shape(w)} and gradient shape {np.shape(g)} differ")


def adam_update(w, g, state: OptimizerState, lr: float, cfg: OptimizerConfig = OptimizerConfig(),
                clip: bool = True):
    _check(w, g)
    state.t += 1
    state.m = store(cfg.beta1 * state.m + (1 - cfg.beta1) * g, state.dtype)
    state.v = store(cfg.beta2 * state.v + (1 - cfg.beta2) * g * g, state.dtype)
    m_hat = state.m / (1 - cfg.beta1 ** state.t)
    v_hat = state.v / (1 - cfg.beta2 ** state.t)
    w = w - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return np.clip(w, -1, 1) if clip else w


def sgd_momentum_update(w, g, state: OptimizerState, lr: float,
                        cfg: OptimizerConfig = OptimizerConfig(), clip: bool = True):
    _check(w, g)
    state.t += 1
    state.m = store(cfg.momentum * state.m + g, state.dtype)
    w = w - lr * state.m
    return np.clip(w, -1, 1) if clip else w


def bop_update(w, g, state: OptimizerState, cfg: OptimizerConfig = OptimizerConfig()):
    """Flip w where the gradient EMA is confidently aligned with it."""
    _check(w, g)
    state.t += 1
    state.m = store((1 - cfg.gamma) * state.m + cfg.gamma * g, state.dtype)
    w = np.where(np.asarray(w) >= 0, 1, -1).astype(state.m.dtype)
    flip = (np.abs(state.m) > cfg.tau) & (np.sign(state.m) == w)
    return np.where(flip, -w, w)


def update(w, g, state: OptimizerState, lr: float, cfg: OptimizerConfig, clip: bool = True):
    if state.kind == "adam":
        return adam_update(w, g, state, lr, cfg, clip)
    if state.kind == "sgd_momentum":
        return sgd_momentum_update(w, g, state, lr, cfg, clip)
    if state.kind == "bop":
        return bop_update(w, g, state, cfg)
    raise ValueError(f"unknown optimizer kind {state.kind!r}")


# -- schedules ---------------------------------------------------------------

@dataclass
class LrSchedule:
    """``dev_based``: decay after ``patience`` evaluations without a new best.
    ``fixed_decay``: decay when a milestone epoch completes."""

    kind: str = "dev_based"
    lr: float = 1e-3
    patience: int = 50
    factor: float = 0.5
    milestones: tuple = (70, 90, 110)
    best: float | None = None
    bad: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("dev_based", "fixed_decay"):
            raise ValueError(f"schedule must be dev_based or fixed_decay, got {self.kind!r}")
        if not self.lr > 0 or not 0 < self.factor <= 1:
            raise ValueError("need lr > 0 and 0 < factor <= 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        self.milestones = tuple(int(m) for m in self.milestones)


def schedule_step(sched: LrSchedule, *, dev_accuracy: float | None = None,
                  epoch: int | None = None) -> float:
    """Advance the schedule after one epoch and return the new learning rate."""
    if sched.kind == "dev_based":
        if dev_accuracy is None:
            raise ValueError("dev_based schedule needs the dev accuracy")
        if sched.best is None or dev_accuracy > sched.best:
            sched.best = dev_accuracy
            sched.bad = 0
        else:
            sched.bad += 1
            if sched.bad >= sched.patience:
                sched.lr *= sched.factor
                sched.bad = 0
    else:
        if epoch is None:
            raise ValueError("fixed_decay schedule needs the epoch number")
        if epoch in sched.milestones:
            sched.lr *= sched.factor
    sched.history.append(sched.lr)
    return sched.lr

"""Analytic memory footprint, per-batch energy estimate and gradient density.

Everything here is a pure function of (topology, scheme, batch size, cost
model); the engine's StepTrace feeds the same per-layer accounting with the
geometry it observed at run time, so the two can be cross-checked.
"""

from __future__ import annotations

import csv
import io
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scheme import Scheme, resolve
from .tensor import StorageDtype, nbytes_for, parse_dtype
from .topology import LayerGeom, geometry, input_size, resolve_topology

MIB = 2 ** 20
PERSISTENT = "persistent"
TRANSIENT = "transient"
MEMORY_COLUMNS = ("variable", "lifetime", "dtype", "bytes")
MOMENTA_PER_PARAM = {"adam": 2, "sgd_momentum": 1, "bop": 1}


# -- memory ------------------------------------------------------------------

@dataclass(frozen=True)
class MemRow:
    variable: str
    lifetime: str
    dtype: str
    bytes: int


@dataclass
class MemoryReport:
    rows: list

    @property
    def total(self) -> int:
        return sum(r.bytes for r in self.rows)

    @property
    def total_mib(self) -> float:
        return self.total / MIB

    def row(self, name: str) -> MemRow:
        for r in self.rows:
            if r.variable == name:
                return r
        raise KeyError(name)

    def saving_vs(self, baseline: "MemoryReport") -> float:
        """How many times smaller this report is than ``baseline``."""
        return baseline.total / self.total

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MEMORY_COLUMNS)
        for r in self.rows:
            w.writerow((r.variable, r.lifetime, r.dtype, r.bytes))
        return buf.getvalue()

    def table(self, baseline: "MemoryReport | None" = None) -> str:
        lines = [f"{'variable':<16}{'lifetime':<12}{'dtype':<10}{'MiB':>10}"
                 + (f"{'saving':>9}" if baseline else "")]
        base_rows = baseline.rows if baseline else [None] * len(self.rows)
        for r, b in zip(self.rows, base_rows):
            # rows come in a fixed order; the stats row name depends on the BN variant
            line = f"{r.variable:<16}{r.lifetime:<12}{r.dtype:<10}{r.bytes / MIB:>10.2f}"
            if b is not None:
                line += f"{b.bytes / r.bytes:>8.2f}x" if r.bytes else f"{'-':>9}"
            lines.append(line)
        tail = f"{'total':<38}{self.total_mib:>10.2f}"
        if baseline:
            tail += f"{self.saving_vs(baseline):>8.2f}x"
        return "\n".join(lines + [tail])


def memory_rows(geoms: list[LayerGeom], n_input: int, scheme: Scheme, batch: int,
                optimizer: str = "adam", input_dtype: StorageDtype | None = None) -> list[MemRow]:
    """Table 2 variable classes for the given per-layer geometry.

    Persistent variables sum over layers.  Y/dX and dY are transient: they
    are allocated once at the size of the largest activation (network input
    included) and shared by every layer.
    """
    if optimizer not in MOMENTA_PER_PARAM:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    base, xd = scheme.base_dtype, scheme.x_dtype
    ind = parse_dtype(input_dtype) if input_dtype is not None else xd
    b = int(batch)
    x_bytes = nbytes_for(b * n_input, ind) + sum(nbytes_for(b * g.x, xd) for g in geoms)
    largest = max([n_input] + [g.y for g in geoms] + [g.x for g in geoms]) if geoms else 0
    params = sum(g.params for g in geoms)
    chans = sum(g.M for g in geoms)
    stats = 3 if scheme.bn_variant == "l1_bnn" else 2  # mu, d (+ alpha)
    stat_name = "mu/sigma/alpha" if stats == 3 else "mu/sigma"
    return [
        MemRow("X", PERSISTENT, xd.name, x_bytes),
        MemRow("dX/Y", TRANSIENT, base.name, nbytes_for(b * largest, base)),
        MemRow(stat_name, PERSISTENT, base.name, nbytes_for(stats * chans, base)),
        MemRow("dY", TRANSIENT, scheme.dY_dtype.name, nbytes_for(b * largest, scheme.dY_dtype)),
        MemRow("W", PERSISTENT, base.name, nbytes_for(params, base)),
        MemRow("dW", PERSISTENT, scheme.dW_dtype.name,
               sum(nbytes_for(g.params, scheme.dW_dtype) for g in geoms)),
        MemRow("beta/dbeta", PERSISTENT, base.name, nbytes_for(2 * chans, base)),
        MemRow("momenta", PERSISTENT, base.name,
               nbytes_for(MOMENTA_PER_PARAM[optimizer] * params, base)),
    ]


def memory_footprint(topology, scheme, batch: int, optimizer: str = "adam",
                     input_dtype=None) -> MemoryReport:
    topo = resolve_topology(topology)
    scheme = resolve(scheme)
    return MemoryReport(memory_rows(geometry(topo), input_size(topo), scheme, batch,
                                    optimizer, input_dtype))


# -- cost model --------------------------------------------------------------

# Joules.  45 nm figures; shift/xnor/popcount per 32-bit word at int-add cost.
DEFAULT_COSTS = {
    "op.f32.add": 0.9e-12,
    "op.f32.mul": 3.7e-12,
    "op.f16.add": 0.4e-12,
    "op.f16.mul": 1.1e-12,
    "op.int32.add": 0.1e-12,
    "op.int32.mul": 3.1e-12,
    "op.shift.word": 0.1e-12,
    "op.xnor.word": 0.1e-12,
    "op.popcount.word": 0.1e-12,
    "mem.dram.word": 640e-12,   # one 32-bit off-chip access
}

_LINE = re.compile(r"^\s*([A-Za-z0-9_.]+)\s*=\s*([-+0-9.eE]+)\s*$")


@dataclass
class CostModel:
    costs: dict = field(default_factory=lambda: dict(DEFAULT_COSTS))

    def __post_init__(self):
        for k, v in self.costs.items():
            if not v > 0:
                raise ValueError(f"cost {k} must be positive, got {v}")

    def __getitem__(self, key: str) -> float:
        try:
            return self.costs[key]
        except KeyError:
            raise KeyError(f"cost model has no entry {key!r}") from None

    @classmethod
    def parse(cls, text: str, base: dict | None = None) -> "CostModel":
        """Parse ``key = joules`` lines; ``#`` starts a comment."""
        costs = dict(DEFAULT_COSTS if base is None else base)
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            m = _LINE.match(line)
            if not m:
                raise ValueError(f"cost file line {n}: expected 'key = value', got {raw!r}")
            costs[m.group(1)] = float(m.group(2))
        return cls(costs)

    @classmethod
    def load(cls, path) -> "CostModel":
        return cls.parse(Path(path).read_text())


# -- op and traffic ledger ---------------------------------------------------

@dataclass
class OpLedger:
    """Op counts keyed like the cost model, plus off-chip traffic in bits."""

    ops: Counter = field(default_factory=Counter)
    traffic_bits: float = 0.0

    def add(self, other: "OpLedger") -> "OpLedger":
        self.ops.update(other.ops)
        self.traffic_bits += other.traffic_bits
        return self


def _bits(d: StorageDtype) -> int:
    return d.bits


def _float_macs(ops: Counter, n):
    ops["op.f32.mul"] += n
    ops["op.f32.add"] += n


def layer_ledger(g: LayerGeom, scheme: Scheme, batch: int, optimizer: str = "adam",
                 include_optimizer: bool = True) -> OpLedger:
    """Ops and memory traffic of one layer for one training step.

    Float arithmetic is costed at f32 throughout: the modeled processor
    only has 32-bit arithmetic natively, narrower formats save traffic only.
    Every buffer is written once and read once per use site.
    """
    b = int(batch)
    led = OpLedger()
    ops = led.ops
    macs = b * g.R * g.K * g.M
    rows_y = b * g.y
    rows_x = b * g.x
    base, xd = _bits(scheme.base_dtype), _bits(scheme.x_dtype)
    dyk = scheme.dY_dtype.kind
    params = g.params

    # forward matmul
    if not scheme.binary:
        _float_macs(ops, macs)
    elif g.first:
        ops["op.f32.add"] += macs          # real input times +-1: add or subtract
    else:
        words = macs / 32
        ops["op.xnor.word"] += words
        ops["op.popcount.word"] += words
        ops["op.int32.add"] += words

    # backward matmuls: dW always, dX except for the first layer
    bmacs = macs * (1 if g.first else 2)
    if not scheme.binary or dyk in ("f32", "f16"):
        _float_macs(ops, bmacs)
    elif dyk == "po2":
        ops["op.shift.word"] += bmacs
        ops["op.int32.add"] += bmacs
    else:                                   # block fp: integer mantissas
        ops["op.int32.add"] += bmacs

    # batch norm, per element of its input (forward) and gradient (backward)
    ops["op.f32.add"] += 4 * rows_x        # mean, centre, deviation sum, bias
    ops["op.f32.mul"] += 1 * rows_x        # divide by d
    if scheme.bn_variant == "l2":
        ops["op.f32.mul"] += 2 * rows_x    # square and the root's amortized share
    if scheme.bn_variant == "l1_bnn":
        ops["op.f32.add"] += rows_x        # alpha accumulation
    ops["op.f32.add"] += 4 * rows_x
    ops["op.f32.mul"] += 3 * rows_x

    # gradient quantizers
    if dyk == "po2":
        ops["op.f32.add"] += rows_y        # max-magnitude reduction
        ops["op.int32.add"] += 2 * rows_y  # exponent bias and clamp
    elif dyk == "blockfp":
        ops["op.f32.add"] += rows_y
        ops["op.f32.mul"] += rows_y
        ops["op.int32.add"] += rows_y
    elif dyk == "f16":
        ops["op.int32.add"] += rows_y
    if scheme.dW_dtype.kind == "bool1" and scheme.attenuate:
        ops["op.f32.mul"] += params        # scale by 1/sqrt(N)

    # Traffic.  Matmul results (Y, dX, dW) leave the accumulator at 32 bits.
    # X is written by BN in its storage format.  Gradient quantizers run as
    # their own pass: BN backward writes dY at 32 bits, the quantizer reads
    # it and writes the coded dY.  The update reads dW in its stored format.
    t = rows_y * 32 * 2                    # Y: matmul write, BN read
    t += rows_x * xd * 4                   # X: BN write; next matmul, BN bwd, dW reads
    t += rows_x * 32 * 2                   # dX: matmul write, STE/BN bwd read
    dyb = _bits(scheme.dY_dtype)
    reads = 1 if g.first else 2
    if dyk == "f32":
        t += rows_y * 32 * (1 + reads)
    else:
        t += rows_y * 32 * 2 + rows_y * dyb * (1 + reads)
    t += params * base * 4                 # W: fwd, bwd, update reads; update write
    t += params * 32 + params * _bits(scheme.dW_dtype)
    # BN statistics and beta: small per-channel vectors
    stats = 3 if scheme.bn_variant == "l1_bnn" else 2
    t += g.M * base * (2 * stats + 3 + 2)

    if include_optimizer:
        if optimizer not in MOMENTA_PER_PARAM:
            raise ValueError(f"unknown optimizer {optimizer!r}")
        if optimizer == "adam":
            ops["op.f32.mul"] += 7 * params
            ops["op.f32.add"] += 6 * params
        elif optimizer == "sgd_momentum":
            ops["op.f32.mul"] += 2 * params
            ops["op.f32.add"] += 2 * params
        else:
            ops["op.f32.mul"] += 2 * params
            ops["op.f32.add"] += 2 * params
        t += params * base * 2 * MOMENTA_PER_PARAM[optimizer]
    led.traffic_bits = t
    return led


def input_ledger(n_input: int, batch: int, input_bits: int = 32) -> OpLedger:
    """The network input: written once, read by the first forward and dW matmuls."""
    return OpLedger(traffic_bits=batch * n_input * input_bits * 3)


def step_ledger(topology, scheme, batch: int, optimizer: str = "adam",
                include_optimizer: bool = True) -> OpLedger:
    topo = resolve_topology(topology)
    scheme = resolve(scheme)
    led = input_ledger(input_size(topo), batch, scheme.base_dtype.bits)
    for g in geometry(topo):
        led.add(layer_ledger(g, scheme, batch, optimizer, include_optimizer))
    return led


def energy_from_ledger(led: OpLedger, cost: CostModel | None = None) -> dict:
    cost = cost or CostModel()
    ops_j = sum(n * cost[k] for k, n in sorted(led.ops.items()) if n)
    mem_j = led.traffic_bits / 32 * cost["mem.dram.word"] if led.traffic_bits else 0.0
    return {"ops_energy": ops_j * 1e3, "memory_energy": mem_j * 1e3,
            "total": (ops_j + mem_j) * 1e3}


def energy_estimate(source, scheme=None, batch: int | None = None, cost: CostModel | None = None,
                    optimizer: str = "adam", include_optimizer: bool = True) -> dict:
    """Per-batch training energy in mJ.

    ``source`` is either an object with a ``ledger`` (a StepTrace), an
    OpLedger, or a topology together with ``scheme`` and ``batch``.
    """
    if isinstance(source, OpLedger):
        return energy_from_ledger(source, cost)
    if hasattr(source, "ledger"):
        return energy_from_ledger(source.ledger, cost)
    if scheme is None or batch is None:
        raise ValueError("energy_estimate needs scheme and batch for a topology")
    return energy_from_ledger(step_ledger(source, scheme, batch, optimizer, include_optimizer),
                              cost)


ENERGY_COLUMNS = ("component", "mJ")


def energy_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ENERGY_COLUMNS)
    for k in ("ops_energy", "memory_energy", "total"):
        w.writerow((k, repr(float(report[k]))))
    return buf.getvalue()


# -- gradient density --------------------------------------------------------

def gradient_density(v) -> float:
    """phi(v) = ||v||_1^2 / (N ||v||_2^2), in (0, 1]."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0 or not np.any(v):
        raise ValueError("density of a zero vector is undefined")
    s = np.max(np.abs(v))
    v = v / s  # avoid overflow in the squares; phi is scale invariant
    return float(np.sum(np.abs(v)) ** 2 / (v.size * np.sum(v * v)))


@dataclass
class DensityTrace:
    epochs: list
    gradient: list
    noise: list
    flagged: list       # epochs where the two densities differ by more than 10x

    @property
    def ok(self) -> bool:
        return not self.flagged and all(0 < d <= 1 for d in self.gradient + self.noise)


def density_trace(snapshots, ratio_limit: float = 10.0) -> DensityTrace:
    """Per-epoch densities from gradient snapshots.

    ``snapshots`` maps epoch -> sequence of (mean, sd) pairs, one per
    unquantized dW snapshot taken in that epoch.  The weight gradient
    density is phi of the means, the weight noise density phi of the sds.
    """
    items = sorted(snapshots.items())
    if len(items) < 2:
        raise ValueError("density trace needs at least 2 epochs")
    epochs, grad, noise, flagged = [], [], [], []
    for epoch, pairs in items:
        pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
        g = gradient_density(pairs[:, 0])
        n = gradient_density(pairs[:, 1])
        epochs.append(epoch)
        grad.append(g)
        noise.append(n)
        if max(g, n) > ratio_limit * min(g, n):
            flagged.append(epoch)
    return DensityTrace(epochs, grad, noise, flagged)


def snapshot_stats(dw) -> tuple:
    dw = np.asarray(dw, dtype=np.float64)
    return float(dw.mean()), float(dw.std())


__all__ = [
    "MIB", "MemRow", "MemoryReport", "memory_rows", "memory_footprint", "CostModel",
    "DEFAULT_COSTS", "OpLedger", "layer_ledger", "input_ledger", "step_ledger",
    "energy_estimate", "energy_from_ledger", "energy_csv", "gradient_density",
    "DensityTrace", "density_trace", "snapshot_stats",
]

"""Network topologies and their static shape walk.

A topology is an input shape, an ordered list of layer specs and the
pool/BN order used by its conv layers.  ``geometry`` derives the per-layer
sizes that both the training engine and the analytic reports rely on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .layers import conv_geometry


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # "dense" or "conv"
    out: int                  # units or output channels
    kernel: int = 3
    stride: int = 1
    padding: str = "same"
    pool: int | None = None   # max-pool window, conv only

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.out < 1:
            raise ValueError("layer width must be positive")
        if self.kind == "dense" and self.pool:
            raise ValueError("dense layers cannot pool")


@dataclass(frozen=True)
class Topology:
    name: str
    input_shape: tuple        # (H, W, C)
    layers: tuple
    order: str = "pool_bn"    # "pool_bn" (BinaryNet) or "bn_pool" (FINN CNV)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("topology needs at least one layer")
        if self.order not in ("pool_bn", "bn_pool"):
            raise ValueError(f"order must be 'pool_bn' or 'bn_pool', got {self.order!r}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(
            s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in self.layers))

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape), "order": self.order,
                "layers": [asdict(s) for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        unknown = set(d) - {"name", "input_shape", "layers", "order"}
        if unknown:
            raise ValueError(f"unknown topology keys: {sorted(unknown)}")
        return cls(d.get("name", "custom"), tuple(d["input_shape"]),
                   tuple(LayerSpec(**s) for s in d["layers"]), d.get("order", "pool_bn"))


@dataclass(frozen=True)
class LayerGeom:
    """Per-sample sizes for one layer (counts of elements, not bytes)."""

    kind: str
    first: bool
    last: bool
    R: int        # output positions (conv) or 1 (dense)
    K: int        # inner dimension of the matmul (fan-in)
    M: int        # output channels / units
    x_in: int     # layer input, after any pooling of the previous layer
    y: int        # matmul output R*M
    x: int        # BN output (post-pool for pool_bn, pre-pool for bn_pool)
    pooled: bool = False

    @property
    def params(self) -> int:
        return self.K * self.M


def geometry(topo: Topology) -> list[LayerGeom]:
    h, w, c = topo.input_shape
    spatial = True
    out = []
    n = len(topo.layers)
    for i, s in enumerate(topo.layers):
        x_in = h * w * c if spatial else c
        if s.kind == "conv":
            if not spatial:
                raise ValueError("conv layer after a dense layer")
            (ho, wo), _ = conv_geometry(h, w, s.kernel, s.kernel, s.stride, s.padding)
            r, k = ho * wo, s.kernel * s.kernel * c
            y = r * s.out
            x = y
            h, w, c = ho, wo, s.out
            if s.pool:
                if h % s.pool or w % s.pool:
                    raise ValueError(f"pool {s.pool} does not divide {h}x{w} in layer {i}")
                h, w = h // s.pool, w // s.pool
                if topo.order == "pool_bn":
                    x = h * w * c
        else:
            r, k = 1, x_in
            y = x = s.out
            spatial = False
            c = s.out
            h = w = 1
        out.append(LayerGeom(s.kind, i == 0, i == n - 1, r, k, s.out, x_in, y, x, bool(s.pool)))
    return out


def param_count(topo: Topology) -> int:
    return sum(g.params for g in geometry(topo))


def channel_count(topo: Topology) -> int:
    return sum(g.M for g in geometry(topo))


def input_size(topo: Topology) -> int:
    return math.prod(topo.input_shape)


def _conv(out, pool=None, padding="same"):
    return LayerSpec("conv", out, 3, 1, padding, pool)


def _dense(out):
    return LayerSpec("dense", out)


TOPOLOGIES = {
    "mlp5_256": Topology("mlp5_256", (28, 28, 1),
                         tuple(_dense(256) for _ in range(4)) + (_dense(10),)),
    "cnv": Topology("cnv", (32, 32, 3), (
        _conv(64, padding="valid"), _conv(64, 2, "valid"),
        _conv(128, padding="valid"), _conv(128, 2, "valid"),
        _conv(256, padding="valid"), _conv(256, padding="valid"),
        _dense(512), _dense(512), _dense(10)), order="bn_pool"),
    "binarynet": Topology("binarynet", (32, 32, 3), (
        _conv(128), _conv(128, 2), _conv(256), _conv(256, 2), _conv(512), _conv(512, 2),
        _dense(1024), _dense(1024), _dense(10)), order="pool_bn"),
    # CNV with a quarter of the channels, for desk-scale CIFAR ablations
    "cnv_small": Topology("cnv_small", (32, 32, 3), (
        _conv(16, padding="valid"), _conv(16, 2, "valid"),
        _conv(32, padding="valid"), _conv(32, 2, "valid"),
        _conv(64, padding="valid"), _conv(64, padding="valid"),
        _dense(128), _dense(128), _dense(10)), order="bn_pool"),
}


def resolve_topology(t) -> Topology:
    if isinstance(t, Topology):
        return t
    if isinstance(t, dict):
        return Topology.from_dict(t)
    if t in TOPOLOGIES:
        return TOPOLOGIES[t]
    raise ValueError(f"unknown topology {t!r}; known: {sorted(TOPOLOGIES)}")


__all__ = ["LayerSpec", "Topology", "LayerGeom", "geometry", "param_count", "channel_count",
           "input_size", "TOPOLOGIES", "resolve_topology"]

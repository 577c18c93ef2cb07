"""Training engine: model construction, train step, epoch loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    PERSISTENT, TRANSIENT, MemoryReport, MemRow, OpLedger, input_ledger, layer_ledger,
    snapshot_stats,
)
from .layers import ConvLayer, DenseLayer, conv_geometry
from .optim import (
    LrSchedule, OptimizerConfig, OptimizerState, attenuate_binary_gradient, schedule_step, update,
)
from .quant import BitTensor, sign
from .scheme import Scheme, resolve
from .tensor import F32, nbytes_for, store
from .topology import LayerGeom, Topology, resolve_topology

CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("epoch", "train_acc", "dev_acc", "test_acc", "loss", "lr")


class NumericError(RuntimeError):
    """A NaN or inf appeared; ``layer`` and ``phase`` say where."""

    def __init__(self, layer, phase: str, what: str):
        self.layer = layer
        self.phase = phase
        super().__init__(f"non-finite {what} in layer {layer} during {phase}")


# -- configuration -----------------------------------------------------------

@dataclass
class TrainConfig:
    topology: Topology
    scheme: Scheme = field(default_factory=Scheme)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: dict = field(default_factory=lambda: {"kind": "dev_based", "patience": 50,
                                                     "factor": 0.5})
    batch_size: int = 100
    epochs: int = 50
    seed: int = 0
    compute: str = "float32"
    density_batches: int = 8   # unquantized dW snapshots per epoch, 0 disables

    def __post_init__(self):
        self.topology = resolve_topology(self.topology)
        self.scheme = resolve(self.scheme)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 for batch norm")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.compute not in ("float32", "float64"):
            raise ValueError("compute must be float32 or float64")
        self.make_schedule()  # validates

    def make_schedule(self) -> LrSchedule:
        unknown = set(self.schedule) - {"kind", "patience", "factor", "milestones"}
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return LrSchedule(lr=self.optimizer.lr, **self.schedule)

    def to_dict(self) -> dict:
        return {"topology": self.topology.to_dict(), "scheme": self.scheme.to_dict(),
                "optimizer": asdict(self.optimizer), "schedule": dict(self.schedule),
                "batch_size": self.batch_size, "epochs": self.epochs, "seed": self.seed,
                "compute": self.compute, "density_batches": self.density_batches}

    def digest(self) -> str:
        """Digest of everything that determines the run except the epoch count."""
        d = self.to_dict()
        d.pop("epochs")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


# -- model -------------------------------------------------------------------

class Model:
    def __init__(self, config: TrainConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.compute = np.dtype(config.compute)
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        topo = config.topology
        shape = topo.input_shape
        self.layers = []
        n = len(topo.layers)
        spatial, h, w, c = True, *shape
        for i, s in enumerate(topo.layers):
            opts = dict(first=i == 0, last=i == n - 1, compute=self.compute)
            if s.kind == "conv":
                layer = ConvLayer(s.kernel, s.kernel, c, s.out, rng, stride=s.stride,
                                  padding=s.padding, pool=s.pool, order=topo.order, **opts)
                (h, w), _ = conv_geometry(h, w, s.kernel, s.kernel, s.stride, s.padding)
                if s.pool:
                    h, w = h // s.pool, w // s.pool
                c = s.out
            else:
                n_in = h * w * c if spatial else c
                layer = DenseLayer(n_in, s.out, rng, **opts)
                spatial, c = False, s.out
            self.layers.append(layer)
        scheme = config.scheme
        kind = config.optimizer.kind
        for layer in self.layers:
            if kind == "bop":
                layer.W = sign(layer.W)
            layer.W = store(layer.W, scheme.base_dtype)
        self.w_states = [OptimizerState.zeros(kind, l.W.shape, scheme.base_dtype, self.compute)
                         for l in self.layers]
        b_kind = "adam" if kind == "bop" else kind
        self.b_states = [OptimizerState.zeros(b_kind, l.channels, F32, self.compute)
                         for l in self.layers]

    @property
    def scheme(self) -> Scheme:
        return self.config.scheme

    def clear(self):
        for layer in self.layers:
            layer.clear()

    def forward(self, inputs) -> np.ndarray:
        a = store(np.asarray(inputs, dtype=self.compute), self.scheme.base_dtype)
        self._input = a
        for i, layer in enumerate(self.layers):
            a = layer.forward(a, self.scheme)
            if layer.x is not None and not np.all(np.isfinite(layer.x)):
                raise NumericError(i, "forward", "activation")
            if not (np.all(np.isfinite(layer.bn.mu)) and np.all(np.isfinite(layer.bn.d))):
                raise NumericError(i, "forward", "batch-norm statistics")
        return a

    def backward(self, g, scheme: Scheme | None = None):
        """Backward through all layers; returns per-layer (dW, dbeta) pairs."""
        scheme = scheme or self.scheme
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            a_in = self._input if i == 0 else self.layers[i - 1].regenerate_output(scheme)
            d_in, dw, dbeta, _ = layer.backward(g, a_in, scheme)
            if not isinstance(dw, BitTensor) and not np.all(np.isfinite(dw)):
                raise NumericError(i, "backward", "weight gradient")
            if d_in is not None and not np.all(np.isfinite(d_in)):
                raise NumericError(i, "backward", "input gradient")
            grads[i] = (dw, dbeta)
            g = d_in
        return grads

    def apply_update(self, grads, lr: float):
        scheme, cfg = self.scheme, self.config.optimizer
        for i, (layer, (dw, dbeta)) in enumerate(zip(self.layers, grads)):
            if isinstance(dw, BitTensor):
                gw = (attenuate_binary_gradient(dw, layer.fan_in, self.compute) if scheme.attenuate
                      else dw.decode(self.compute))
            else:
                gw = dw
            w = update(layer.W, gw, self.w_states[i], lr, cfg)
            layer.W = store(w.astype(self.compute), scheme.base_dtype)
            b = update(layer.bn.beta, dbeta, self.b_states[i], lr, cfg, clip=False)
            layer.bn.beta = store(b.astype(self.compute), scheme.base_dtype)
            if not (np.all(np.isfinite(layer.W)) and np.all(np.isfinite(layer.bn.beta))):
                raise NumericError(i, "update", "parameter")

    # checkpoint payload
    def arrays(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"W{i}"] = layer.W.astype(np.float32)
            out[f"beta{i}"] = layer.bn.beta.astype(np.float32)
            for k, v in self.w_states[i].arrays().items():
                out[f"W{i}_{k}"] = v
            for k, v in self.b_states[i].arrays().items():
                out[f"beta{i}_{k}"] = v
        return out

    def load_arrays(self, arrs: dict, steps: list):
        for i, layer in enumerate(self.layers):
            layer.W = arrs[f"W{i}"].astype(self.compute)
            layer.bn.beta = arrs[f"beta{i}"].astype(self.compute)
            for st, prefix in ((self.w_states[i], f"W{i}"), (self.b_states[i], f"beta{i}")):
                st.m = arrs[f"{prefix}_m"].astype(self.compute)
                if st.v is not None:
                    st.v = arrs[f"{prefix}_v"].astype(self.compute)
            self.w_states[i].t, self.b_states[i].t = steps[i]


def build_model(config: TrainConfig) -> Model:
    return Model(config, np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[0]))


def reference_nonbinary_mode(config: TrainConfig, activation: str = "identity") -> TrainConfig:
    """Same topology and scheme quantizations with every sgn removed."""
    d = TrainConfig(**{**config.__dict__})
    d.scheme = config.scheme.with_(binary=False, activation=activation)
    return d


# -- step trace --------------------------------------------------------------

@dataclass(frozen=True)
class BufferRecord:
    name: str
    layer: int       # -1 for the network input
    dtype: str
    bytes: int
    lifetime: str


@dataclass
class StepTrace:
    buffers: list = field(default_factory=list)
    untracked: list = field(default_factory=list)  # scratch outside the Table 2 classes
    geoms: list = field(default_factory=list)
    ledger: OpLedger = field(default_factory=OpLedger)
    loss: float = float("nan")
    accuracy: float = float("nan")

    def record(self, name, layer, dtype, nbytes, lifetime=PERSISTENT):
        self.buffers.append(BufferRecord(name, layer, dtype, int(nbytes), lifetime))

    def buffers_named(self, name):
        return [b for b in self.buffers if b.name == name]

    def memory_report(self) -> MemoryReport:
        """Persistent buffers summed, transient ones at their largest instance."""
        rows, seen = [], []
        for b in self.buffers:
            if b.name not in seen:
                seen.append(b.name)
        for name in seen:
            bs = self.buffers_named(name)
            life = bs[0].lifetime
            total = (sum(b.bytes for b in bs) if life == PERSISTENT
                     else max(b.bytes for b in bs))
            dtypes = sorted({b.dtype for b in bs if b.layer >= 0}) or [bs[0].dtype]
            rows.append(MemRow(name, life, "/".join(dtypes), total))
        return MemoryReport(rows)


def _trace_step(model: Model, trace: StepTrace, grads, batch: int):
    scheme = model.scheme
    base = scheme.base_dtype
    b = batch
    trace.record("X", -1, base.name, nbytes_for(model._input.size, base))
    trace.record("dX/Y", -1, base.name, nbytes_for(model._input.size, base), TRANSIENT)
    trace.ledger.add(input_ledger(model._input[0].size, b, base.bits))
    opt = model.config.optimizer.kind
    for i, layer in enumerate(model.layers):
        st = layer.stats
        if layer.x is not None:
            trace.record("X", i, base.name, nbytes_for(layer.x.size, base))
            x_elems = layer.x.size
        else:
            trace.record("X", i, scheme.x_dtype.name, layer.x_bits.bits.nbytes)
            x_elems = int(np.prod(layer.x_bits.shape))
        trace.record("dX/Y", i, base.name, nbytes_for(st["y"], base), TRANSIENT)
        trace.record("dX/Y", i, base.name, nbytes_for(x_elems, base), TRANSIENT)
        bn = layer.bn
        stats = [bn.mu, bn.d] + ([bn.alpha] if scheme.bn_variant == "l1_bnn" else [])
        name = "mu/sigma/alpha" if len(stats) == 3 else "mu/sigma"
        trace.record(name, i, base.name, nbytes_for(sum(s.size for s in stats), base))
        trace.record("dY", i, scheme.dY_dtype.name, nbytes_for(st["y"], scheme.dY_dtype),
                     TRANSIENT)
        trace.record("W", i, base.name, nbytes_for(layer.W.size, base))
        dw, dbeta = grads[i]
        if isinstance(dw, BitTensor):
            trace.record("dW", i, scheme.dW_dtype.name, dw.bits.nbytes)
        else:
            trace.record("dW", i, scheme.dW_dtype.name, nbytes_for(dw.size, scheme.dW_dtype))
        trace.record("beta/dbeta", i, base.name, nbytes_for(bn.beta.size + dbeta.size, base))
        mom = sum(v.size for v in model.w_states[i].arrays().values())
        trace.record("momenta", i, base.name, nbytes_for(mom, base))
        beta_mom = sum(v.size for v in model.b_states[i].arrays().values())
        trace.untracked.append(BufferRecord("beta momenta", i, "f32", 4 * beta_mom, PERSISTENT))
        if layer.ste_bits is not None:
            trace.untracked.append(BufferRecord("STE mask", i, "bool1",
                                                layer.ste_bits.bits.nbytes, PERSISTENT))
        if layer.pool_idx is not None:
            trace.untracked.append(BufferRecord("pool argmax", i, "int8", layer.pool_idx.nbytes,
                                                PERSISTENT))
        in_elems = int(np.prod(layer.in_shape[1:]))
        geom = LayerGeom(layer.kind, layer.first, layer.last, st["rows"] // b, st["K"], st["M"],
                         in_elems, st["y"] // b, x_elems // b, bool(layer.pool))
        trace.geoms.append(geom)
        trace.ledger.add(layer_ledger(geom, scheme, b, opt))


# -- loss and step -----------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean loss and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = -np.mean(z[np.arange(n), labels] - np.log(e.sum(axis=1)))
    g = p
    g[np.arange(n), labels] -= 1
    return float(loss), g / n


def train_step(batch, model: Model, lr: float | None = None, trace: bool = True) -> StepTrace:
    """Forward, loss, backward and update on one batch."""
    inputs, labels = batch
    inputs = np.asarray(inputs)
    labels = np.asarray(labels)
    if inputs.shape[1:] != model.config.topology.input_shape:
        raise ValueError(f"inputs of shape {inputs.shape[1:]} do not match the topology's "
                         f"{model.config.topology.input_shape}")
    if inputs.shape[0] != labels.shape[0]:
        raise ValueError("inputs and labels differ in length")
    lr = model.config.optimizer.lr if lr is None else lr
    logits = model.forward(inputs)
    loss, g = softmax_cross_entropy(logits.astype(np.float64), labels)
    if not math.isfinite(loss):
        raise NumericError(len(model.layers) - 1, "loss", "loss")
    grads = model.backward(g.astype(model.compute))
    st = StepTrace(loss=loss, accuracy=float(np.mean(np.argmax(logits, axis=1) == labels)))
    if trace:
        _trace_step(model, st, grads, inputs.shape[0])
    model.apply_update(grads, lr)
    model.clear()
    return st


# -- evaluation --------------------------------------------------------------

def _chunks(n: int, batch: int):
    k = max(1, math.ceil(n / batch))
    return np.array_split(np.arange(n), k)


def evaluate(data, model: Model, batch: int | None = None, with_loss: bool = False):
    """Top-1 accuracy using each evaluation batch's own statistics."""
    x, y = data
    batch = batch or model.config.batch_size
    correct, loss = 0, 0.0
    for idx in _chunks(len(y), batch):
        logits = model.forward(x[idx])
        model.clear()
        correct += int(np.sum(np.argmax(logits, axis=1) == y[idx]))
        if with_loss:
            loss += softmax_cross_entropy(logits.astype(np.float64), y[idx])[0] * len(idx)
    acc = correct / len(y)
    return (acc, loss / len(y)) if with_loss else acc


def density_snapshots(data, model: Model, n_batches: int) -> list:
    """Per-layer (mean, sd) of unquantized dW on fixed training batches."""
    x, y = data
    b = model.config.batch_size
    raw = model.scheme.with_(dW_dtype="f32", dY_dtype="f32")
    out = []
    for k in range(n_batches):
        sl = slice(k * b, (k + 1) * b)
        if len(y[sl]) < 2:
            break
        logits = model.forward(x[sl])
        _, g = softmax_cross_entropy(logits.astype(np.float64), y[sl])
        grads = model.backward(g.astype(model.compute), raw)
        model.clear()
        out.append([snapshot_stats(dw) for dw, _ in grads])
    return out


# -- dataset and training loop -----------------------------------------------

@dataclass
class Dataset:
    train: tuple
    dev: tuple
    test: tuple

    @classmethod
    def split(cls, train_x, train_y, test_x, test_y, dev_fraction: float = 0.1):
        """The last ``dev_fraction`` of the training set becomes the dev set."""
        n = len(train_y)
        n_dev = int(round(n * dev_fraction))
        if n_dev < 2 or n - n_dev < 2:
            raise ValueError("training set too small for a dev split")
        cut = n - n_dev
        return cls((train_x[:cut], train_y[:cut]), (train_x[cut:], train_y[cut:]),
                   (test_x, test_y))


@dataclass
class RunResult:
    history: list          # one dict per epoch, keys METRIC_COLUMNS
    best_test: float       # highest test accuracy over the run
    density: dict          # epoch -> [snapshot][layer] (mean, sd)
    model: Model


def train(dataset: Dataset, config: TrainConfig, epochs: int | None = None,
          model: Model | None = None, on_epoch=None, start: dict | None = None) -> RunResult:
    """Seeded epoch loop with dev-based (or fixed) schedule and per-epoch evaluation.

    Epoch 0 is the evaluation of the initial model.  ``start`` resumes
    from a checkpoint state (see ``load_checkpoint``).
    """
    epochs = config.epochs if epochs is None else epochs
    shape = config.topology.input_shape
    for name, (x, y) in (("train", dataset.train), ("dev", dataset.dev), ("test", dataset.test)):
        if x.shape[1:] != shape:
            raise ValueError(f"{name} inputs have shape {x.shape[1:]}, topology expects {shape}")
        if y.max() >= config.topology.n_classes or y.min() < 0:
            raise ValueError(f"{name} labels outside [0, {config.topology.n_classes})")
    model = model or build_model(config)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    sched = config.make_schedule()
    history, density = [], {}
    first = 1
    if start:
        shuffle_rng.bit_generator.state = start["rng_state"]
        for k, v in start["schedule"].items():
            setattr(sched, k, v)
        history = list(start["history"])
        density = {int(k): v for k, v in start.get("density", {}).items()}
        first = start["epoch"] + 1
    else:
        tr_acc, tr_loss = evaluate(dataset.train, model, with_loss=True)
        history.append(_row(0, tr_acc, evaluate(dataset.dev, model),
                            evaluate(dataset.test, model), tr_loss, sched.lr))
        if config.density_batches:
            density[0] = density_snapshots(dataset.train, model, config.density_batches)
        if on_epoch:
            on_epoch(0, model, history, sched, shuffle_rng, density)
    x, y = dataset.train
    b = config.batch_size
    for epoch in range(first, epochs + 1):
        perm = shuffle_rng.permutation(len(y))
        losses, accs = [], []
        lr = sched.lr
        for k in range(len(y) // b):
            idx = perm[k * b:(k + 1) * b]
            st = train_step((x[idx], y[idx]), model, lr, trace=False)
            losses.append(st.loss)
            accs.append(st.accuracy)
        dev = evaluate(dataset.dev, model)
        test = evaluate(dataset.test, model)
        if sched.kind == "dev_based":
            schedule_step(sched, dev_accuracy=dev)
        else:
            schedule_step(sched, epoch=epoch)
        history.append(_row(epoch, float(np.mean(accs)), dev, test, float(np.mean(losses)), lr))
        if config.density_batches:
            density[epoch] = density_snapshots(dataset.train, model, config.density_batches)
        if on_epoch:
            on_epoch(epoch, model, history, sched, shuffle_rng, density)
    return RunResult(history, max(h["test_acc"] for h in history), density, model)


def dev_selected_test_accuracy(history) -> float:
    """Test accuracy at the epoch with the best dev accuracy (earliest on ties)."""
    return max(history, key=lambda h: h["dev_acc"])["test_acc"]


def _row(epoch, train_acc, dev_acc, test_acc, loss, lr) -> dict:
    return {"epoch": epoch, "train_acc": train_acc, "dev_acc": dev_acc, "test_acc": test_acc,
            "loss": loss, "lr": lr}


def layer_density_series(density: dict, layer: int) -> dict:
    """epoch -> [(mean, sd) per snapshot] for one layer."""
    return {e: [snap[layer] for snap in snaps] for e, snaps in density.items()}


# -- checkpoints -------------------------------------------------------------

def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: Model, epoch: int, sched: LrSchedule, rng, history,
                    density=None):
    import io
    meta = {
        "version": CHECKPOINT_VERSION, "package": __version__,
        "config": model.config.to_dict(), "digest": model.config.digest(), "epoch": epoch,
        "rng_state": rng.bit_generator.state,
        "schedule": {"lr": sched.lr, "best": sched.best, "bad": sched.bad,
                     "history": sched.history},
        "steps": [[w.t, b.t] for w, b in zip(model.w_states, model.b_states)],
        "history": history, "density": {str(k): v for k, v in (density or {}).items()},
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **model.arrays())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path, config: TrainConfig) -> tuple:
    """Return (model, start state for ``train``); the config must match."""
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        arrays = {k: z[k] for k in z.files if k != "meta"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    if meta["digest"] != config.digest():
        raise ValueError("checkpoint was written with a different configuration")
    model = build_model(config)
    model.load_arrays(arrays, meta["steps"])
    return model, meta

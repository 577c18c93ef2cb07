"""Experiment configuration files (JSON).

An experiment file names the model, the scheme, the optimizer and schedule,
the data and the run parameters.  Presets are expanded to explicit flag
sets on load, so the expanded form written next to the results fully
describes the run.

    {
      "model": "mlp5_256",
      "scheme": "proposed",
      "optimizer": {"kind": "adam", "lr": 0.001},
      "schedule": {"kind": "dev_based", "patience": 50, "factor": 0.5},
      "batch_size": 100,
      "epochs": 50,
      "seed": 0,
      "dataset": {"name": "mnist"},
      "out": "runs/mlp-proposed"
    }
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .engine import TrainConfig
from .optim import OptimizerConfig
from .scheme import PRESETS, Scheme, resolve
from .topology import Topology, resolve_topology


class ConfigError(ValueError):
    """The experiment file is unreadable or inconsistent."""


TOP_KEYS = {"model", "scheme", "optimizer", "schedule", "batch_size", "epochs", "seed",
            "dataset", "out", "compute", "density_batches", "analysis"}
DATASET_KEYS = {"name", "path", "subset", "dev_fraction"}
ANALYSIS_KEYS = {"batch_sizes", "cost_model", "include_optimizer"}


@dataclass
class DatasetConfig:
    name: str = "mnist"
    path: str | None = None        # default: $BINLOW_DATA/<name>
    subset: int | None = None      # keep only the first N training samples
    dev_fraction: float = 0.1


@dataclass
class AnalysisConfig:
    batch_sizes: list = field(default_factory=lambda: [100])
    cost_model: str | None = None  # key = joules text file, overrides defaults
    include_optimizer: bool = True


@dataclass
class ExperimentConfig:
    model: Topology
    scheme: Scheme
    optimizer: OptimizerConfig
    schedule: dict
    batch_size: int = 100
    epochs: int = 50
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    out: str = "runs/default"
    compute: str = "float32"
    density_batches: int = 8
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.model, self.scheme, self.optimizer, dict(self.schedule),
                           self.batch_size, self.epochs, self.seed, self.compute,
                           self.density_batches)

    def expanded(self) -> dict:
        """Fully explicit form: presets replaced by their flags."""
        return {"model": self.model.to_dict(), "scheme": self.scheme.to_dict(),
                "optimizer": asdict(self.optimizer), "schedule": dict(self.schedule),
                "batch_size": self.batch_size, "epochs": self.epochs, "seed": self.seed,
                "dataset": asdict(self.dataset), "out": self.out, "compute": self.compute,
                "density_batches": self.density_batches, "analysis": asdict(self.analysis)}

    def digest(self) -> str:
        """sha256 of the expanded config, output directory excluded."""
        d = self.expanded()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":"))
                              .encode()).hexdigest()

    def with_overrides(self, seed=None, preset=None, out=None) -> "ExperimentConfig":
        c = self
        if seed is not None:
            c = replace(c, seed=int(seed))
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; presets are {sorted(PRESETS)}")
            # keep the network mode of the configured scheme
            p = PRESETS[preset]
            c = replace(c, scheme=p.with_(binary=c.scheme.binary,
                                          activation=c.scheme.activation,
                                          kernels=c.scheme.kernels))
        if out is not None:
            c = replace(c, out=str(out))
        return c


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _scheme(v) -> Scheme:
    if isinstance(v, dict) and "preset" in v:
        # a preset with explicit flag overrides
        flags = dict(v)
        base = resolve(flags.pop("preset"))
        d = base.to_dict()
        unknown = set(flags) - set(d)
        if unknown:
            raise ConfigError(f"unknown scheme flags: {sorted(unknown)}")
        d.update(flags)
        return Scheme.from_dict(d)
    if isinstance(v, dict):
        unknown = set(v) - set(Scheme().to_dict())
        if unknown:
            raise ConfigError(f"unknown scheme flags: {sorted(unknown)}")
    return resolve(v)


def from_dict(d: dict) -> ExperimentConfig:
    _check_keys(d, TOP_KEYS, "config")
    if "model" not in d:
        raise ConfigError("config needs a 'model'")
    try:
        model = resolve_topology(d["model"])
        scheme = _scheme(d.get("scheme", "standard"))
        opt = d.get("optimizer", {})
        _check_keys(opt, set(OptimizerConfig.__dataclass_fields__), "optimizer")
        optimizer = OptimizerConfig(**opt)
        schedule = d.get("schedule", {"kind": "dev_based", "patience": 50, "factor": 0.5})
        _check_keys(schedule, {"kind", "patience", "factor", "milestones"}, "schedule")
        ds = d.get("dataset", {})
        _check_keys(ds, DATASET_KEYS, "dataset")
        an = d.get("analysis", {})
        _check_keys(an, ANALYSIS_KEYS, "analysis")
        cfg = ExperimentConfig(
            model=model, scheme=scheme, optimizer=optimizer, schedule=dict(schedule),
            batch_size=int(d.get("batch_size", 100)), epochs=int(d.get("epochs", 50)),
            seed=int(d.get("seed", 0)), dataset=DatasetConfig(**ds),
            out=str(d.get("out", "runs/default")), compute=d.get("compute", "float32"),
            density_batches=int(d.get("density_batches", 8)), analysis=AnalysisConfig(**an))
        if "milestones" in cfg.schedule:
            cfg.schedule["milestones"] = tuple(cfg.schedule["milestones"])
        cfg.train_config()  # validates the training fields
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(str(e)) from e
    if any(int(b) < 1 for b in cfg.analysis.batch_sizes):
        raise ConfigError("analysis batch sizes must be positive")
    return cfg


def load(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON: {e}") from e
    return from_dict(d)


__all__ = ["ConfigError", "DatasetConfig", "AnalysisConfig", "ExperimentConfig",
           "from_dict", "load"]

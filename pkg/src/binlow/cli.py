"""Command-line entry point.

    binlow train   --config exp.json [--out DIR] [--seed N] [--preset NAME]
    binlow analyze --config exp.json [--out DIR] [--preset NAME]
    binlow energy  --config exp.json [--out DIR] [--preset NAME]
    binlow density [--run DIR | --config exp.json] [--layer L] [--out DIR]

Exit codes: 0 ok, 2 input error, 3 numeric failure.  Every CSV starts
with a ``# config <sha256>`` line naming the expanded configuration it
came from; ``config.json`` in the output directory holds that expansion.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    ENERGY_COLUMNS, MEMORY_COLUMNS, CostModel, density_trace, energy_estimate, memory_footprint,
)
from .config import ConfigError, ExperimentConfig, load
from .data import DatasetError, load_dataset
from .engine import (
    METRIC_COLUMNS, Dataset, NumericError, atomic_write_bytes, build_model,
    dev_selected_test_accuracy,
    layer_density_series, save_checkpoint, train, train_step,
)
from .scheme import PRESETS, STANDARD

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

TRACE_COLUMNS = ("name", "layer", "dtype", "bytes", "lifetime")
SNAPSHOT_COLUMNS = ("epoch", "snapshot", "layer", "mean", "sd")
DENSITY_COLUMNS = ("epoch", "gradient_density", "noise_density", "flagged")
SUMMARY_COLUMNS = ("batch", "standard", "scheme", "saving")


def _fmt(v):
    # repr round-trips floats exactly and is stable across runs
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def csv_text(digest: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# config {digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def read_csv(path) -> tuple:
    """(digest, rows as dicts) from a CSV written by ``csv_text``."""
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    if not first.startswith("# config "):
        raise ValueError(f"{path} has no config digest line")
    return first.split()[2], list(csv.DictReader(io.StringIO(rest)))


def write_csv(path, digest, columns, rows):
    atomic_write_bytes(path, csv_text(digest, columns, rows).encode())


def write_config(out: Path, cfg: ExperimentConfig):
    d = {"version": __version__, "digest": cfg.digest(), "config": cfg.expanded()}
    atomic_write_bytes(out / "config.json", (json.dumps(d, indent=2, sort_keys=True) + "\n")
                       .encode())


# -- commands ----------------------------------------------------------------

def load_experiment_data(cfg: ExperimentConfig) -> Dataset:
    tx, ty, sx, sy = load_dataset(cfg.dataset.name, cfg.dataset.path)
    if cfg.dataset.subset is not None:
        n = int(cfg.dataset.subset)
        tx, ty = tx[:n], ty[:n]
    return Dataset.split(tx, ty, sx, sy, cfg.dataset.dev_fraction)


def cmd_train(cfg: ExperimentConfig) -> int:
    tc = cfg.train_config()
    data = load_experiment_data(cfg)
    out = Path(cfg.out)
    digest = cfg.digest()
    write_config(out, cfg)

    # buffer trace of one step on a fresh copy of the initial model
    x, y = data.train
    b = cfg.batch_size
    st = train_step((x[:b], y[:b]), build_model(tc))
    write_csv(out / "trace.csv", digest, TRACE_COLUMNS,
              [(r.name, r.layer, r.dtype, r.bytes, r.lifetime) for r in st.buffers])

    def log(epoch, model, history, sched, rng, density):
        h = history[-1]
        print(f"epoch {epoch:4d}  loss {h['loss']:.4f}  train {h['train_acc']:.4f}  "
              f"dev {h['dev_acc']:.4f}  test {h['test_acc']:.4f}  lr {h['lr']:.3g}", flush=True)
        if epoch == tc.epochs:
            save_checkpoint(out / "checkpoint.npz", model, epoch, sched, rng, history, density)

    result = train(data, tc, on_epoch=log)
    write_csv(out / "metrics.csv", digest, METRIC_COLUMNS,
              [[h[c] for c in METRIC_COLUMNS] for h in result.history])
    write_csv(out / "snapshots.csv", digest, SNAPSHOT_COLUMNS,
              [(e, s, l, m, sd) for e, snaps in sorted(result.density.items())
               for s, snap in enumerate(snaps) for l, (m, sd) in enumerate(snap)])
    print(f"best test accuracy {result.best_test:.4f} "
          f"(at the best dev epoch: {dev_selected_test_accuracy(result.history):.4f})")
    return EXIT_OK


def _cost(cfg: ExperimentConfig) -> CostModel:
    return CostModel.load(cfg.analysis.cost_model) if cfg.analysis.cost_model else CostModel()


def cmd_analyze(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    digest = cfg.digest()
    write_config(out, cfg)
    opt = cfg.optimizer.kind
    summary = []
    for b in cfg.analysis.batch_sizes:
        std = memory_footprint(cfg.model, STANDARD, b, opt)
        rep = memory_footprint(cfg.model, cfg.scheme, b, opt)
        for tag, r in (("standard", std), ("scheme", rep)):
            write_csv(out / f"memory_{tag}_b{b}.csv", digest, MEMORY_COLUMNS,
                      [(m.variable, m.lifetime, m.dtype, m.bytes) for m in r.rows])
        summary.append((b, std.total, rep.total, rep.saving_vs(std)))
        print(f"{cfg.model.name}, batch {b}: standard vs configured scheme")
        print(rep.table(std))
        print()
    write_csv(out / "memory_summary.csv", digest, SUMMARY_COLUMNS, summary)
    return EXIT_OK


def cmd_energy(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    digest = cfg.digest()
    write_config(out, cfg)
    cost = _cost(cfg)
    opt, inc = cfg.optimizer.kind, cfg.analysis.include_optimizer
    summary = []
    for b in cfg.analysis.batch_sizes:
        std = energy_estimate(cfg.model, STANDARD, b, cost, opt, inc)
        rep = energy_estimate(cfg.model, cfg.scheme, b, cost, opt, inc)
        for tag, r in (("standard", std), ("scheme", rep)):
            write_csv(out / f"energy_{tag}_b{b}.csv", digest, ENERGY_COLUMNS,
                      [(k, r[k]) for k in ("ops_energy", "memory_energy", "total")])
        summary.append((b, std["total"], rep["total"], std["total"] / rep["total"]))
        print(f"{cfg.model.name}, batch {b}: {std['total']:.3f} mJ standard, "
              f"{rep['total']:.3f} mJ configured ({std['total'] / rep['total']:.2f}x)")
        for k in ("ops_energy", "memory_energy"):
            print(f"  {k:<14}{std[k]:>12.3f}{rep[k]:>12.3f}")
    write_csv(out / "energy_summary.csv", digest, SUMMARY_COLUMNS, summary)
    return EXIT_OK


def cmd_density(run: Path, layer: int, out: Path | None = None) -> int:
    src = run / "snapshots.csv"
    if not src.is_file():
        raise FileNotFoundError(f"no snapshots.csv in {run}; run 'train' first")
    digest, rows = read_csv(src)
    snaps = {}
    for r in rows:
        snaps.setdefault(int(r["epoch"]), {}).setdefault(int(r["snapshot"]), {})[
            int(r["layer"])] = (float(r["mean"]), float(r["sd"]))
    density = {e: [per[s] for s in sorted(per)] for e, per in snaps.items()}
    n_layers = min((len(s) for per in density.values() for s in per), default=0)
    if not 0 <= layer < n_layers:
        raise ValueError(f"layer {layer} out of range; run has {n_layers} layers")
    tr = density_trace(layer_density_series(density, layer))
    flagged = set(tr.flagged)
    write_csv((out or run) / f"density_layer{layer}.csv", digest, DENSITY_COLUMNS,
              [(e, g, n, int(e in flagged)) for e, g, n in zip(tr.epochs, tr.gradient, tr.noise)])
    for e, g, n in zip(tr.epochs, tr.gradient, tr.noise):
        print(f"epoch {e:4d}  gradient {g:.4f}  noise {n:.4f}{'  FLAG' if e in flagged else ''}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binlow", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train", "analyze", "energy"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", type=Path, help="output directory (overrides config)")
        s.add_argument("--seed", type=int, help="overrides the config seed")
        s.add_argument("--preset", choices=sorted(PRESETS), help="overrides the config scheme")
    s = sub.add_parser("density")
    s.add_argument("--run", type=Path, help="directory of a finished train run")
    s.add_argument("--config", type=Path, help="take the run directory from this config")
    s.add_argument("--layer", type=int, default=0)
    s.add_argument("--out", type=Path, help="where to write the CSV (default: the run)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "density":
            if args.run is None and args.config is None:
                raise ConfigError("density needs --run or --config")
            run = args.run if args.run is not None else Path(load(args.config).out)
            return cmd_density(run, args.layer, args.out)
        cfg = load(args.config).with_overrides(args.seed, args.preset, args.out)
        return {"train": cmd_train, "analyze": cmd_analyze, "energy": cmd_energy}[
            args.command](cfg)
    except NumericError as e:
        print(f"binlow: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"binlow: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

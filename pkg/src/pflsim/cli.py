"""Command line entry point.

    pflsim run --config toy.ini [--out DIR] [--seed N] [--override sec.key=value ...]
    pflsim sweep --config toy.ini --grid grid.json [--out DIR]
    pflsim dump-trigger --report DIR/report.json

Exit codes: 0 success, 2 configuration error, 3 runtime error.

A sweep grid is a JSON object mapping ``section.key`` to a list of values,
plus an optional ``"seeds"`` list. Every combination runs once per seed and
is summarised by the mean and standard deviation of ACC and ASR over seeds.
"""

import argparse
import csv
import io
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError
from .data import SchemaError
from .experiment import run_experiment, trigger_text, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _parser():
    p = argparse.ArgumentParser(prog="pflsim", description="PFL backdoor simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default="out")
    run.add_argument("--seed", type=int)
    run.add_argument("--override", action="extend", nargs="+", default=[], metavar="SEC.KEY=VALUE")

    sw = sub.add_parser("sweep", help="run a grid of experiments over seeds")
    sw.add_argument("--config", required=True)
    sw.add_argument("--grid", required=True)
    sw.add_argument("--out", default="sweep")

    dt = sub.add_parser("dump-trigger", help="print the trigger stored in a report")
    dt.add_argument("--report", required=True)
    return p


def _load(path, overrides=(), seed=None):
    cfg = config_mod.load(path)
    ov = config_mod.parse_overrides(overrides)
    if seed is not None:
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("--seed must fit in an unsigned 64-bit integer")
        ov["federation.seed"] = str(seed)
    return cfg.with_overrides(ov) if ov else cfg


def load_grid(path):
    try:
        grid = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid {path}: invalid JSON ({exc})") from None
    if not isinstance(grid, dict):
        raise ConfigError("grid must be a JSON object")
    seeds = grid.pop("seeds", None)
    if seeds is not None and (not isinstance(seeds, list) or not seeds
                              or not all(isinstance(s, int) and s >= 0 for s in seeds)):
        raise ConfigError("grid 'seeds' must be a non-empty list of non-negative integers")
    for key, vals in grid.items():
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"grid entry {key!r} must be a non-empty list")
    return grid, seeds


def grid_cells(grid):
    keys = sorted(grid)
    for combo in itertools.product(*(grid[k] for k in keys)):
        yield {k: _text(v) for k, v in zip(keys, combo)}


def _text(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def sweep(cfg, grid, seeds):
    """Run every grid cell for every seed; returns (runs, summary) rows."""
    seeds = seeds if seeds is not None else [cfg.federation.seed]
    cells = list(grid_cells(grid))
    for cell in cells:  # validate everything before spending compute
        cfg.with_overrides(cell)
    runs, summary = [], []
    for cell in cells:
        accs, asrs = [], []
        for s in seeds:
            rep = run_experiment(cfg.with_overrides({**cell, "federation.seed": str(s)}))
            accs.append(rep["mean_acc"])
            asrs.append(rep["mean_asr"])
            runs.append({"cell": cell, "seed": s, "acc": rep["mean_acc"], "asr": rep["mean_asr"]})
        summary.append({"cell": cell, "seeds": list(seeds),
                        "acc_mean": float(np.mean(accs)), "acc_std": float(np.std(accs)),
                        "asr_mean": float(np.mean(asrs)), "asr_std": float(np.std(asrs))})
    return runs, summary


def _cell_label(cell):
    return " ".join(f"{k}={v}" for k, v in cell.items()) or "(base)"


def summary_csv(summary):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "n_seeds", "acc_mean", "acc_std", "asr_mean", "asr_std"])
    for row in summary:
        w.writerow([_cell_label(row["cell"]), len(row["seeds"]), repr(row["acc_mean"]),
                    repr(row["acc_std"]), repr(row["asr_mean"]), repr(row["asr_std"])])
    return buf.getvalue()


def runs_csv(runs):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "seed", "acc", "asr"])
    for row in runs:
        w.writerow([_cell_label(row["cell"]), row["seed"], repr(row["acc"]), repr(row["asr"])])
    return buf.getvalue()


def _cmd_run(args):
    cfg = _load(args.config, args.override, args.seed)
    report = run_experiment(cfg)
    out = Path(args.out)
    write_outputs(report, cfg, out)
    print(f"mean_acc={report['mean_acc']:.4f} mean_asr={report['mean_asr']:.4f} -> {out}")


def _cmd_sweep(args):
    cfg = _load(args.config)
    grid, seeds = load_grid(args.grid)
    runs, summary = sweep(cfg, grid, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.csv").write_text(runs_csv(runs))
    (out / "summary.csv").write_text(summary_csv(summary))
    for row in summary:
        print(f"{_cell_label(row['cell'])}: acc {row['acc_mean']:.4f}±{row['acc_std']:.4f} "
              f"asr {row['asr_mean']:.4f}±{row['asr_std']:.4f} (seeds {row['seeds']})")


def _cmd_dump_trigger(args):
    try:
        report = json.loads(Path(args.report).read_text())
        trig = report["trigger"]
        trig["target"], trig["features"]
    except OSError as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"{args.report} is not a report ({exc})") from None
    sys.stdout.write(trigger_text(report))


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "dump-trigger": _cmd_dump_trigger}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        COMMANDS[args.command](args)
    except (ConfigError, SchemaError) as exc:  # schema: config names a missing column
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

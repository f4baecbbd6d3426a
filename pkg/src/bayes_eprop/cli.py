"""Command-line interface: ``bayes-eprop {train,eval,probe,export-task}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .eprop import BROADCAST_ALIGNMENT, WEIGHT_TRANSPORT
from .network import ConfigurationError
from .task import BOTH, DOWN, UP, generate_trial, write_raster
from .trainer import (METRIC_FIELDS, CheckpointError, NumericalError, RunConfig, evaluate,
                      load_checkpoint, probe_uncertainty, rng_for, save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
_MODES = {"ba": BROADCAST_ALIGNMENT, "wt": WEIGHT_TRANSPORT,
          BROADCAST_ALIGNMENT: BROADCAST_ALIGNMENT, WEIGHT_TRANSPORT: WEIGHT_TRANSPORT}
_EXPORT_TAG = 6

log = logging.getLogger("bayes_eprop")


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayes-eprop", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network and write metrics, checkpoint, manifest")
    t.add_argument("--config", type=Path, help="JSON config (flat field names)")
    t.add_argument("--seed", type=_u64)
    t.add_argument("--epochs", type=int)
    t.add_argument("--feedback-mode", choices=sorted(_MODES))
    t.add_argument("--kl-scale", type=float)
    t.add_argument("--out", type=Path, help="output directory (default: <out_dir>/<run_name>)")

    e = sub.add_parser("eval", help="score fresh trials with a checkpoint")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--trials", type=int, default=1000)
    e.add_argument("--seed", type=_u64)

    pr = sub.add_parser("probe", help="posterior-predictive quantiles for Up, Down and Both")
    pr.add_argument("checkpoint", type=Path)
    pr.add_argument("--samples", type=int, default=500)
    pr.add_argument("--plot-samples", type=int, default=10,
                    help="raw sample trajectories exported per probe kind")
    pr.add_argument("--seed", type=_u64)
    pr.add_argument("--out", type=Path)

    x = sub.add_parser("export-task", help="write trial rasters as CSV/JSON pairs")
    x.add_argument("--n", type=int, default=1)
    x.add_argument("--seed", type=_u64, default=0)
    x.add_argument("--config", type=Path)
    x.add_argument("--out", type=Path, default=Path("rasters"))
    return p


def _load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(path.read_text() or "{}")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return RunConfig.from_dict(data)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.feedback_mode is not None:
        overrides["feedback_mode"] = _MODES[args.feedback_mode]
    if args.kl_scale is not None:
        overrides["kl_scale"] = args.kl_scale
    if overrides:
        cfg = cfg.with_train(**overrides)
    out = args.out if args.out is not None else Path(cfg.out_dir) / cfg.run_name
    out.mkdir(parents=True, exist_ok=True)

    started = time.time()
    status = "ok"
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        fh.flush()

        def on_epoch(rec):
            writer.writerow(rec.row())
            fh.flush()

        try:
            ckpt = train(cfg, on_epoch=on_epoch)
        except NumericalError:
            status = "numerical_error"
            raise
        finally:
            manifest = {
                "version": __version__,
                "seed": int(cfg.train.seed),
                "feedback_mode": cfg.train.feedback_mode,
                "epochs": int(cfg.train.epochs),
                "wall_time_s": round(time.time() - started, 3),
                "threads": os.environ.get("BAYES_EPROP_THREADS"),
                "status": status,
                "config": cfg.to_dict(),
            }
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True)
                                               + "\n")
    save_checkpoint(out / "checkpoint.json", ckpt)
    print(json.dumps({"out": str(out), "epochs": ckpt.epoch}))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    seed = ckpt.config.train.seed if args.seed is None else args.seed
    ev = evaluate(ckpt.params, ckpt.config, args.trials, seed=seed)
    print(json.dumps({"accuracy": ev.accuracy, "p_correct_up": ev.p_correct_up,
                      "p_correct_down": ev.p_correct_down, "n_trials": ev.n_trials,
                      "seed": int(seed)}))
    return EXIT_OK


def cmd_probe(args) -> int:
    if args.samples < 100:
        raise UsageError("--samples must be >= 100")
    if not 0 <= args.plot_samples <= args.samples:
        raise UsageError("--plot-samples must lie in [0, --samples]")
    ckpt = load_checkpoint(args.checkpoint)
    res = probe_uncertainty(ckpt.params, ckpt.config, args.samples, seed=args.seed)
    out = args.out if args.out is not None else args.checkpoint.parent / "probe"
    out.mkdir(parents=True, exist_ok=True)
    kinds = (UP, DOWN, BOTH)
    with open(out / "quantiles.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "q10", "q50", "q90", "kind"])
        for kind in kinds:
            for step, (lo, mid, hi) in enumerate(res.quantiles[kind].T):
                w.writerow([step, repr(float(lo)), repr(float(mid)), repr(float(hi)), kind])
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "step", "y", "kind"])
        for kind in kinds:
            for s, traj in enumerate(res.samples[kind][:args.plot_samples]):
                for step, y in enumerate(traj):
                    w.writerow([s, step, repr(float(y)), kind])
    report = res.report()
    (out / "spread.json").write_text(json.dumps(report, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_export_task(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = _load_config(args.config)
    args.out.mkdir(parents=True, exist_ok=True)
    rng = rng_for(args.seed, _EXPORT_TAG)
    width = len(str(args.n - 1))
    for k in range(args.n):
        spec, raster = generate_trial(cfg.task, rng)
        write_raster(raster, spec, args.out / f"trial_{k:0{width}d}")
    print(json.dumps({"out": str(args.out), "n": args.n, "seed": int(args.seed)}))
    return EXIT_OK


_COMMANDS = {"train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
             "export-task": cmd_export_task}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigurationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

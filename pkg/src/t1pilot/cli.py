"""Command-line entry point: ``t1pilot {phantom,run,report,fit,traj}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
``T1PILOT_THREADS`` caps the BLAS threads of every process.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _cap_threads():
    n = os.environ.get("T1PILOT_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n


def build_parser():
    p = argparse.ArgumentParser(prog="t1pilot", description="Desk-scale T1 mapping trajectory experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override the config's seed list with one seed")
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("phantom", help="write phantom maps and noisy sequences")
    common(sp)
    sp = sub.add_parser("run", help="run the experiment grid")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="cells run concurrently")
    sp = sub.add_parser("report", help="tabulate a finished run directory")
    sp.add_argument("run_dir", nargs="?", help="run directory (default: --out)")
    sp.add_argument("--out", help="run directory")
    sp = sub.add_parser("fit", help="fit a sequence tensor")
    sp.add_argument("input", help="sequence raw tensor (N, H, W)")
    sp.add_argument("--config", help="config supplying inversion times")
    sp.add_argument("--times", help="comma-separated inversion times in ms")
    sp.add_argument("--out", required=True, help="output directory")
    sp = sub.add_parser("traj", help="write the radial and golden-angle baseline trajectories")
    common(sp)
    return p


def _load(args):
    from .harness import bundled_config_path, load_config
    from dataclasses import replace
    path = args.config
    if path == "bundled":
        path = bundled_config_path()
    cfg = load_config(path)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg, Path(path).read_bytes()


def _times_for(args):
    if args.times:
        return [float(t) for t in args.times.split(",")]
    if args.config:
        cfg, _ = _load(args)
        return list(cfg.inversion_times)
    prov = Path(args.input).parent / "provenance.json"
    if prov.exists():
        return json.loads(prov.read_text())["inversion_times_ms"]
    from .harness import ConfigError
    raise ConfigError("times", "no inversion times: pass --times, --config or keep provenance.json beside the input")


def _dispatch(args):
    from . import harness, rawtensor
    from .decay_model import WeightedSequence

    if args.command == "phantom":
        cfg, text = _load(args)
        out = args.out or cfg.output_dir
        for seed in cfg.seeds:
            d = Path(out) if len(cfg.seeds) == 1 else Path(out) / f"seed{seed}"
            harness.write_phantoms(cfg, seed, d, text)
        print(f"phantoms written to {out}")
    elif args.command == "run":
        cfg, _ = _load(args)
        out = args.out or cfg.output_dir
        rows = harness.run_experiment(cfg, out, jobs=max(1, args.jobs))
        failed = sum(r["status"] != "ok" for r in rows)
        print(harness.write_report(out), end="")
        if failed:
            print(f"{failed} cell rows failed; see {out}/results.csv", file=sys.stderr)
    elif args.command == "report":
        run_dir = args.run_dir or args.out
        if run_dir is None:
            raise harness.ConfigError("run_dir", "missing required argument")
        print(harness.write_report(run_dir), end="")
    elif args.command == "fit":
        times = _times_for(args)
        frames = rawtensor.read(args.input).astype(float)
        if frames.ndim != 3 or frames.shape[0] != len(times):
            raise harness.ConfigError("times", f"{len(times)} inversion times for a tensor of shape {frames.shape}")
        fit = harness.write_fit(WeightedSequence(frames, times), args.out)
        print(f"{int(fit.valid_mask.sum())} valid pixels; maps written to {args.out}")
    elif args.command == "traj":
        cfg, _ = _load(args)
        out = args.out or cfg.output_dir
        for f in harness.write_baseline_trajectories(cfg, out):
            print(f)


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .harness import ConfigError
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

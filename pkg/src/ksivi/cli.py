"""Command-line entry point: ``ksivi {train,ground-truth,evaluate,variance-diag,sample}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from .config import ConfigError, apply_overrides, default_config, parse_config
from .experiment import (
    run_evaluate,
    run_experiment,
    run_ground_truth_only,
    run_sample,
    run_variance_diag,
)

UMASK_ENV = "KSIVI_UMASK"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ksivi", description="Kernel semi-implicit variational inference")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="config file (flat 'key = JSON' lines)")
        src.add_argument("--experiment", help="use the named preset without a file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--threads", type=int, help="cap BLAS threads")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=JSON", help="override one config key")
        return sp

    common(sub.add_parser("train", help="train, then write trace, samples, checkpoint and metrics"))
    common(sub.add_parser("ground-truth", help="compute and cache reference samples"))
    ev = common(sub.add_parser("evaluate", help="score a sample CSV against ground truth"))
    ev.add_argument("--samples", help="sample CSV (default: OUT/samples.csv)")
    vd = common(sub.add_parser("variance-diag", help="gradient-estimator variance table"))
    vd.add_argument("--sizes", default="8,16,32", help="comma-separated batch sizes")
    vd.add_argument("--replications", type=int, default=1000)
    vd.add_argument("--outer", type=int, default=1000, help="conditioning draws for the first-order variance term")
    vd.add_argument("--inner", type=int, default=200, help="partners averaged per conditioning draw")
    vd.add_argument("--pairs", type=int, help="single pairs for the full pair variance (default: --outer)")
    sm = common(sub.add_parser("sample", help="draw samples from a saved checkpoint"))
    sm.add_argument("-n", type=int, help="number of samples")
    sm.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.bin)")
    return p


def _config(args):
    cfg = parse_config(args.config) if args.config else default_config(args.experiment)
    overrides = {"seed": args.seed, "out": args.out}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r}: expected KEY=JSON")
        try:
            overrides[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            raise ConfigError(f"{key.strip()}: value {value!r} is not valid JSON") from None
    return apply_overrides(cfg, **overrides)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    if UMASK_ENV in os.environ:
        os.umask(int(os.environ[UMASK_ENV], 8))
    try:
        cfg = _config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    limits = threadpool_limits(args.threads) if args.threads else None
    try:
        if args.command == "train":
            result = run_experiment(cfg)
        elif args.command == "ground-truth":
            X = run_ground_truth_only(cfg)
            result = {"ground_truth_samples": len(X)}
        elif args.command == "evaluate":
            result = run_evaluate(cfg, samples_path=args.samples)
        elif args.command == "variance-diag":
            sizes = [int(s) for s in args.sizes.split(",")]
            rows = run_variance_diag(
                cfg, sizes=sizes, replications=args.replications, outer=args.outer, inner=args.inner, pairs=args.pairs
            )
            result = {"rows": [{k: r[k] for k in ("N", "var_vanilla_emp", "var_ustat_emp", "diff_emp", "diff_pred")} for r in rows]}
        else:
            X = run_sample(cfg, n=args.n, checkpoint=args.checkpoint)
            result = {"samples": len(X)}
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limits is not None:
            limits.restore_original_limits()
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``admm-softmax {train,grid,diag-cg,embed,inspect}``.

Exit status is 0 on success, 2 on configuration errors (including missing
input files) and 3 on runtime errors.
"""

import argparse
import json
import logging
import os
import sys

from .errors import AdmmSoftmaxError, ConfigError
from . import experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# flag dest -> config key
_FLAG_KEYS = {
    "algorithm": "run.algorithm",
    "time_budget": "run.time_budget",
    "output_dir": "run.output_dir",
    "seed": "run.seed",
    "n_workers": "run.n_workers",
    "images": "data.images",
    "labels": "data.labels",
    "format": "data.format",
    "path": "data.path",
    "train": "data.train",
    "val": "data.val",
    "test": "data.test",
    "split_seed": "data.split_seed",
    "embedding": "data.embedding",
    "elm_seed": "data.elm_seed",
    "alpha": "regularizer.alpha",
    "operator": "regularizer.operator",
    "rho": "admm.rho",
    "rho_grid": "grid.rho",
    "alpha_grid": "grid.alpha",
}


def _add_run_flags(p, grid=False):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration value (repeatable)")
    if not grid:
        p.add_argument("--algorithm", choices=experiment.ALGORITHMS)
    p.add_argument("--time-budget", type=str, help="seconds per run (default 300)")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=str)
    p.add_argument("--n-workers", type=str)
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--format", choices=("idx", "mlrf", "csv"))
    p.add_argument("--path", help="MLRF or CSV input file")
    p.add_argument("--train", type=str, help="training example count")
    p.add_argument("--val", type=str, help="validation example count")
    p.add_argument("--test", type=str, help="test example count")
    p.add_argument("--split-seed", type=str)
    p.add_argument("--sequential", action="store_true", help="split in file order")
    p.add_argument("--embedding", choices=("elm", "none"))
    p.add_argument("--elm-seed", type=str)
    p.add_argument("--alpha", type=str)
    p.add_argument("--operator", choices=("laplacian", "identity"))
    p.add_argument("--rho", type=str)
    p.add_argument("--max-iter", type=str, help="iteration (or epoch) cap of the chosen algorithm")
    if grid:
        p.add_argument("--rho-grid", help="comma-separated rho values")
        p.add_argument("--alpha-grid", help="comma-separated alpha values")


def build_parser():
    parser = argparse.ArgumentParser(prog="admm-softmax",
                                     description="Train softmax classifiers with ADMM and baselines.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("train", help="train one model under a time budget"))
    _add_run_flags(sub.add_parser("grid", help="ADMM over a rho x alpha grid"), grid=True)
    _add_run_flags(sub.add_parser("diag-cg", help="Newton-CG run with CG residual traces"))

    p = sub.add_parser("embed", help="apply the ELM embedding and write an MLRF file")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filters", type=int, default=9)
    p.add_argument("--limit", type=int, help="embed only the first LIMIT images")

    p = sub.add_parser("inspect", help="print MLRF or IDX header fields")
    p.add_argument("paths", nargs="+")
    return parser


def _overrides(args):
    out = {}
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = str(value)
    if getattr(args, "sequential", False):
        out["data.sequential"] = "true"
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config(args, force_algorithm=None):
    overrides = _overrides(args)
    if force_algorithm is not None:
        overrides.setdefault("run.algorithm", force_algorithm)
    cfg = experiment.load_config(args.config, overrides)
    if args.max_iter is not None:
        section = cfg.algorithm
        cfg = cfg.replace(**{f"{section}.max_iter": experiment._parse_value(section, "max_iter", args.max_iter)})
    return cfg


def run(args):
    if args.command == "train":
        summary, _, _ = experiment.cmd_train(_config(args))
        print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    elif args.command == "grid":
        rows = experiment.cmd_grid(_config(args, "admm"))
        for r in rows:
            print(f"rho={r['rho']:g} alpha={r['alpha']:g} val_acc={r['val_acc']:.4f} "
                  f"test_acc={r['test_acc']:.4f} cond={r['condition']:.3e} {r['status']}")
    elif args.command == "diag-cg":
        cfg = _config(args, "newton-cg")
        summary, info = experiment.cmd_diag_cg(cfg)
        finals = info.get("cg_final_residual", [])
        if finals:
            print(f"first Newton iteration CG relres {finals[0]:.4e}, "
                  f"last {finals[-1]:.4e} ({len(finals)} iterations)")
    elif args.command == "embed":
        for path in (args.images, args.labels):
            _require(path)
        data = experiment.cmd_embed(args.images, args.labels, args.out, seed=args.seed,
                                    n_filters=args.filters, limit=args.limit)
        print(f"wrote {args.out}: {data.n_features} features x {data.n_examples} examples")
    elif args.command == "inspect":
        for path in args.paths:
            _require(path)
            print(f"{path}: {json.dumps(experiment.cmd_inspect(path), sort_keys=True)}")
    return EXIT_OK


def _require(path):
    if not os.path.exists(path):
        raise ConfigError(f"no such file: {path}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AdmmSoftmaxError, OSError, ValueError, ArithmeticError, MemoryError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

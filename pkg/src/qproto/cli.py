"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, gradcheck. Configuration
comes from an optional INI file plus ``--set section.key=value``
overrides and a handful of dedicated flags. Exit codes: 0 ok, 2 config
error, 3 I/O or data error, 4 numeric abort, 5 checkpoint mismatch,
6 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, restore_model
from .config import RunConfig
from .data import gen_synthetic, load_dataset, resolve_root
from .episodes import ablate, evaluate, train
from .errors import (CheckpointError, ConfigError, DataFormatError, DatasetError,
                     NumericsError, QprotoError, ValidationError)
from .gradchecks import CHECKS, TOLERANCE, run_checks
from .model import build_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5
EXIT_GRADCHECK = 6


def _build_config(args, extra=()):
    # dedicated flags (extra) take precedence over generic --set entries
    overrides = (args.set or []) + list(extra)
    return RunConfig.from_sources(args.config, overrides)


def _echo_config(cfg, directory):
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "config.cfg")
    with open(path, "w") as f:
        f.write(cfg.canonical_text())
    return path


def _flag_overrides(args, mapping):
    """Map dedicated CLI flags onto config overrides."""
    out = []
    for attr, key in mapping:
        val = getattr(args, attr, None)
        if val is not None:
            out.append(f"{key}={val}")
    for attr, key in [("no_attention", "train.attention"),
                      ("no_hierarchy", "train.hierarchy"),
                      ("no_protogen", "train.protogen")]:
        if getattr(args, attr, False):
            out.append(f"{key}=false")
    return out


_TRAIN_FLAGS = [("episodes", "train.episodes"), ("seed", "train.seed"),
                ("xi", "protogen.xi"), ("similarity", "protogen.similarity"),
                ("data", "data.root"), ("out", "train.out_dir")]
_EVAL_FLAGS = [("episodes", "eval.episodes"), ("reps", "eval.reps"),
               ("seed", "eval.seed"), ("threads", "eval.threads"),
               ("data", "data.root")]
_ABLATE_FLAGS = [("episodes", "train.episodes"), ("seed", "train.seed"),
                 ("data", "data.root")]


def cmd_gen_data(args):
    overrides = []
    if args.seed is not None:
        overrides.append(f"data.seed={args.seed}")
    if args.classes is not None:
        overrides.append(f"data.classes_train={args.classes}")
    if args.out is not None:
        overrides.append(f"data.root={args.out}")
    cfg = _build_config(args, overrides)
    spec = cfg.synthetic_spec()
    ep = cfg.episode_config()
    for tag, count in spec.split_sizes.items():
        if count < ep.n_way:
            raise ConfigError(
                f"split {tag!r} has {count} classes but episodes need n_way={ep.n_way}")
    root = resolve_root(cfg.get("data", "root"))
    bundle = gen_synthetic(spec, root)
    _echo_config(cfg, root)
    total = 0
    for tag in sorted(bundle.splits):
        split = bundle.splits[tag]
        n = sum(s.shape[0] for s in split.samples.values())
        total += n
        print(f"{tag}: {split.n_classes} classes, {n} samples")
    print(f"wrote {total} samples to {root} (manifest.txt, config digest "
          f"{cfg.digest()[:12]})")
    return EXIT_OK


def cmd_train(args):
    cfg = _build_config(args, _flag_overrides(args, _TRAIN_FLAGS))
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    bundle = load_dataset(cfg.get("data", "root"))
    out_dir = cfg.get("train", "out_dir")
    _echo_config(cfg, out_dir)
    result = train(train_cfg, model_cfg, bundle.split("train"), out_dir=out_dir,
                   resume=args.resume, config_text=cfg.computation_text(),
                   config_digest=cfg.digest())
    if result.log_rows:
        last = result.log_rows[-1]
        print(f"trained {train_cfg.episodes} episodes; final logged "
              f"loss {last[1]:.4f} acc {last[2]:.3f}")
    else:
        print(f"trained {train_cfg.episodes} episodes")
    print(f"checkpoint: {result.final_checkpoint}")
    if not args.no_plots and result.log_rows:
        from .plots import save_training_curves
        fig = save_training_curves(result.log_rows, os.path.join(out_dir, "training.png"))
        print(f"figure: {fig}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _build_config(args, _flag_overrides(args, _EVAL_FLAGS))
    header, arrays = load_checkpoint(args.checkpoint, expected_digest=cfg.digest())
    model = build_model(cfg.model_config(), seed=0)
    restore_model(model, header, arrays)
    bundle = load_dataset(cfg.get("data", "root"))
    report = evaluate(
        model, bundle.split(cfg.get("eval", "split")),
        episodes_per_rep=cfg.get("eval", "episodes"), reps=cfg.get("eval", "reps"),
        ep_cfg=cfg.episode_config(), pg=cfg.pg_config(),
        use_protogen=cfg.get("train", "protogen"), seed=cfg.get("eval", "seed"),
        threads=cfg.get("eval", "threads"), config_digest=cfg.digest())
    payload = report.to_json_dict()
    payload["config"] = cfg.canonical_text()
    text = json.dumps(payload, sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
        print(f"mean {report.mean:.4f} ci95 {report.ci95:.4f} -> {args.out}")
        if not args.no_plots:
            from .plots import save_eval_histogram
            fig = save_eval_histogram(report, os.path.splitext(args.out)[0] + ".png")
            print(f"figure: {fig}")
    else:
        print(text)
    return EXIT_OK


GRIDS = {
    "table3": [
        {"attention": a, "hierarchy": h, "protogen": p}
        for a in (False, True) for h in (False, True) for p in (False, True)
    ],
    "xi": [{"xi": x} for x in (1, 3, 5, 7, 9)],
    "similarity": [{"similarity": s} for s in ("gaussian", "cosine")],
}


def cmd_ablate(args):
    cfg = _build_config(args, _flag_overrides(args, _ABLATE_FLAGS))
    grid = GRIDS[args.grid]
    bundle = load_dataset(cfg.get("data", "root"))
    out_dir = args.out or os.path.join(cfg.get("train", "out_dir"), f"ablate_{args.grid}")
    _echo_config(cfg, out_dir)
    rows = ablate(grid, cfg.model_config(), cfg.train_config(), bundle,
                  eval_split=cfg.get("eval", "split"),
                  eval_episodes=cfg.get("eval", "episodes"),
                  eval_reps=cfg.get("eval", "reps"),
                  eval_seed=cfg.get("eval", "seed"), out_dir=out_dir,
                  config_text=cfg.computation_text(), config_digest=cfg.digest())
    csv_path = os.path.join(out_dir, f"{args.grid}.csv")
    header = "attention,hierarchy,protogen,xi,similarity,mean,ci95,status"
    lines = [header]
    pg = cfg.pg_config()
    for row in rows:
        lines.append("{},{},{},{},{},{:.6g},{:.6g},{}".format(
            int(row.get("attention", True)), int(row.get("hierarchy", True)),
            int(row.get("protogen", True)), row.get("xi", pg.xi),
            row.get("similarity", pg.similarity), row["mean"], row["ci95"],
            row["status"].split(":")[0]))
    with open(csv_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"table: {csv_path}")
    if not args.no_plots:
        from .plots import save_grid_figure
        fig = save_grid_figure(rows, args.grid, os.path.join(out_dir, f"{args.grid}.png"))
        print(f"figure: {fig}")
    return EXIT_OK if any(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


def cmd_gradcheck(args):
    names = None
    if args.op:
        unknown = [n for n in args.op if n not in CHECKS]
        if unknown:
            raise ConfigError(f"unknown ops {unknown}; available: {sorted(CHECKS)}")
        names = args.op
    results = run_checks(names, seed=args.seed if args.seed is not None else 0)
    failures = []
    for name, err in results:
        ok = err < TOLERANCE
        print(f"{'PASS' if ok else 'FAIL'} {name:24s} max rel err {err:.3e}")
        if not ok:
            failures.append(name)
    if failures:
        print(f"gradient check FAILED for: {', '.join(failures)}")
        return EXIT_GRADCHECK
    print(f"all {len(results)} checks passed (tolerance {TOLERANCE:g})")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qproto",
        description="Few-shot classification with query-specific region prototypes")
    parser.add_argument("--help-config", action="store_true",
                        help="print every config key with default and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--seed", type=int, help="seed for this command")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--classes", type=int, help="train-split class count")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model episodically")
    common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--xi", type=int)
    p.add_argument("--similarity", choices=["cosine", "gaussian"])
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-hierarchy", action="store_true")
    p.add_argument("--no-protogen", action="store_true")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, help="episodes per repetition")
    p.add_argument("--reps", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate a configuration grid")
    common(p)
    p.add_argument("--grid", choices=sorted(GRIDS), required=True)
    p.add_argument("--episodes", type=int, help="training episodes per cell")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check all ops")
    common(p)
    p.add_argument("--op", action="append", help="check only these ops (repeatable)")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.help_config:
        print(RunConfig().describe())
        return EXIT_OK
    if not getattr(args, "fn", None):
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericsError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataFormatError, DatasetError, ValidationError, OSError) as e:
        print(f"data/io error: {e}", file=sys.stderr)
        return EXIT_IO
    except QprotoError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

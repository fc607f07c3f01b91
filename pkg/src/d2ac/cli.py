"""Command-line entry point: ``train``, ``eval``, ``check`` and ``ablate``."""
from __future__ import annotations

import argparse
import json
import os
import sys

from .config import format_config, parse_config, resolve_output_dir
from .errors import ConfigError


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    if getattr(args, "actor_loss", None):
        out["actor_loss"] = args.actor_loss
    if getattr(args, "learned_step_noise", False):
        out["learned_step_noise"] = True
    return out


def _load(args):
    return parse_config(args.config, _overrides(args))


def cmd_train(args) -> int:
    from .runner import run_train

    cfg = _load(args)
    out_dir = resolve_output_dir(cfg)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))
    echo = None if args.quiet else (lambda rec: print(json.dumps(rec, sort_keys=True), flush=True))
    result = run_train(cfg, out_dir, resume=args.resume, echo=echo)
    if result.status:
        print(f"training failed: {result.error}", file=sys.stderr)
    return result.status


def cmd_eval(args) -> int:
    from .runner import run_eval

    cfg = _load(args)
    print(json.dumps(run_eval(cfg, args.checkpoint, args.episodes), sort_keys=True))
    return 0


def cmd_check(args) -> int:
    from .checks import format_report, run_check

    results = run_check(args.only)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_ablate(args) -> int:
    from .runner import format_table, run_ablate, split_cells

    cfg = _load(args)
    cells = split_cells(args.cells) if args.cells else None
    out_dir = resolve_output_dir(cfg)
    rows = run_ablate(cfg, cells, args.seeds, out_dir, echo=None if args.quiet else print)
    table = format_table(rows)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2ac", description="Diffusion actor with distributional critics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--actor-loss", choices=["d2ac", "pg"], help="actor objective")
        p.add_argument("--learned-step-noise", action="store_true",
                       help="use the learned std head for per-step sampling noise")

    p = sub.add_parser("train", help="train an agent")
    p.add_argument("config")
    p.add_argument("--resume", action="store_true", help="continue from the output directory's checkpoint")
    p.add_argument("--quiet", action="store_true")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--episodes", type=int)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run the property and verification suites")
    p.add_argument("--only", action="append", help="run checks whose id contains this text")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    p.add_argument("config")
    p.add_argument("--cells", help="comma-separated cells, e.g. full,scalar_single,full@k_train=2,k=2")
    p.add_argument("--seeds", type=int)
    p.add_argument("--quiet", action="store_true")
    common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

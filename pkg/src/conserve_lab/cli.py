"""Command line entry point: ``conserve-lab <kind> --config PATH [--out DIR]``."""
from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigError
from .grid import set_fft_workers
from .harness import EXPERIMENT_KINDS, ExperimentConfig, emit, load_config, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conserve-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, help="FFT worker threads (default: $CONSERVE_LAB_THREADS)")
        p.add_argument("--strict", action="store_true", help="treat warnings as failures")
    return parser


def _threads(arg: int | None) -> int | None:
    if arg is not None:
        return arg
    env = os.environ.get("CONSERVE_LAB_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError([f"CONSERVE_LAB_THREADS: expected an integer, got {env!r}"]) from None
    return None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads = _threads(args.threads)
        if threads is not None and threads < 1:
            raise ConfigError([f"threads: must be positive, got {threads}"])
        set_fft_workers(threads)
        cfg = load_config(args.config)
        if cfg.kind != args.command:
            raise ConfigError([f"kind: config declares {cfg.kind!r} but subcommand is {args.command!r}"])
        if args.out:
            cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "out": args.out})
        bundle = run(cfg)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = emit(bundle, cfg.out)
    for c in bundle.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} {c.detail}".rstrip())
    for w in bundle.warnings:
        print(f"WARN {w}")
    print(f"config {bundle.config_hash} -> {out}")
    failed = not bundle.ok or (args.strict and bundle.warnings)
    return 1 if failed else 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

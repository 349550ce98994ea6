"""Command-line entry point: ``ranslice <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness
from .sim import ConfigError


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0,1,2"`` or ``"0-4"`` (inclusive) or a mix such as ``"0-2,7"``."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError(f"no seeds in {text!r}")
    return tuple(seeds)


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    changes = {}
    if getattr(args, "seeds", None) is not None:
        changes["seeds"] = args.seeds
    if getattr(args, "seed", None) is not None:
        changes["seeds"] = (args.seed,)
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if getattr(args, "steps", None) is not None:
        changes["total_steps"] = args.steps
    if getattr(args, "out", None) is not None:
        changes["out_dir"] = str(args.out)
    if getattr(args, "algo", None) is not None:
        mode = "average" if args.algo == "aro-sac" else "discounted"
        changes["agent"] = dataclasses.replace(cfg.agent, mode=mode)
    return cfg.replace(**changes).validate()


def _print_aggs(aggs):
    for a in aggs:
        ci = "n/a" if a.half_width is None else f"{a.half_width:.4f}"
        print(f"{a.label:>16}  {a.metric:<16}  n={a.n}  mean={a.mean:.4f}  ci95=±{ci}")


def cmd_train(args):
    cfg = _config(args)
    out = Path(cfg.out_dir)
    records = [harness.execute(harness.single_spec(cfg), s, out) for s in cfg.seeds]
    harness.write_manifest(cfg, out)
    for r in records:
        print(f"{r.label} seed={r.seed} episodes={len(r.curve)} final_cumulative={r.final_cumulative} "
              f"final_per_step={r.final_per_step} csv={r.csv_path}")


def cmd_sweep_gamma(args):
    _print_aggs(harness.sweep_gamma(_config(args)))


def cmd_sweep_horizon(args):
    _print_aggs(harness.sweep_horizon(_config(args)))


def cmd_compare(args):
    res = harness.compare(_config(args))
    _print_aggs(res.aggregates.values())
    print(f"improvement over discounted baseline: {res.improvement_pct:.2f}%")
    for lab, v in res.late_variance.items():
        print(f"late-window variance {lab}: {v:.6g}")
    print(f"gamma=1 instability flag: {res.instability_flag}")


def cmd_plot(args):
    paths = harness.emit_plots(args.csv, args.out or ".")
    for p in paths:
        print(p)


def cmd_validate_config(args):
    cfg = harness.load_config(args.config)
    print(f"ok: kind={cfg.kind} seeds={list(cfg.seeds)} hash={harness.config_hash(cfg)}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ranslice", description="RAN slicing simulator and SAC experiment runner.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeds=True):
        sp.add_argument("--config", type=Path, default=None, help="TOML config (default: packaged config)")
        sp.add_argument("--out", type=Path, default=None, help="output directory")
        sp.add_argument("--steps", type=int, default=None, help="override total env steps")
        if seeds:
            sp.add_argument("--seeds", type=parse_seeds, default=None, help="e.g. 0,1,2 or 0-4")
            sp.add_argument("--workers", type=int, default=None)

    sp = sub.add_parser("train", help="single training run")
    common(sp, seeds=False)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--algo", choices=["sac", "aro-sac"], default=None)
    sp.set_defaults(func=cmd_train)

    for name, func in [("sweep-gamma", cmd_sweep_gamma), ("sweep-horizon", cmd_sweep_horizon),
                       ("compare", cmd_compare)]:
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(func=func)

    sp = sub.add_parser("plot", help="learning curves from run CSVs")
    sp.add_argument("csv", nargs="+", type=Path)
    sp.add_argument("--out", type=Path, default=None)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("validate-config")
    sp.add_argument("--config", type=Path, default=None)
    sp.set_defaults(func=cmd_validate_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (harness.ConfigParseError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``fedfluence run|presets|verify``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checks
from .config import PRESETS, ExperimentConfig, load_config, preset_text
from .errors import FedfluenceError
from .experiments import run_experiment


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    fed, exp = {}, {}
    if args.mode:
        fed["mode"] = args.mode
    if args.hessian:
        fed["hessian"] = args.hessian
    if args.mode or args.hessian:
        mode = args.mode or cfg.federation.mode
        hess = args.hessian or cfg.federation.hessian
        exp["estimators"] = (f"{mode}/{hess}",)
    if args.oracle_cap is not None:
        exp["oracle_cap"] = args.oracle_cap
    if args.out:
        exp["output"] = args.out
    return cfg.override(federation=fed, experiment=exp).validate()


def _output_path(cfg: ExperimentConfig, config_path: str) -> Path:
    if cfg.experiment.output:
        return Path(cfg.experiment.output)
    return Path(f"{Path(config_path).stem}-{cfg.experiment.kind}.csv")


def cmd_run(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    table = run_experiment(cfg, workers=args.workers)
    out = _output_path(cfg, args.config)
    table.write(out)
    print(f"wrote {len(table.rows)} rows to {out}")
    return 0


def cmd_presets(args) -> int:
    if args.show:
        sys.stdout.write(preset_text(args.show))
        return 0
    for name in PRESETS:
        first = preset_text(name).splitlines()[0].lstrip("# ")
        print(f"{name:18s} {first}")
    return 0


def cmd_verify(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    results = checks.verify(cfg, workers=args.workers)
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfluence", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="config file, or a preset name")
        p.add_argument("--out", help="result CSV path")
        p.add_argument("--workers", type=int, default=1, help="parallel leave-one-out retrainings")
        p.add_argument("--oracle-cap", type=int, dest="oracle_cap", help="number of clients checked by the oracle")
        p.add_argument("--mode", choices=("basic", "lwet", "lwet-fine"))
        p.add_argument("--hessian", choices=("exact", "fisher"))

    p_run = sub.add_parser("run", help="run the experiment described by a config file")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_pre = sub.add_parser("presets", help="list shipped presets")
    p_pre.add_argument("--show", choices=PRESETS, help="print one preset's config")
    p_pre.set_defaults(func=cmd_presets)

    p_ver = sub.add_parser("verify", help="run the acceptance checks for a config")
    common(p_ver)
    p_ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FedfluenceError as exc:
        print(f"fedfluence: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""``bbm`` command line: one subcommand per experiment.

Exit codes: 0 ran and every check passed, 1 ran with failed checks,
2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import EXPERIMENTS, ConfigError, ExperimentConfig, run

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bbm", description="Catalytic branching Brownian motion experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=name not in ("expect", "kernels-test"),
                       help="experiment configuration (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--replicas", type=int)
        p.add_argument("--out", help="output directory (default from config, else ./runs)")
        p.add_argument("--workers", type=int, help="worker processes (does not change results)")
    return ap

def load_config(command: str, path: str | None, args) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    cfg = ExperimentConfig.from_dict(d, experiment=command)
    return cfg.with_overrides(seed=args.seed, replicas=args.replicas, output_dir=args.out, workers=args.workers)

def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors, which matches the config-error code
        return int(e.code or 0)
    try:
        cfg = load_config(args.command, args.config, args)
    except ConfigError as e:
        print(f"bbm: config error: {e}", file=sys.stderr)
        return 2
    report = run(cfg)
    for m in report.metrics:
        status = {True: "PASS", False: "FAIL", None: "info"}[m["pass"]]
        ref = "" if m["reference"] is None else f"  reference {m['reference']}"
        print(f"{status:4}  {m['name']}: {m['estimate']}{ref}")
    for f in report.flags:
        print(f"flag  {f}")
    print(f"report: {cfg.run_dir / 'report.json'}")
    return 0 if report.passed else 1

if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

    lfdstack learn      --config learn.yaml [--out DIR] [--seed N]
    lfdstack reproduce  --config repro.yaml ...
    lfdstack teach      --config teach.yaml ...
    lfdstack comply     --config comply.yaml ...
    lfdstack export     --run DIR [--out DIR]
    lfdstack batch      --configs a.yaml b.yaml ... [--workers N]

Exit codes: 0 success, 2 bad config/file, 3 degenerate demonstration,
4 no convergence, 5 simulation instability, 1 anything else.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys

from . import scenarios
from .errors import ConfigError, DegenerateDemo, InstabilityAbort, NoConvergence

EXIT_CODES = {
    ConfigError: 2,
    FileNotFoundError: 2,
    DegenerateDemo: 3,
    NoConvergence: 4,
    InstabilityAbort: 5,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lfdstack",
        description="Learning-from-demonstration control stack scenarios")
    sub = parser.add_subparsers(dest="command", required=True)

    for kind in scenarios.KINDS:
        p = sub.add_parser(kind, help=f"run the {kind} scenario")
        p.add_argument("--config", required=True, help="scenario YAML")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p = sub.add_parser("export", help="turn run traces into plot-data files")
    p.add_argument("--run", required=True, help="finished run directory")
    p.add_argument("--out", default=None, help="plot-data output directory")

    p = sub.add_parser("batch", help="run several scenarios concurrently")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--workers", type=int, default=2)
    return parser


def _run_one(config_path: str, out=None, seed=None) -> dict:
    cfg = scenarios.load_config(config_path)
    if out is not None:
        cfg.out = out
    if seed is not None:
        cfg.seed = seed
    report = scenarios.run_scenario(cfg)
    return report.to_dict()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            written = scenarios.export_plots(args.run, args.out)
            print(json.dumps({"written": written}, indent=1))
            return 0
        if args.command == "batch":
            with concurrent.futures.ProcessPoolExecutor(args.workers) as pool:
                futures = {pool.submit(_run_one, c): c for c in args.configs}
                failures = 0
                for fut, cfg_path in futures.items():
                    try:
                        print(json.dumps({cfg_path: fut.result()}, indent=1))
                    except Exception as e:  # noqa: BLE001 - report, keep going
                        failures += 1
                        print(f"{cfg_path}: {e}", file=sys.stderr)
            return 0 if failures == 0 else 1
        report = _run_one(args.config, args.out, args.seed)
        print(json.dumps(report, indent=1))
        return 0
    except Exception as e:  # noqa: BLE001 - map to documented exit codes
        for cls, code in EXIT_CODES.items():
            if isinstance(e, cls):
                print(f"error: {e}", file=sys.stderr)
                return code
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

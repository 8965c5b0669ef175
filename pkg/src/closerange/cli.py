"""Command-line entry point: ``closerange <stage> --config run.yaml``."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError
from .pipeline import STAGES, PipelineConfig, load_report, report_text, run_pipeline, write_reports


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="closerange", description="Photo-to-point-cloud reconstruction of small objects")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "all"):
        p = sub.add_parser(name, help=f"run the pipeline up to {name}" if name != "all" else "run every stage")
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--seed", type=int, help="override the random seed")
        p.add_argument("--threads", type=int, help="override the worker thread count")
        p.add_argument("--downscale", type=int, help="override the integer box downscale factor")
        p.add_argument("--debug", action="store_true", help="re-raise per-object failures")
        if name == "all":
            p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    p = sub.add_parser("report", help="rewrite report.csv and report.txt from a finished run")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--config", help="take the output directory from this configuration")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_yaml(args.config)
    overrides = {k: getattr(args, k) for k in ("seed", "threads", "downscale") if getattr(args, k) is not None}
    if args.out:
        overrides["output"] = args.out
    return cfg.replace(**overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            out = args.out or (PipelineConfig.from_yaml(args.config).output if args.config else None)
            if out is None:
                raise ConfigError("report needs --out or --config")
            report = load_report(out)
            write_reports(report, out)
            print(report_text(report), end="")
            return 0
        cfg = _config(args)
        if args.command == "all":
            stages = args.stages.split(",") if args.stages else list(STAGES)
        else:
            stages = [args.command]
        report = run_pipeline(cfg, [s.strip() for s in stages], debug=args.debug)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(report_text(report), end="")
    return 0 if report.all_completed else 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``sslwm <command> [options]``.

Log verbosity comes from the ``SSLWM_LOG_LEVEL`` environment variable
(DEBUG, INFO, WARNING, ...; default WARNING).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from ..errors import ConfigurationError, SSLWMError
from .config import ExperimentConfig
from .pipeline import STAGES, Run, build_report, run_all

LOG_ENV = "SSLWM_LOG_LEVEL"


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--stage", choices=STAGES, help="run-all: stop after this stage")

    select = argparse.ArgumentParser(add_help=False)
    select.add_argument("--variant", action="append", help="restrict to this variant (repeatable)")
    select.add_argument("--task", action="append", help="restrict to this downstream task (repeatable)")

    p = argparse.ArgumentParser(prog="sslwm", description="Watermarking toolkit for self-supervised encoders.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pattern", parents=[common], help="derive the watermark pattern")
    sub.add_parser("shadow", parents=[common], help="build the shadow dataset")
    s = sub.add_parser("embed", parents=[common], help="pre-train encoders with and without the watermark")
    s.add_argument("--variant", action="append")
    sub.add_parser("transfer", parents=[common, select], help="train downstream heads on frozen encoders")
    s = sub.add_parser("verify", parents=[common, select], help="black-box ownership verification")
    s.add_argument("--endpoint", help="URL of a served suspect model instead of the local checkpoint")
    sub.add_parser("attack", parents=[common, select], help="fine-tuning and pruning sweeps")
    sub.add_parser("detect", parents=[common, select], help="LOF detection of watermarked queries")
    s = sub.add_parser("serve", parents=[common], help="serve a suspect-model checkpoint over HTTP")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--max-batch", type=int, default=1024)
    sub.add_parser("report", parents=[common], help="aggregate runs into report.json / report.csv")
    sub.add_parser("run-all", parents=[common], help="run every stage, then report")
    return p


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigurationError(f"'{args.command}' needs --config")
    return ExperimentConfig.load(args.config, seed=args.seed, output_dir=args.out)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "serve":
            from ..service import ServeConfig, serve

            cfg = ServeConfig(args.checkpoint, args.host, args.port, args.max_batch)
            print(f"serving {args.checkpoint} on http://{args.host}:{args.port}", flush=True)
            serve(cfg, background=False)
        elif args.command == "report":
            out = args.out or str(_config(args).output_dir)
            report = build_report(out)
            print(json.dumps({"runs": len(report["runs"]), "sweep": len(report["sweep"]), "out": out}))
        elif args.command == "run-all":
            report = run_all(_config(args), until=args.stage)
            print(json.dumps({"runs": len(report["runs"]), "sweep": len(report["sweep"])}))
        else:
            run = Run(_config(args))
            kw = {}
            if getattr(args, "variant", None):
                kw["variants"] = args.variant
            if getattr(args, "task", None):
                kw["tasks"] = args.task
            if getattr(args, "endpoint", None):
                kw["endpoint_url"] = args.endpoint
            manifest = run.run_stage(args.command, **kw)
            print(json.dumps({"stage": manifest["stage"], "outputs": len(manifest["outputs"])}))
    except SSLWMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``teduo <stage> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import STAGES, ConfigError, DependencyError, Pipeline, load_config

EXIT_OK, EXIT_DEPENDENCY, EXIT_VALIDATION = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="YAML file or preset name ('desk', 'full'); default: full-scale settings")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    common.add_argument("--workers", type=int, default=1, help="parallel goals per stage")
    common.add_argument("--llm-endpoint", default=None,
                        help="chat-completion URL for LLM oracles; token read from TEDUO_LLM_TOKEN")
    common.add_argument("--workdir", default="teduo_run", help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="teduo", description="offline goal-conditioned pipeline")
    sub = p.add_subparsers(dest="stage", required=True)
    helps = {"collect": "gather the unlabeled transition dataset and goal lists",
             "abstract": "select goal features and project the dataset",
             "label": "label a distinct subset and train reward proxies",
             "solve": "tabular Q-learning per goal",
             "sft": "emit the prompt/completion dataset",
             "eval": "roll out policies in the simulator",
             "sweep": "dataset-size sweep with and without abstraction",
             "report": "aggregate manifests into a report"}
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=helps[stage])
    run = sub.add_parser("run", parents=[common], help="every stage from collect to report")
    run.add_argument("--with-sweep", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        cfg = load_config(args.config, overrides)
        pipe = Pipeline(cfg, args.workdir, args.workers, args.llm_endpoint)
        if args.stage == "run":
            result = pipe.run_all(with_sweep=args.with_sweep)
        else:
            result = pipe.run(args.stage)
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except ConfigError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    summary = result.get("summary", result) if isinstance(result, dict) else result
    print(json.dumps({"stage": args.stage, "result": summary}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``python -m ipt_lab <command>``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Every
command writes into a staging directory next to ``--out`` and publishes its
artifacts plus ``manifest.json`` only after it succeeded.
"""

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

from .checkpoint import atomic_write_text
from .config import ConfigError, config_hash, log_level_from_env

log = logging.getLogger("ipt-lab")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"


def configure_logging(level: int, extra_handlers: Sequence[logging.Handler] = ()) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr), *extra_handlers]
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipt", description="Instance-wise prompt tuning laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
        p.add_argument("--config", required=config_required, help="run config (JSON or TOML)")
        p.add_argument("--seed", type=int, help="seed for every random draw")
        p.add_argument("--out", help="output directory")

    for name, help_text in (("gen-data", "generate the synthetic task and category corpus"),
                            ("pretrain-backbone", "masked-token pretraining of the backbone"),
                            ("pretrain-prompts", "train the category classifier for Pretrained/Encoder IPT")):
        common(sub.add_parser(name, help=help_text))

    p = sub.add_parser("train", help="tune one strategy on the configured task")
    common(p, config_required=True)
    p.add_argument("--strategy", help="override strategy.strategy")

    p = sub.add_parser("few-shot", help="K-shot protocol with k-fold grid search")
    common(p, config_required=True)
    p.add_argument("--strategy")
    p.add_argument("--k", type=int, help="examples per label (default 32)")

    p = sub.add_parser("sweep", help="one run per value along an axis")
    common(p, config_required=True)
    p.add_argument("--strategy")
    p.add_argument("--axis", help="prompt-length | utilization-rate | strategy")
    p.add_argument("--values", help="comma-separated values, e.g. 5,10,16 or 0.2%%,10%%")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("seeds", help="repeat train over several seeds; mean and sample sd")
    common(p, config_required=True)
    p.add_argument("--strategy")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2,3,4 (overrides analysis.seeds)")

    p = sub.add_parser("analyze", help="projections, distance statistics and case study")
    common(p, config_required=True)
    p.add_argument("--strategy")

    p = sub.add_parser("report", help="markdown comparison across run directories")
    p.add_argument("runs", nargs="+", help="run directories containing result.json")
    p.add_argument("--out", required=True)

    sub.add_parser("serve", help="run as an MCP stdio server")
    return parser


def overrides_from(args: argparse.Namespace) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key in ("seed", "out", "strategy", "k", "axis", "seeds"):
        if getattr(args, key, None) is not None:
            out[key] = getattr(args, key)
    values = getattr(args, "values", None)
    if values is not None:
        out["values"] = [v.strip() for v in values.split(",") if v.strip()]
    return out


def _publish(staging: str, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    names = sorted(os.listdir(staging), key=lambda n: (n == "manifest.json", n))
    for name in names:
        dest = os.path.join(out_dir, name)
        if os.path.isdir(dest):
            shutil.rmtree(dest)
        elif os.path.exists(dest):
            os.remove(dest)
        os.replace(os.path.join(staging, name), dest)
    os.rmdir(staging)
    return names


def execute(command: str, rc, config_path: Optional[str] = None, jobs: int = 1,
            runs: Sequence[str] = ()) -> Dict[str, Any]:
    """Run one pipeline into a staging directory and publish it with a manifest."""
    from . import pipelines

    out_dir = os.path.abspath(rc.out)
    parent = os.path.dirname(out_dir)
    os.makedirs(parent, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".ipt-staging-", dir=parent)
    started = datetime.now(timezone.utc).isoformat()
    try:
        if command == "gen-data":
            summary = pipelines.run_gen_data(rc, staging)
        elif command == "pretrain-backbone":
            summary = pipelines.run_pretrain_backbone(rc, staging)
        elif command == "pretrain-prompts":
            summary = pipelines.run_pretrain_prompts(rc, staging)
        elif command == "train":
            summary = pipelines.run_train(rc, staging)
        elif command == "few-shot":
            summary = pipelines.run_few_shot(rc, staging)
        elif command == "sweep":
            summary = pipelines.run_sweep(rc, staging, jobs=jobs)
        elif command == "seeds":
            summary = pipelines.run_seeds(rc, staging)
        elif command == "analyze":
            summary = pipelines.run_analyze(rc, staging)
        elif command == "report":
            summary = pipelines.run_report(runs, staging)
        else:
            raise ConfigError(f"unknown command {command!r}; allowed: {', '.join(pipelines.COMMANDS)}")
        manifest = pipelines.manifest_record(
            command, config_path, config_hash(config_path) if config_path else "", rc.seed, started,
            datetime.now(timezone.utc).isoformat(), summary.get("artifacts", []))
        atomic_write_text(os.path.join(staging, "manifest.json"), json.dumps(manifest, indent=2) + "\n")
        _publish(staging, out_dir)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    log.info(f"{command} finished; outputs in {out_dir}")
    return summary


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        level = log_level_from_env()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    configure_logging(level)
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        from .server import main as serve_main
        serve_main()
        return 0

    from .pipelines import RunConfig, load_run_config, validate_for
    try:
        if args.command == "report":
            rc = RunConfig(out=args.out)
            missing = [r for r in args.runs if not os.path.isfile(os.path.join(r, "result.json"))]
            if missing:
                raise ConfigError(f"run directories without result.json: {', '.join(missing)}")
        else:
            rc = load_run_config(args.config, overrides_from(args))
            validate_for(args.command, rc)
    except ConfigError as e:
        log.error(f"config error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        execute(args.command, rc, config_path=getattr(args, "config", None), jobs=getattr(args, "jobs", 1) or 1,
                runs=getattr(args, "runs", ()))
    except ConfigError as e:
        log.error(f"config error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.exception(f"{args.command} failed: {e}")
        return 1
    return 0

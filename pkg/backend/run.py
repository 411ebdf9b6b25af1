#!/usr/bin/env python3
# backend/run.py
"""
Command-line entry point for the zero-shot-from-scratch toolkit.

    python backend/run.py train --config configs/synthetic_fc.cfg --seed 0
    python backend/run.py eval-zsl --config configs/synthetic_fc.cfg --seed 0
    python backend/run.py grid --spec configs/grid_desk.cfg --dry-run
    python backend/run.py report --table zsl
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from dotenv import load_dotenv

load_dotenv()

from config.run_config import load_run_config
from config.settings import settings
from constants import (
    CLI_COMMANDS, DEVICE_BUDGETS, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, EXIT_ZFS_VIOLATION, VERSION,
)
from controllers.data_controller import gen_synthetic_command
from controllers.experiments_controller import eval_zsl_command, probe_parts_command, train_command, tre_command
from controllers.grid_controller import grid_command
from controllers.mi_controller import mi_study_command, mi_train_command, mi_viz_command
from controllers.report_controller import report_command
from core.container import container
from models.enums import EncoderFamily, LocalLoss, ReportTable
from models.models import RunConfig
from utils.errors import ConfigError, ZFSError, ZFSViolationError
from utils.helpers import seed_everything

logger = logging.getLogger(__name__)


def setup_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler(settings.log_file, encoding='utf-8'),
        ],
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=f"Zero-shot-from-scratch toolkit v{VERSION}")
    parser.add_argument("command", choices=CLI_COMMANDS)
    parser.add_argument("--config", help="INI run config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--dataset")
    parser.add_argument("--objective", help="fc, vae, bvae, aae, dim, amdim, pn or cmdim_p<p>")
    parser.add_argument("--local-loss", choices=[l.value for l in LocalLoss])
    parser.add_argument("--encoder", choices=[e.value for e in EncoderFamily])
    parser.add_argument("--out", help="output directory for run artifacts")
    parser.add_argument("--zfs-strict", action=argparse.BooleanOptionalAction, default=None,
                        help="refuse external checkpoints (default on)")
    parser.add_argument("--device-budget", choices=sorted(DEVICE_BUDGETS), help="compute budget preset")
    parser.add_argument("--checkpoint", help="encoder checkpoint (defaults to the run directory)")
    parser.add_argument("--init-checkpoint", help="train: start from these weights (needs --no-zfs-strict)")
    parser.add_argument("--num-pairs", type=int, help="mi-viz / mi-study: image pairs")
    parser.add_argument("--spec", help="grid: INI grid spec")
    parser.add_argument("--dry-run", action="store_true", help="grid: print cells without running")
    parser.add_argument("--concurrency", type=int, help="grid: cells in flight")
    parser.add_argument("--table", choices=[t.value for t in ReportTable], default=ReportTable.ZSL.value)
    parser.add_argument("--figures", help="report: directory for figures")
    return parser


def apply_budget(config: RunConfig, budget: Optional[str]) -> RunConfig:
    if not budget:
        return config
    preset = DEVICE_BUDGETS[budget]
    data = config.model_dump()
    data.update(preset["run"])
    for section in ("training", "protonet", "probes", "mine", "tre"):
        data[section].update(preset[section])
    return RunConfig.model_validate(data)


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {
        "dataset": args.dataset, "seed": args.seed, "objective_label": args.objective,
        "local_loss": args.local_loss, "encoder": args.encoder, "out_dir": args.out,
        "zfs_strict": args.zfs_strict,
    }
    if args.zfs_strict is None and not settings.zfs_strict:
        overrides["zfs_strict"] = False
    return apply_budget(load_run_config(args.config, overrides), args.device_budget)


def dispatch(args: argparse.Namespace) -> Dict[str, Any]:
    if args.command == "grid":
        if not args.spec:
            raise ConfigError("grid needs --spec")
        extra: List[str] = []
        if args.device_budget:
            extra += ["--device-budget", args.device_budget]
        if args.zfs_strict is False:
            extra.append("--no-zfs-strict")
        kwargs = {"concurrency": args.concurrency} if args.concurrency else {}
        return grid_command(args.spec, args.config, args.out, args.dry_run, extra_args=extra, **kwargs)

    container.start()
    if args.command == "report":
        return report_command(container, args.table, args.figures)

    config = load_config(args)
    seed_everything(config.seed, settings.num_threads, settings.deterministic)
    if args.command == "gen-synthetic":
        return gen_synthetic_command(config, container, args.out)
    if args.command == "train":
        return train_command(config, container, args.init_checkpoint)
    if args.command == "eval-zsl":
        return eval_zsl_command(config, container, args.checkpoint)
    if args.command == "probe-parts":
        return probe_parts_command(config, container, args.checkpoint)
    if args.command == "mi-train":
        return mi_train_command(config, container, args.checkpoint)
    if args.command == "mi-viz":
        return mi_viz_command(config, container, args.num_pairs or 8, args.checkpoint)
    if args.command == "mi-study":
        pairs = args.num_pairs or DEVICE_BUDGETS[args.device_budget or "desk"]["study"]["pairs"]
        return mi_study_command(config, container, int(pairs), args.checkpoint)
    if args.command == "tre":
        return tre_command(config, container, args.checkpoint)
    raise ConfigError(f"Unknown command: {args.command}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    setup_logging()

    try:
        summary = dispatch(args)
    except ZFSViolationError as e:
        logger.error(f"ZFS violation: {e}")
        return EXIT_ZFS_VIOLATION
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return EXIT_USAGE
    except ZFSError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"Command {args.command} failed: {e}")
        return EXIT_FAILURE

    if args.command == "report":
        print(summary.pop("text"))
    print(json.dumps(summary, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

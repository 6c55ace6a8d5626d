"""JetMoE toy-scale trainer: pretrain, SFT, DPO, eval and inspection commands."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, NoReturn, Optional

from dotenv import load_dotenv

from core.config_manager import load_run_config
from core.errors import (CheckpointError, ConfigurationError, DataError, DegenerateBatchError,
                         JetMoeError, NumericError)
from core.log_handler import attach_metrics_handler
from core.model import ModelConfig, count_params
from core.optim import dump_schedule
from core.training_manager import TrainingManager

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class CliParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; 2 is reserved for data errors here."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: $JETMOE_CONFIG or config.json)")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("--out", help="override train.out_dir")
    common.add_argument("--steps", type=int, help="override train.steps")

    parser = CliParser(prog="jetmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain on a byte corpus")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--corpus", help="override train.corpus")

    p = sub.add_parser("sft", parents=[common], help="distilled supervised fine-tuning")
    p.add_argument("--dataset", help="SFT JSONL dataset")
    p.add_argument("--init", help="checkpoint to fine-tune")

    p = sub.add_parser("dpo", parents=[common], help="distilled direct preference optimization")
    p.add_argument("--dataset", help="preference JSONL dataset")
    p.add_argument("--reference", help="frozen reference checkpoint (also the initial policy)")
    p.add_argument("--init", help="initial policy checkpoint, if different from the reference")

    p = sub.add_parser("eval", parents=[common], help="perplexity of a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="evaluation corpus (default: train.corpus)")

    p = sub.add_parser("count-params", parents=[common], help="closed-form total/active parameter counts")
    p.add_argument("--preset", choices=["config", "tiny", "full"], default="config")

    p = sub.add_parser("dump-schedule", parents=[common], help="print the learning-rate schedule as CSV")
    p.add_argument("--total-steps", type=int, help="last step to print (default: train.steps)")
    return parser


def _run(args) -> int:
    overrides = {"train.seed": args.seed, "train.out_dir": args.out, "train.steps": args.steps}
    if getattr(args, "corpus", None) and args.command == "pretrain":
        overrides["train.corpus"] = args.corpus
    cfg = load_run_config(args.config or os.getenv("JETMOE_CONFIG"), overrides)

    if args.command == "count-params":
        model_cfg = {"full": ModelConfig.full(), "tiny": ModelConfig.tiny()}.get(args.preset, cfg.model)
        total, active = count_params(model_cfg)
        print(json.dumps({"preset": args.preset, "total": total, "active": active}))
        return EXIT_OK

    if args.command == "dump-schedule":
        total_steps = args.total_steps if args.total_steps is not None else cfg.steps
        if total_steps < 0:
            raise ConfigurationError(f"--total-steps must be >= 0, got {total_steps}")
        print("step,lr")
        for step, lr in dump_schedule(cfg.schedule, total_steps):
            print(f"{step},{lr!r}")
        return EXIT_OK

    metrics_path = Path(cfg.out_dir) / "metrics.log"
    attach_metrics_handler(metrics_path)
    logger.info(f"Writing metrics to {metrics_path}")
    manager = TrainingManager(cfg)

    if args.command == "pretrain":
        manager.pretrain(resume=args.resume)
    elif args.command == "sft":
        manager.sft(dataset=args.dataset, init=args.init)
    elif args.command == "dpo":
        manager.dpo(dataset=args.dataset, reference=args.reference, init=args.init)
    elif args.command == "eval":
        result = manager.eval_perplexity(args.checkpoint, args.corpus)
        print(json.dumps(result))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=os.getenv("JETMOE_LOG_LEVEL", "INFO").upper(),
        format='%(asctime)s - %(levelname)s - %(name)s - %(message)s',
        datefmt='%H:%M:%S'
    )
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except (DataError, DegenerateBatchError, CheckpointError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except (ConfigurationError, JetMoeError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())

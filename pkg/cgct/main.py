import argparse
import asyncio
import logging
import os
import sys

from dotenv import load_dotenv, set_key

from .config import ENV_LOG_LEVEL, ENV_OUTPUT_DIR
from .errors import CGCTError, ConfigurationError
from .experiment import (
    EXIT_CONFIG,
    EXIT_FAILURE,
    EXIT_OK,
    evaluate_checkpoint,
    export_checkpoint_embeddings,
    run_experiment,
    run_sweep,
)
from .variants import Variant

load_dotenv()

__version__ = "0.1.0"


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    # Silence the PIL plugin logs
    logging.getLogger("PIL").setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Curriculum graph co-teaching for multi-target domain adaptation"
    )
    parser.add_argument("-v", "--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level",
        type=str,
        default=os.getenv(ENV_LOG_LEVEL, "INFO"),
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level (default: CGCT_LOG_LEVEL or INFO)",
    )
    subparsers = parser.add_subparsers(dest="command")

    def add_overrides(sub):
        sub.add_argument("--seed", type=int, help="Run or evaluate this seed only")
        sub.add_argument("-o", "--out", type=str, help="Output directory (overrides run.output_dir)")

    train = subparsers.add_parser("train", help="Run the experiment of a config file")
    train.add_argument("config", help="Path of the config file")
    add_overrides(train)
    train.add_argument(
        "--variant",
        type=str,
        choices=[v.value for v in Variant],
        help="Variant to run instead of the config's",
    )
    train.add_argument(
        "--save-env",
        action="store_true",
        help="Save the --out directory to the .env file as the default output directory",
    )

    evaluate = subparsers.add_parser("eval", help="Evaluate a checkpoint on a config's task")
    evaluate.add_argument("checkpoint", help="Path of the checkpoint")
    evaluate.add_argument("config", help="Path of the config file")
    evaluate.add_argument("--seed", type=int, help="Seed of the task (default: the checkpoint's)")

    export = subparsers.add_parser(
        "export-embeddings", help="Write features of every evaluation sample as CSV"
    )
    export.add_argument("checkpoint", help="Path of the checkpoint")
    export.add_argument("config", help="Path of the config file")
    add_overrides(export)

    sweep = subparsers.add_parser("sweep", help="Run every *.cfg in a directory")
    sweep.add_argument("config_dir", help="Directory of config files")
    sweep.add_argument("-o", "--out", type=str, help="Output directory of every run and the combined summary")
    return parser


async def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    logger = logging.getLogger(__name__)

    if args.command == "train":
        if args.save_env:
            if not args.out:
                print("--save-env needs --out")
                return EXIT_CONFIG
            os.environ[ENV_OUTPUT_DIR] = args.out
            set_key(".env", ENV_OUTPUT_DIR, args.out)
            print(f"Default output directory set to {args.out}")
        return await run_experiment(args.config, seed=args.seed, out=args.out, variant=args.variant)
    if args.command == "sweep":
        return await run_sweep(args.config_dir, out=args.out)
    if args.command in ("eval", "export-embeddings"):
        try:
            if args.command == "eval":
                metrics = await asyncio.to_thread(
                    evaluate_checkpoint, args.checkpoint, args.config, args.seed
                )
                for name, accuracy in metrics.per_domain_accuracy.items():
                    print(f"{name}: {accuracy:.4f}")
                print(f"average: {metrics.average:.4f}")
            else:
                out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
                output = os.path.join(out_dir, "embeddings.csv")
                path = await asyncio.to_thread(
                    export_checkpoint_embeddings, args.checkpoint, args.config, output, args.seed
                )
                print(f"Embeddings written to {path}")
        except ConfigurationError as e:
            logger.error("Invalid configuration: %s", e)
            return EXIT_CONFIG
        except (CGCTError, OSError) as e:
            logger.error("%s failed: %s", args.command, e)
            return EXIT_FAILURE
        return EXIT_OK

    parser.print_help()
    return EXIT_OK


def entry_point():
    sys.exit(asyncio.run(main()))


if __name__ == "__main__":
    entry_point()

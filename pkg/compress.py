"""
ADMM weight pruning / quantization toolkit.

Usage:
    # Train the LeNet-5 baseline on MNIST (ADMM_NN_DATA_DIR or dataset_path)
    python compress.py train --config configs/lenet5_mnist.json

    # Progressive non-structured pruning, then 3-bit quantization of the result
    python compress.py compress --regime ns --checkpoint runs/train_<ts>/model.npz
    python compress.py compress --regime quant --checkpoint runs/compress_<ts>/model.npz --set quant.bits=3

    # Resume an interrupted run
    python compress.py compress --regime ns --resume runs/compress_<ts>

    # Storage report of a checkpoint
    python compress.py analyze runs/compress_<ts>/model.npz --bits 3 --scheme rel

    # Matched-accuracy structured vs non-structured comparison (exit code = verdict)
    python compress.py compare --checkpoint runs/train_<ts>/model.npz

    # Recompute the published comparison tables
    python compress.py tables

Exit codes: 0 success (compare: structured preferred), 10 compare: non-structured
preferred, 1 runtime failure, 2 configuration error.
"""

import argparse
import sys
from pathlib import Path

from loguru import logger

sys.path.append(str(Path(__file__).parent))

from cli.commands import cmd_analyze, cmd_compare, cmd_compress, cmd_tables, cmd_train
from cli.config import load_config
from cli.reporting import configure_console
from comparison.tables import DEFAULT_TABLES
from models.errors import CompressionError, ConfigError

EXIT_RUNTIME = 1
EXIT_CONFIG = 2

SCHEMES = {"rel": "relative", "relative": "relative", "abs": "absolute", "absolute": "absolute"}
REGIMES = {"ns": "ns", "nonstructured": "ns", "struct": "struct", "structured": "struct",
           "quant": "quant", "quantize": "quant"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="ADMM pruning and quantization of CONV/FC networks")
    parser.add_argument("--log-level", default="INFO", help="console log level (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="experiment file (JSON or YAML)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train.epochs=5 (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
        return p

    experiment("train", "train the baseline network")

    p = experiment("compress", "run one compression regime")
    p.add_argument("--regime", required=True, choices=sorted(REGIMES))
    p.add_argument("--checkpoint", type=Path, default=None, help="trained model.npz to start from")
    p.add_argument("--resume", type=Path, default=None, help="run directory of an interrupted compress run")

    p = sub.add_parser("analyze", help="storage report of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--bits", type=int, default=None, help="bits per stored weight (default: from levels, else 32)")
    p.add_argument("--scheme", choices=sorted(SCHEMES), default="rel")
    p.add_argument("--scope", choices=["conv", "all"], default="conv")
    p.add_argument("--regime", choices=["nonstructured", "structured"], default="nonstructured")
    p.add_argument("--output", type=Path, default=None, help="also write the report as CSV")

    p = experiment("compare", "matched-accuracy structured vs non-structured comparison")
    p.add_argument("--checkpoint", type=Path, default=None, help="trained baseline (trained first if omitted)")

    p = sub.add_parser("tables", help="recompute the published comparison tables")
    p.add_argument("--input", type=Path, default=DEFAULT_TABLES)
    p.add_argument("--output-dir", type=Path, default=None)
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def run(args) -> int:
    if args.command == "train":
        return cmd_train(_config(args)).exit_code
    if args.command == "compress":
        if args.checkpoint is not None and not args.checkpoint.exists():
            raise ConfigError(f"checkpoint not found: {args.checkpoint}", field="checkpoint")
        return cmd_compress(_config(args), REGIMES[args.regime], args.checkpoint, args.resume).exit_code
    if args.command == "analyze":
        cmd_analyze(args.checkpoint, args.bits, SCHEMES[args.scheme], args.scope, args.regime, args.output)
        return 0
    if args.command == "compare":
        if args.checkpoint is not None and not args.checkpoint.exists():
            raise ConfigError(f"checkpoint not found: {args.checkpoint}", field="checkpoint")
        return cmd_compare(_config(args), args.checkpoint).exit_code
    cmd_tables(args.input, args.output_dir)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_console(args.log_level.upper())
    try:
        return run(args)
    except ConfigError as exc:
        logger.error(f"configuration error: {exc}")
        return EXIT_CONFIG
    except (CompressionError, FileNotFoundError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        logger.warning("interrupted; compress runs can continue with --resume")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Command-line entry point for the E2EC contour lab.

    python src/main.py gen-data --n 200 --family blob --seed 7 --out data.json
    python src/main.py sample-labels --data data.json --m 4 --svg labels.svg --verify
    python src/main.py train --data data.json --out-dir run
    python src/main.py eval --data data.json --checkpoint run/model.ckpt --out report.json
    python src/main.py grad-check --seed 3 --n 16 --c 4
    python src/main.py bench --data data.json --checkpoint run/model.ckpt
    python src/main.py render --data data.json --checkpoint run/model.ckpt --stages final --paths --out fig.svg
    python src/main.py ablate --suite loss --out loss.csv

Exit codes: 0 ok, 1 usage, 2 runtime failure, 3 check failure.
"""

import argparse
import json
import sys
from typing import List, Optional, Sequence

from cli import commands
from core.dataset import SHAPE_FAMILIES
from core.errors import ContourLabError, DivergenceDetected
from core.losses import FINAL_LOSSES
from core.training import ABLATION_SUITES, OPTIMIZERS
from utils.config_manager import ConfigManager
from utils.logging_config import LoggingConfig, check_debug_flag

# Dedicated flags and the configuration keys they set
FLAG_KEYS = {
    "instances": ("synth.n_instances",),
    "family": ("synth.shape_family",),
    "image_size": ("synth.image_size",),
    "vertex_budget": ("synth.vertex_budget",),
    "vertices": ("mda.n_vertices", "model.n_vertices"),
    "m": ("mda.m_aligned",),
    "channels": ("model.channels",),
    "epochs": ("train.epochs",),
    "lr": ("train.learning_rate",),
    "optimizer": ("train.optimizer",),
    "batch_size": ("train.batch_size",),
    "final_loss": ("loss.final_loss",),
}


class CLIParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(commands.EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--seed", type=int, help="seed for data generation and training (default $E2EC_SEED)")
    common.add_argument("--debug", action="store_true", help="verbose console logging")
    common.add_argument("--log-dir", help="log directory (default $E2EC_LOG_DIR or ~/Documents/E2ECContourLab/logs)")
    return common


def build_parser() -> CLIParser:
    common = _common_options()
    parser = CLIParser(prog="e2ec", description="Contour-based instance segmentation lab")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", dest="instances", type=int, help="number of instances")
    p.add_argument("--family", choices=SHAPE_FAMILIES)
    p.add_argument("--image-size", nargs=2, type=int, metavar=("H", "W"))
    p.add_argument("--vertex-budget", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=commands.cmd_gen_data, validate=("synth", "mda"))

    p = sub.add_parser("sample-labels", parents=[common], help="dump training labels of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--n", dest="vertices", type=int, help="contour vertices N")
    p.add_argument("--m", type=int, help="aligned directions M")
    p.add_argument("--out", help="label JSON (default stdout)")
    p.add_argument("--svg", help="write alignment panels for M in 1, 2, 4, 8")
    p.add_argument("--instance", type=int, default=0, help="instance drawn in the SVG")
    p.add_argument("--verify", action="store_true", help="re-check every label vertex; exit 3 on failure")
    p.set_defaults(func=commands.cmd_sample_labels, validate=("mda",))

    p = sub.add_parser("train", parents=[common], help="train on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", dest="vertices", type=int)
    p.add_argument("--c", dest="channels", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--final-loss", choices=FINAL_LOSSES)
    p.set_defaults(func=commands.cmd_train, validate=("train",))

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report JSON")
    p.add_argument("--no-timing", action="store_true", help="skip throughput measurement")
    p.set_defaults(func=commands.cmd_eval, validate=())

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--n", type=int, default=16, help="contour vertices")
    p.add_argument("--c", type=int, default=4, help="feature channels")
    p.add_argument("--grid", type=int, default=16, help="feature grid side")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", help="results JSON")
    p.add_argument("--verbose", action="store_true", help="print every check")
    p.set_defaults(func=commands.cmd_grad_check, validate=())

    p = sub.add_parser("bench", parents=[common], help="per-stage throughput")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="default: freshly initialised weights")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", help="throughput CSV")
    p.add_argument("--check-order", action="store_true", help="exit 3 unless initial >= coarse >= final")
    p.set_defaults(func=commands.cmd_bench, validate=("train",))

    p = sub.add_parser("render", parents=[common], help="draw stage contours as SVG")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", nargs="+", default=["initial", "coarse", "final"],
                   choices=["initial", "coarse", "iter1", "final"])
    p.add_argument("--paths", action="store_true", help="draw deformation paths")
    p.add_argument("--instances", dest="render_instances", nargs="+", type=int,
                   help="instance indices (default 0)")
    p.add_argument("--scale", type=float, default=8.0, help="SVG units per pixel")
    p.set_defaults(func=commands.cmd_render, validate=())

    p = sub.add_parser("ablate", parents=[common], help="run an ablation suite")
    p.add_argument("--suite", required=True, choices=ABLATION_SUITES)
    p.add_argument("--n", dest="instances", type=int, help="training instances")
    p.add_argument("--family", choices=SHAPE_FAMILIES)
    p.add_argument("--holdout", type=int, default=50, help="held-out instances")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--variants", nargs="+", help="only these variants of the suite (default all)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=commands.cmd_ablate, validate=("synth", "train"))
    return parser


def flag_overrides(args: argparse.Namespace) -> List[str]:
    overrides = []
    for dest, keys in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides.extend(f"{key}={json.dumps(value)}" for key in keys)
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)

    debug_mode = args.debug or check_debug_flag(argv)
    logging_config = LoggingConfig(args.log_dir)
    logger = logging_config.setup_logging(debug_mode)
    logging_config.setup_exception_handler()

    logger.info(f"=== E2EC contour lab: {args.command} ===")
    logger.info(f"Command line args: {argv}")

    try:
        config = ConfigManager(args.config, overrides=flag_overrides(args) + args.set,
                               seed=args.seed, validate=args.validate)
        code = args.func(args, config)
    except DivergenceDetected as e:
        logger.error(f"Training diverged: {e}")
        print(f"error: {e}", file=sys.stderr)
        print(f"diagnostics: {json.dumps(e.diagnostics, sort_keys=True, default=str)}", file=sys.stderr)
        return commands.EXIT_RUNTIME
    except ContourLabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return commands.EXIT_RUNTIME

    logger.info(f"=== {args.command} finished with exit code {code} ===")
    return code


if __name__ == '__main__':
    sys.exit(main())

"""Command line interface: ``symdefense {train,attack-eval,equigap,prepare-mnist}``.

Exit codes: 0 success, 2 configuration error, 3 data-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .attacks import AttackSpec
from .data import DataFormatError, load_split, prepare_mnist_subset
from .group import ELEMENTS
from .harness import ConfigError, ExperimentConfig, emit_report, measure_equivariance_gap, run_experiment, train
from .nn import CheckpointError, load_checkpoint

EXIT_CONFIG = 2
EXIT_DATA = 3

ATTACK_FAMILY = {"pgd": "pgd", "square": "square", "adaptive": "adaptive_pgd"}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=("mnist", "cifar10"), required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symdefense", description="Klein four-group symmetry defense experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier for one defense")
    _common(p)
    p.add_argument("--defense", choices=("none", "flip", "invert", "subgroup"), default="none")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("attack-eval", help="attack a model and evaluate a defense")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--model-invert")
    p.add_argument("--defense", choices=("none", "flip", "invert", "subgroup"),
                   help="defaults to invert when --model-invert is given, otherwise subgroup")
    p.add_argument("--attack", choices=("none", "pgd", "square", "adaptive"), default="pgd")
    p.add_argument("--norm", choices=("l2", "linf"), default="linf")
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--queries", type=int, default=10000)
    p.add_argument("--p-init", type=float)
    p.add_argument("--origin", choices=[g.cli_name for g in ELEMENTS], default="identity")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("csv", "markdown"), default="csv")

    p = sub.add_parser("equigap", help="label disagreement under each symmetry")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--samples", type=int, default=1000)

    p = sub.add_parser("prepare-mnist", help="write the 5000-image MNIST subset as IDX files")
    p.add_argument("--out", required=True)
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _attack_spec(args) -> AttackSpec | None:
    if args.attack == "none":
        return None
    family = ATTACK_FAMILY[args.attack]
    budget = args.queries if family == "square" else args.steps
    return AttackSpec(family=family, norm=args.norm, eps=args.eps, steps_or_queries=budget,
                      seed=args.seed, p_init=args.p_init if family == "square" else None)


def _run(args) -> int:
    if args.command == "prepare-mnist":
        print(prepare_mnist_subset(args.out, n_test=args.test_size, seed=args.seed))
        return 0
    if args.command == "train":
        config = ExperimentConfig(dataset=args.dataset, data_dir=args.data_dir, defense=args.defense,
                                  seed=args.seed, epochs=args.epochs, lr=args.lr, momentum=args.momentum,
                                  batch_size=args.batch_size)
        print(train(config, args.out))
        return 0
    if args.command == "attack-eval":
        defense = args.defense or ("invert" if args.model_invert else "subgroup")
        config = ExperimentConfig(dataset=args.dataset, data_dir=args.data_dir, defense=defense,
                                  attack=_attack_spec(args), attack_origin=args.origin,
                                  sample_count=args.samples, seed=args.seed, model=args.model,
                                  model_invert=args.model_invert, workers=args.workers)
        report = run_experiment(config)
        print(emit_report(report, args.report, args.format))
        return 0
    if args.command == "equigap":
        net = load_checkpoint(args.model)
        gaps = measure_equivariance_gap(net, load_split(args.dataset, args.data_dir, "test"), args.samples)
        print(json.dumps(gaps, indent=2))
        return 0
    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (DataFormatError, CheckpointError) as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

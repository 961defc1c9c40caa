"""Command line entry point: ``srattack <subcommand> [--config FILE] [overrides]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import Experiment, ExperimentConfig, StageError
from .srs import EmbedderSpec

COMMANDS = ("gen-corpus", "enroll", "tune-threshold", "attack", "robust-attack", "ota-eval",
            "transfer-matrix", "report", "run")


def parse_models(text: str):
    """``"tanh:0,softplus:1"`` -> EmbedderSpec list (activation:weight_seed)."""
    specs = []
    for item in text.split(","):
        act, _, seed = item.strip().partition(":")
        specs.append(EmbedderSpec(weight_seed=int(seed or 0), activation=act))
    return specs


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its values")
    common.add_argument("--out", dest="output_dir", help="output directory")
    common.add_argument("--seed", dest="master_seed", type=int, help="master seed")
    common.add_argument("--name", help="experiment name used in reports")
    common.add_argument("--setting", help="attack setting C1..C10")
    common.add_argument("--loss", help="loss name (default: best loss for the setting)")
    common.add_argument("--target-policy", dest="target_policy",
                        help="random | least-likely | fixed:<index>")
    common.add_argument("--models", help="comma list of activation:seed, e.g. tanh:0,softplus:1")
    common.add_argument("--max-voices", dest="max_voices", type=int)
    common.add_argument("--workers", type=int, help="worker processes for per-voice jobs")
    common.add_argument("--optimizer", choices=("FGSM", "PGD", "CW2", "NES"))
    common.add_argument("--epsilon", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--iters", type=int)
    common.add_argument("--kappa", type=float)
    common.add_argument("--nes-samples", dest="nes_samples", type=int)
    common.add_argument("--random-start", dest="random_start", action="store_true", default=None)
    common.add_argument("--adam", action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="srattack",
                                     description="Source-to-target attacks on toy speaker "
                                                 "recognition systems.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-corpus": "write the synthetic corpus as WAV files",
        "enroll": "enroll speakers for every model",
        "tune-threshold": "set EER thresholds and write benign rates",
        "attack": "run the configured optimizer on every source voice",
        "robust-attack": "run the transform-averaged attack",
        "ota-eval": "replay stored voices through held-out rooms and noise",
        "transfer-matrix": "cross-model transfer matrix and gradient-size diagnostic",
        "report": "rebuild the summary from stored per-voice records",
        "run": "all stages in order",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "robust-attack":
            p.add_argument("--K", dest="K", type=int, help="transforms sampled per step")
            p.add_argument("--transform", dest="kind",
                           choices=("Identity", "NoiseOnly", "RirOnly", "NoiseAndRir"))
        if name == "run":
            p.add_argument("--no-robust", action="store_true")
            p.add_argument("--no-ota", action="store_true")
            p.add_argument("--transfer", action="store_true")
    return parser


_TOP = ("output_dir", "master_seed", "name", "setting", "loss", "target_policy", "max_voices",
        "workers")
_ATTACK = ("optimizer", "epsilon", "alpha", "iters", "kappa", "nes_samples", "random_start",
           "adam")


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    d = cfg.to_dict()
    for key in _TOP:
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    for key in _ATTACK:
        v = getattr(args, key, None)
        if v is not None:
            d["attack"][key] = v
    if args.models:
        d["models"] = [m.to_dict() for m in parse_models(args.models)]
    for key in ("K", "kind"):
        v = getattr(args, key, None)
        if v is not None:
            d["robust"][key] = v
    if getattr(args, "optimizer", None) and getattr(args, "alpha", None) is None \
            and args.optimizer != cfg.attack.optimizer:
        d["attack"]["alpha"] = None
    return ExperimentConfig.from_dict(d)


def run_command(cfg: ExperimentConfig, args) -> None:
    exp = Experiment(cfg)
    exp.write_config()
    cmd = args.command
    if cmd == "gen-corpus":
        exp.gen_corpus()
    elif cmd == "enroll":
        exp.enroll()
    elif cmd == "tune-threshold":
        exp.tune_threshold()
    elif cmd == "attack":
        exp.attack()
    elif cmd == "robust-attack":
        exp.robust_attack()
    elif cmd == "ota-eval":
        exp.ota_eval()
    elif cmd == "transfer-matrix":
        if len(cfg.models) < 2:
            raise StageError("transfer-matrix", ValueError("need at least two --models"))
        exp.transfer()
    elif cmd == "report":
        exp.report()
    else:
        exp.gen_corpus()
        exp.enroll()
        exp.tune_threshold()
        exp.attack()
        if not args.no_robust:
            exp.robust_attack()
        if not args.no_ota:
            exp.ota_eval()
        if args.transfer and len(cfg.models) > 1:
            exp.transfer()
        exp.report()
    for stage, secs in exp.timings.items():
        print(f"{stage}: {secs:.2f}s", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        run_command(cfg, args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

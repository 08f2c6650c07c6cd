#!/usr/bin/env python3
"""
File: give_cli.py
Purpose: Command-line interface for data generation, training, evaluation, ablation and verification
Version: 1.0.0
Last Updated: 2026-10-16
"""
import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from src import __version__
from src.ag_adapter import INSERTION_MODES, AdapterConfig
from src.checkpoint import load_checkpoint, model_from_checkpoint
from src.config import DATA_DIR, DEFAULT_CONFIG_FILE, DEFAULT_SEED, RUNS_DIR
from src.config_loader import apply_overrides, get_section, load_yaml_config, parse_weights
from src.encoders import ModelConfig
from src.evaluator import (checkpoint_digest, evaluate, improvement, run_ablation, transfer_presence, write_csv,
                           write_json)
from src.exceptions import ConfigurationError, ContractError, GiveError
from src.grad_check import GRAD_TOLERANCE, SUITES, run_suites
from src.logger import setup_logging
from src.objectives import DROP_LOSS_WEIGHTS
from src.synth_moinst import CLASS_NAMES, DatasetConfig, SynthDataset, build_dataset
from src.trainer import TrainConfig, pretrain, train_adapter

CONFIG_ECHO = "config_echo.json"
COMMANDS = ("gen-data", "pretrain", "train-adapter", "eval", "ablate", "grad-check", "inspect-ckpt")

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="give", description="Instruction-conditioned image encoder at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help=f"YAML settings file (default: {DEFAULT_CONFIG_FILE.name})")
    common.add_argument("--seed", type=int, help=f"Master seed (default: {DEFAULT_SEED})")
    common.add_argument("--verbose", action="store_true", help="Enable verbose output")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--steps", type=int, help="Optimizer steps")
    training.add_argument("--batch", type=int, help="Batch size")
    training.add_argument("--lr", type=float, help="Adam learning rate")
    training.add_argument("--tau", type=float, help="Contrastive temperature")

    adapter = argparse.ArgumentParser(add_help=False)
    adapter.add_argument("--weights", type=str, help="Loss weights as OITC,OIIC,OID (e.g. 1,1,1)")
    adapter.add_argument("--fusion", choices=[m for m in INSERTION_MODES if m != "explicit"],
                         help="Adapter insertion mode")
    adapter.add_argument("--no-instruction", action="store_true",
                         help="Condition on captions instead of object prompts")
    adapter.add_argument("--drop-loss", choices=sorted(DROP_LOSS_WEIGHTS), help="Zero one loss weight")
    adapter.add_argument("--holdout", type=int, help="Hold out the last N classes from adapter training")

    p = sub.add_parser("gen-data", parents=[common], help="Generate the synthetic multi-object dataset")
    p.add_argument("--out", type=str, help="Output data directory")
    p.add_argument("--n-train", type=int, help="Training scenes")
    p.add_argument("--n-val", type=int, help="Validation scenes")
    p.add_argument("--n-test", type=int, help="Test scenes")
    p.add_argument("--workers", type=int, help="Render threads")

    p = sub.add_parser("pretrain", parents=[common, training], help="Contrastive pretraining of the dual encoder")
    p.add_argument("--data", type=str, help="Dataset directory")
    p.add_argument("--out", type=str, help="Run directory")

    p = sub.add_parser("train-adapter", parents=[common, training, adapter],
                       help="Train the adapter on a frozen backbone")
    p.add_argument("--data", type=str, help="Dataset directory")
    p.add_argument("--ckpt", type=str, required=True, help="Backbone checkpoint")
    p.add_argument("--out", type=str, help="Run directory")

    p = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    p.add_argument("--data", type=str, help="Dataset directory")
    p.add_argument("--ckpt", type=str, required=True, help="Checkpoint to evaluate")
    p.add_argument("--baseline", type=str, help="Baseline checkpoint for improvement.json")
    p.add_argument("--out", type=str, help="Report directory")
    p.add_argument("--split", choices=["val", "test"], help="Split to evaluate")
    p.add_argument("--f1-mode", choices=["top1", "threshold"], help="Presence F1 decision rule")
    p.add_argument("--threshold", type=float, help="Cosine threshold for --f1-mode threshold")
    p.add_argument("--holdout", type=int, help="Also report presence on the last N classes only")

    p = sub.add_parser("ablate", parents=[common, training, adapter], help="Run the ablation grid")
    p.add_argument("--data", type=str, help="Dataset directory")
    p.add_argument("--ckpt", type=str, required=True, help="Backbone checkpoint")
    p.add_argument("--out", type=str, help="Run directory")
    p.add_argument("--grid", choices=["table4"], default="table4", help="Ablation grid")

    p = sub.add_parser("grad-check", parents=[common], help="Finite-difference gradient suites")
    p.add_argument("--suite", choices=sorted(SUITES) + ["all"], default="all", help="Suite to run")
    p.add_argument("--seeds", type=int, default=20, help="Seeds per suite")
    p.add_argument("--strict", action="store_true",
                   help="Every coordinate at the 1e-12 floor (loss suites only)")
    p.add_argument("--out", type=str, help="Write grad_check.json here")

    p = sub.add_parser("inspect-ckpt", parents=[common], help="Print a checkpoint's tensors and metadata")
    p.add_argument("--ckpt", type=str, required=True, help="Checkpoint file")
    return parser


def _echo(out_dir: Path, command: str, seed: int, settings: Dict[str, Any]) -> Path:
    """Write the resolved settings next to a command's outputs."""
    payload = {"command": command, "seed": seed, "version": __version__, "settings": settings}
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CONFIG_ECHO
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=list) + "\n", encoding="utf-8")
    return path


def _holdout_classes(n: Optional[int]) -> tuple:
    if not n:
        return ()
    if not 0 < n < len(CLASS_NAMES):
        raise ConfigurationError(f"--holdout must be between 1 and {len(CLASS_NAMES) - 1}, got {n}")
    return tuple(CLASS_NAMES[-n:])


def _train_config(stage: str, section: Dict[str, Any], args: argparse.Namespace, seed: int) -> TrainConfig:
    flags: Dict[str, Any] = {"steps": args.steps, "batch_size": args.batch, "lr": args.lr, "tau": args.tau}
    if stage == "adapter":
        weights = parse_weights(args.weights) if args.weights else None
        if args.drop_loss:
            weights = DROP_LOSS_WEIGHTS[args.drop_loss]
        flags.update({"loss_weights": weights, "fusion": args.fusion,
                      "holdout_classes": _holdout_classes(args.holdout) or None})
        if args.no_instruction:
            flags["use_instruction"] = False
    settings = apply_overrides(section, flags)
    if "loss_weights" in settings and isinstance(settings["loss_weights"], str):
        settings["loss_weights"] = parse_weights(settings["loss_weights"])
    settings["stage"] = stage
    settings["seed"] = seed
    try:
        return TrainConfig(**settings)
    except TypeError as e:
        raise ConfigurationError(f"invalid training settings: {e}") from None


def _model_config(config: Dict[str, Any]) -> ModelConfig:
    try:
        return ModelConfig(**get_section(config, "model"))
    except TypeError as e:
        raise ConfigurationError(f"invalid model settings: {e}") from None


def _adapter_config(config: Dict[str, Any]) -> AdapterConfig:
    try:
        return AdapterConfig.from_dict(get_section(config, "adapter"))
    except TypeError as e:
        raise ConfigurationError(f"invalid adapter settings: {e}") from None


def _data_dir(args: argparse.Namespace, config: Dict[str, Any]) -> Path:
    return Path(args.data or get_section(config, "data").get("dir") or DATA_DIR)


def _out_dir(args: argparse.Namespace, default: str) -> Path:
    return Path(args.out) if args.out else RUNS_DIR / default


def cmd_gen_data(args: argparse.Namespace, config: Dict[str, Any], seed: int) -> int:
    section = get_section(config, "data")
    section.pop("dir", None)
    settings = apply_overrides(section, {"n_train": args.n_train, "n_val": args.n_val, "n_test": args.n_test,
                                         "workers": args.workers})
    settings["seed"] = seed
    try:
        data_config = DatasetConfig(**settings)
    except TypeError as e:
        raise ConfigurationError(f"invalid data settings: {e}") from None
    out_dir = Path(args.out) if args.out else DATA_DIR
    summary = build_dataset(out_dir, data_config, show_progress=args.verbose)
    _echo(out_dir, "gen-data", seed, settings)
    logger.info(f"🏁 Dataset written to {summary.out_dir}: {summary.n_scenes} scenes, "
                f"{summary.n_pretrain_records} pretraining and {summary.n_triplet_records} triplet records")
    return 0


def cmd_pretrain(args: argparse.Namespace, config: Dict[str, Any], seed: int) -> int:
    train_config = _train_config("pretrain", get_section(config, "pretrain"), args, seed)
    model_config = _model_config(config)
    dataset = SynthDataset(_data_dir(args, config))
    out_dir = _out_dir(args, "pretrain")
    _echo(out_dir, "pretrain", seed, {"train": train_config.to_dict(), "model": model_config.to_dict(),
                                      "data": str(dataset.data_dir)})
    result = pretrain(train_config, dataset, model_config, out_dir=out_dir, show_progress=args.verbose)
    logger.info(f"📁 Backbone checkpoint: {result.checkpoint_path}")
    return 0


def cmd_train_adapter(args: argparse.Namespace, config: Dict[str, Any], seed: int) -> int:
    train_config = _train_config("adapter", get_section(config, "adapter_train"), args, seed)
    adapter_config = _adapter_config(config)
    dataset = SynthDataset(_data_dir(args, config))
    backbone = load_checkpoint(args.ckpt)
    out_dir = _out_dir(args, "adapter")
    _echo(out_dir, "train-adapter", seed, {"train": train_config.to_dict(), "adapter": adapter_config.to_dict(),
                                           "backbone": str(args.ckpt), "data": str(dataset.data_dir)})
    result = train_adapter(train_config, backbone, dataset, adapter_config, out_dir=out_dir,
                           show_progress=args.verbose)
    logger.info(f"📁 Adapter checkpoint: {result.checkpoint_path}")
    return 0


def _evaluate_checkpoint(path: str, dataset: SynthDataset, settings: Dict[str, Any], seed: int):
    """Evaluate a checkpoint and confirm the file was not touched."""
    before = checkpoint_digest(path)
    model = model_from_checkpoint(load_checkpoint(path))
    report = evaluate(model, dataset, name=Path(path).stem, split=settings["split"], seed=seed,
                      f1_mode=settings["f1_mode"], threshold=settings["threshold"])
    if checkpoint_digest(path) != before:
        raise ContractError(f"checkpoint {path} changed during evaluation")
    return model, report


def cmd_eval(args: argparse.Namespace, config: Dict[str, Any], seed: int) -> int:
    defaults = {"split": "test", "f1_mode": "top1", "threshold": 0.0}
    settings = apply_overrides(apply_overrides(defaults, get_section(config, "evaluation")),
                               {"split": args.split, "f1_mode": args.f1_mode, "threshold": args.threshold})
    dataset = SynthDataset(_data_dir(args, config))
    out_dir = _out_dir(args, "eval")
    _echo(out_dir, "eval", seed, {**settings, "ckpt": str(args.ckpt), "baseline": args.baseline,
                                  "data": str(dataset.data_dir)})

    model, report = _evaluate_checkpoint(args.ckpt, dataset, settings, seed)
    reports = [report]
    if args.holdout:
        report.extra["transfer"] = transfer_presence(model, dataset, _holdout_classes(args.holdout), settings["split"])
    if args.baseline:
        _, base = _evaluate_checkpoint(args.baseline, dataset, settings, seed)
        reports.insert(0, base)
        write_json(improvement(base, report), out_dir / "improvement.json")
    write_csv(reports, out_dir / "metrics.csv")
    write_json(reports if len(reports) > 1 else report, out_dir / "metrics.json")
    logger.info(f"📊 Metrics written to {out_dir}")
    return 0


def cmd_ablate(args: argparse.Namespace, config: Dict[str, Any], seed: int) -> int:
    base_config = _train_config("adapter", get_section(config, "adapter_train"), args, seed)
    adapter_config = _adapter_config(config)
    settings = apply_overrides({"split": "test"}, get_section(config, "evaluation"))
    dataset = SynthDataset(_data_dir(args, config))
    backbone = load_checkpoint(args.ckpt)
    out_dir = _out_dir(args, "ablation")
    _echo(out_dir, "ablate", seed, {"train": base_config.to_dict(), "adapter": adapter_config.to_dict(),
                                    "grid": args.grid, "backbone": str(args.ckpt), "data": str(dataset.data_dir)})
    reports = run_ablation(backbone, dataset, base_config, out_dir, adapter_config, grid=args.grid,
                           split=settings["split"])
    logger.info(f"🏁 Ablation grid {args.grid}: {len(reports)} cells written to {out_dir / 'ablation.csv'}")
    return 0


def cmd_grad_check(args: argparse.Namespace, config: Dict[str, Any], seed: int) -> int:
    results = run_suites([args.suite], seeds=range(seed, seed + args.seeds), strict=args.strict)
    for name, err in results.items():
        status = "ok" if err <= GRAD_TOLERANCE else "FAIL"
        print(f"{name:12s} max_rel_err={err:.3e} {status}")
    if args.out:
        out_dir = Path(args.out)
        _echo(out_dir, "grad-check", seed, {"suite": args.suite, "seeds": args.seeds, "strict": args.strict})
        write_json(results, out_dir / "grad_check.json")
    failed = [name for name, err in results.items() if err > GRAD_TOLERANCE]
    if failed:
        logger.error(f"❌ Gradient suites above {GRAD_TOLERANCE:g}: {failed}")
        return 1
    return 0


def cmd_inspect_ckpt(args: argparse.Namespace, config: Dict[str, Any], seed: int) -> int:
    ckpt = load_checkpoint(args.ckpt)
    n_frozen = sum(int(np.prod(a.shape)) for a in ckpt.backbone().values())
    n_trainable = sum(int(np.prod(a.shape)) for a in ckpt.trainable().values())
    print(f"checkpoint: {args.ckpt}")
    print(f"step: {ckpt.step}")
    print(f"tensors: {len(ckpt.tensors)} (frozen {n_frozen:,} values, trainable {n_trainable:,} values)")
    for name, array in ckpt.tensors.items():
        flag = "frozen" if ckpt.frozen[name] else "train"
        print(f"  {name:48s} {str(tuple(array.shape)):16s} {flag}")
    if ckpt.config.get("adapter"):
        print(f"adapter: {json.dumps(ckpt.config['adapter'], sort_keys=True)}")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-adapter": cmd_train_adapter,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
    "inspect-ckpt": cmd_inspect_ckpt,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the CLI; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    if getattr(args, "weights", None) and getattr(args, "drop_loss", None):
        parser.print_usage(sys.stderr)
        print("give: error: --weights and --drop-loss are mutually exclusive", file=sys.stderr)
        return 2

    try:
        config = load_yaml_config(args.config) if args.config or DEFAULT_CONFIG_FILE.exists() else {}
    except Exception as e:
        print(f"give: failed to load configuration: {e}", file=sys.stderr)
        return 1

    log_level = "DEBUG" if args.verbose else get_section(config, "application").get("log_level", "INFO")
    setup_logging(level=log_level)
    if args.verbose:
        # But suppress noisy third-party library debug messages
        logging.getLogger("PIL").setLevel(logging.WARNING)

    seed = args.seed if args.seed is not None else DEFAULT_SEED
    try:
        return HANDLERS[args.command](args, config, seed)
    except (GiveError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        logger.debug(traceback.format_exc())
        print(f"give {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

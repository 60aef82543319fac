"""Command-line subcommands."""

import argparse
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .augmentation import AugmentationKind, image_to_tensor
from .checkpoint import load_checkpoint
from .config import ExperimentConfig, parse_config
from .datasets import DatasetSplits, download_dataset
from .errors import ConfigError, ResslError
from .evaluation import (ProbeProtocol, build_embedding_bank, export_embeddings, identity_policy, knn_eval,
                         linear_probe, nearest_neighbors)
from .metrics import MetricsLogger
from .trainer import build_pair_from_checkpoint, fit, load_splits, resolve_device

logger = logging.getLogger(__name__)

FILE_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"


def add_run_log(out_dir) -> Path:
    """Mirror all log records into ``<out_dir>/ressl.log``."""
    path = Path(out_dir) / "ressl.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path)
    handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
    logging.getLogger().addHandler(handler)
    return path


def _parse_overrides(pairs: List[str]) -> Dict[str, Any]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError([f"override {pair!r} must look like key=value"])
        # values parse as YAML scalars, as they would in a config file
        overrides[key] = yaml.safe_load(value)
    return overrides


def _load(args, **extra: Any) -> ExperimentConfig:
    overrides = {**_parse_overrides(args.set), **extra}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "deterministic", False):
        overrides["train.deterministic"] = True
    return parse_config(args.config, overrides)


def _split(splits: DatasetSplits, name: str):
    if name == "train":
        return splits.train
    if name == "test":
        return splits.test
    if name == "unlabeled" and splits.unlabeled is not None:
        return splits.unlabeled
    raise ResslError(f"{splits.info.id} has no {name!r} split")


def _record_eval(cfg: ExperimentConfig, checkpoint: Path, record: Dict[str, Any]):
    state_step = load_checkpoint(checkpoint, force=True).get("step")
    with MetricsLogger(Path(cfg.output_dir) / "eval.jsonl") as sink:
        sink.log({"step": state_step, "checkpoint": str(checkpoint), **record})


def cmd_train(args) -> int:
    cfg = _load(args, **({"output_dir": args.out} if args.out else {}))
    add_run_log(cfg.output_dir)
    final = fit(cfg, resume=args.resume, force=args.force)
    print(final)
    return 0


def cmd_linear_probe(args) -> int:
    cfg = _load(args)
    device = resolve_device(cfg.train.device)
    pair = build_pair_from_checkpoint(cfg, args.checkpoint, args.force, device)
    splits = load_splits(cfg)
    top1 = linear_probe(pair.encoder(cfg.eval.encoder), splits, ProbeProtocol.from_config(cfg.eval.probe),
                        device=device, seed=cfg.train.seed)
    _record_eval(cfg, Path(args.checkpoint), {"linear_probe_top1": top1, "encoder": cfg.eval.encoder})
    print(f"{top1:.4f}")
    return 0


def cmd_knn(args) -> int:
    cfg = _load(args)
    device = resolve_device(cfg.train.device)
    pair = build_pair_from_checkpoint(cfg, args.checkpoint, args.force, device)
    splits = load_splits(cfg)
    k = args.k or cfg.eval.knn.k
    temperature = args.temperature or cfg.eval.knn.temperature
    top1 = knn_eval(pair.encoder(cfg.eval.encoder), splits.train, splits.test, splits.info, k, temperature,
                    device=device, batch_size=cfg.eval.probe.batch_size)
    _record_eval(cfg, Path(args.checkpoint), {"knn_top1": top1, "k": k, "encoder": cfg.eval.encoder})
    print(f"{top1:.4f}")
    return 0


def cmd_neighbors(args) -> int:
    cfg = _load(args)
    device = resolve_device(cfg.train.device)
    pair = build_pair_from_checkpoint(cfg, args.checkpoint, args.force, device)
    splits = load_splits(cfg)
    split = _split(splits, args.split)
    bank, _ = build_embedding_bank(pair, split, splits.info, device)
    image, label = split.read(args.index)
    policy = identity_policy(splits.info) if args.identity else None
    found = nearest_neighbors(image_to_tensor(image), bank, args.n, pair, splits.info, aug=args.aug,
                              seed=cfg.train.seed, policy=policy, device=device)
    print(json.dumps({"query": args.index, "label": int(label), "aug": args.aug, "neighbors": found}))
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = _load(args)
    device = resolve_device(cfg.train.device)
    pair = build_pair_from_checkpoint(cfg, args.checkpoint, args.force, device)
    splits = load_splits(cfg)
    out = export_embeddings(pair.encoder(cfg.eval.encoder), _split(splits, args.split), args.out, splits.info,
                            device=device)
    print(out)
    return 0


def cmd_validate_config(args) -> int:
    cfg = _load(args)
    print(cfg.to_yaml(), end="")
    logger.info(f"{args.config} is valid (hash {cfg.config_hash()})")
    return 0


def cmd_download(args) -> int:
    download_dataset(args.dataset, args.root)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ressl", description="Relational self-supervised pretraining")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser, checkpoint: bool = False):
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--force", action="store_true", help="load a checkpoint from a different config")

    p = sub.add_parser("train", help="pretrain a model pair")
    with_config(p)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true", help="resume from a checkpoint with a different config")
    p.add_argument("--out", default=None, help="run output directory")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("linear-probe", help="linear classifier on frozen features")
    with_config(p, checkpoint=True)
    p.set_defaults(handler=cmd_linear_probe)

    p = sub.add_parser("knn", help="weighted kNN accuracy")
    with_config(p, checkpoint=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.set_defaults(handler=cmd_knn)

    p = sub.add_parser("neighbors", help="nearest neighbors of an augmented query image")
    with_config(p, checkpoint=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--aug", choices=[AugmentationKind.WEAK.value, AugmentationKind.CONTRASTIVE.value],
                   default=AugmentationKind.WEAK.value)
    p.add_argument("--split", default="test")
    p.add_argument("--identity", action="store_true", help="query with a plain resize instead of --aug")
    p.set_defaults(handler=cmd_neighbors)

    p = sub.add_parser("export-embeddings", help="write pooled features of a split as CSV")
    with_config(p, checkpoint=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_export_embeddings)

    p = sub.add_parser("validate-config", help="check a config and print it resolved")
    with_config(p)
    p.set_defaults(handler=cmd_validate_config)

    p = sub.add_parser("download", help="fetch a dataset in its published layout")
    p.add_argument("--dataset", required=True, choices=["cifar10", "cifar100", "stl10", "tiny_imagenet"])
    p.add_argument("--root", required=True)
    p.set_defaults(handler=cmd_download)
    return parser


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and dispatch; ResslError becomes exit code 1."""
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ResslError as e:
        logger.error(str(e))
        return 1

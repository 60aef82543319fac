"""Experiment configuration: typed schema, strict YAML loading, defaults, cross-field validation."""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .augmentation import (AugmentationKind, AugmentationPolicy, ColorJitterSpec, CropMode,
                           MultiCropSpec)
from .datasets import DatasetInfo, dataset_info
from .ema import EmaConfig, MomentumSchedule
from .errors import ConfigError, DatasetError
from .loss import TemperaturePair, WarmupSchedule
from .model import BackboneSpec, HeadSpec, adapt_backbone_small_input, default_predictor, default_projector

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OPTIMIZERS = ("sgd_momentum", "lars")

# Fields that change how a run executes but not what it computes.
NON_SEMANTIC_KEYS = {
    ("name",), ("output_dir",), ("data", "root"), ("data", "num_workers"), ("train", "device"),
    ("train", "max_steps"), ("train", "checkpoint_every"), ("train", "deterministic"), ("logging",), ("eval",),
}


@dataclass
class DataConfig:
    dataset: str = "cifar10"
    root: str = "${oc.env:RESSL_DATA_ROOT,./data}"
    num_workers: int = "${oc.env:RESSL_NUM_WORKERS,4}"  # type: ignore[assignment]
    fake_train_size: int = 256
    fake_test_size: int = 64
    fake_image_size: int = 32
    fake_num_classes: int = 10


@dataclass
class PolicyConfig:
    kind: str = "weak"
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    output_size: Optional[int] = None
    flip_prob: float = 0.5
    color_jitter_strength: float = 0.5
    color_jitter_prob: Optional[float] = None
    grayscale_prob: Optional[float] = None
    blur_prob: Optional[float] = None
    solarize_prob: Optional[float] = None


def _student_policy() -> PolicyConfig:
    return PolicyConfig(kind="contrastive", color_jitter_prob=0.8, grayscale_prob=0.2, blur_prob=0.5)


@dataclass
class MultiCropConfig:
    resolutions: List[int] = field(default_factory=lambda: [224, 192, 160, 128, 96])
    scale_min: List[float] = field(default_factory=lambda: [0.14, 0.117, 0.095, 0.073, 0.05])
    scale_max: List[float] = field(default_factory=lambda: [1.0, 0.86, 0.715, 0.571, 0.429])


@dataclass
class AugmentationConfig:
    teacher: PolicyConfig = field(default_factory=PolicyConfig)
    student: PolicyConfig = field(default_factory=_student_policy)
    multi_crop: MultiCropConfig = field(default_factory=MultiCropConfig)


@dataclass
class ModelConfig:
    backbone: str = "resnet18"
    small_input_stem: Optional[bool] = None
    projector_hidden_dim: Optional[int] = None
    projector_out_dim: int = 128
    predictor: bool = True
    predictor_hidden_dim: Optional[int] = None


@dataclass
class LossConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    warmup: bool = False
    warmup_steps: Optional[int] = None


@dataclass
class QueueConfig:
    capacity: Optional[int] = None
    min_fill: Optional[int] = None


@dataclass
class EmaSection:
    m0: float = 0.99
    schedule: str = "constant"
    total_steps: Optional[int] = None


@dataclass
class OptimConfig:
    optimizer: str = "sgd_momentum"
    base_lr: float = 0.06
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 10


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 256
    crop_mode: str = "one_crop"
    seed: int = 0
    deterministic: bool = False
    device: str = "${oc.env:RESSL_DEVICE,auto}"
    checkpoint_every: int = 1000
    max_steps: Optional[int] = None


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 10.0
    weight_decay: float = 0.0
    momentum: float = 0.9
    milestones: List[int] = field(default_factory=lambda: [60, 80])
    gamma: float = 0.1
    batch_size: int = 256
    augment: bool = True


@dataclass
class KnnConfig:
    k: int = 20
    temperature: float = 0.1
    every: int = 0


@dataclass
class EvalConfig:
    encoder: str = "student"
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)


@dataclass
class LoggingConfig:
    log_every: int = 50
    collapse_warn_ratio: float = 0.1


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "ressl"
    output_dir: str = "${oc.env:RESSL_OUTPUT_ROOT,./runs}/${name}"
    data: DataConfig = field(default_factory=DataConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    queue: QueueConfig = field(default_factory=QueueConfig)
    ema: EmaSection = field(default_factory=EmaSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def dataset_info(self) -> DatasetInfo:
        d = self.data
        if d.dataset == "fake":
            return dataset_info("fake", train_size=d.fake_train_size, test_size=d.fake_test_size,
                                image_size=d.fake_image_size, num_classes=d.fake_num_classes)
        return dataset_info(d.dataset)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_yaml(self) -> str:
        return OmegaConf.to_yaml(OmegaConf.structured(self))

    def config_hash(self) -> str:
        """Digest of every setting that affects what training computes."""
        data = self.to_dict()
        for path in NON_SEMANTIC_KEYS:
            node = data
            for key in path[:-1]:
                node = node[key]
            node.pop(path[-1], None)
        blob = json.dumps(data, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    """Runtime view of an ExperimentConfig with every component spec built."""

    dataset: DatasetInfo
    backbone: BackboneSpec
    projector: HeadSpec
    predictor: Optional[HeadSpec]
    temps: TemperaturePair
    queue_capacity: int
    queue_min_fill: int
    ema: EmaConfig
    epochs: int
    batch_size: int
    base_lr: float
    momentum: float
    weight_decay: float
    optimizer: str
    warmup_epochs: int
    crop_mode: CropMode
    warmup_enabled: bool
    warmup_steps: Optional[int]
    teacher_policy: AugmentationPolicy
    student_policy: AugmentationPolicy
    multi_crop: Optional[MultiCropSpec]
    seed: int

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def steps_per_epoch(self, num_images: int) -> int:
        return num_images // self.batch_size

    def warmup_schedule(self, total_steps: int) -> WarmupSchedule:
        return WarmupSchedule(warmup_steps=self.warmup_steps or max(total_steps, 1))

    def ema_config(self, total_steps: int) -> EmaConfig:
        return EmaConfig(m0=self.ema.m0, schedule=self.ema.schedule,
                         total_steps=self.ema.total_steps or max(total_steps, 1))


def _flatten(raw: Dict[str, Any], prefix: Tuple[str, ...] = ()) -> List[Tuple[Tuple[str, ...], Any]]:
    leaves = []
    for key, value in raw.items():
        path = prefix + (str(key),)
        if isinstance(value, dict):
            leaves.extend(_flatten(value, path))
        else:
            leaves.append((path, value))
    return leaves


def _merge_strict(schema: DictConfig, raw: Dict[str, Any]) -> List[str]:
    """Assign every user leaf into the typed schema, collecting all failures."""
    violations = []
    for path, value in _flatten(raw):
        dotted = ".".join(path)
        node = schema
        for key in path[:-1]:
            if not isinstance(node, DictConfig) or key not in node:
                node = None
                break
            node = node[key]
        if not isinstance(node, DictConfig) or path[-1] not in node:
            violations.append(f"{dotted}: unknown key")
            continue
        try:
            node[path[-1]] = value
        except OmegaConfBaseException as e:
            violations.append(f"{dotted}: {str(e).splitlines()[0]}")
    return violations


def _build_policy(section: PolicyConfig, info: DatasetInfo, label: str, violations: List[str]):
    try:
        kind = AugmentationKind(section.kind)
    except ValueError:
        violations.append(f"augmentation.{label}.kind: {section.kind!r} is not one of weak/contrastive/multi_crop")
        return None
    jitter = None
    if section.color_jitter_prob is not None:
        jitter = ColorJitterSpec(strength=section.color_jitter_strength, prob=section.color_jitter_prob)
    try:
        return AugmentationPolicy(
            kind=kind, crop_scale_min=section.crop_scale_min, crop_scale_max=section.crop_scale_max,
            output_size=section.output_size or info.output_size, flip_prob=section.flip_prob,
            color_jitter=jitter, grayscale_prob=section.grayscale_prob, blur_prob=section.blur_prob,
            solarize_prob=section.solarize_prob, mean=tuple(info.mean), std=tuple(info.std),
        )
    except ValueError as e:
        violations.extend(f"augmentation.{label}: {v}" for v in str(e).split("; "))
        return None


def build_train_config(cfg: ExperimentConfig) -> TrainConfig:
    """Resolve defaults and build component specs, raising ConfigError with every violation."""
    violations: List[str] = []
    train_cfg = _resolve(cfg, violations)
    if violations:
        raise ConfigError(violations)
    return train_cfg


def _resolve(cfg: ExperimentConfig, violations: List[str]) -> Optional[TrainConfig]:
    if cfg.schema_version != SCHEMA_VERSION:
        violations.append(f"schema_version: {cfg.schema_version} is not recognized (expected {SCHEMA_VERSION})")
    try:
        info = cfg.dataset_info()
    except DatasetError as e:
        violations.append(f"data.dataset: {e}")
        return None

    t = cfg.train
    if t.epochs <= 0:
        violations.append(f"train.epochs: must be positive, got {t.epochs}")
    if t.batch_size <= 0:
        violations.append(f"train.batch_size: must be positive, got {t.batch_size}")
    if t.checkpoint_every <= 0:
        violations.append(f"train.checkpoint_every: must be positive, got {t.checkpoint_every}")
    if t.max_steps is not None and t.max_steps < 0:
        violations.append(f"train.max_steps: must be non-negative, got {t.max_steps}")
    crop_mode = None
    try:
        crop_mode = CropMode(t.crop_mode)
    except ValueError:
        violations.append(f"train.crop_mode: {t.crop_mode!r} is not one of one_crop/two_crop/multi_crop")

    temps = None
    try:
        temps = TemperaturePair(tau_s=cfg.loss.tau_s, tau_t=cfg.loss.tau_t)
        if not temps.sharpens:
            logger.warning(f"tau_t == tau_s == {temps.tau_s}: teacher distribution is not sharpened")
    except ValueError as e:
        violations.append(f"loss: {e}")
    if cfg.loss.warmup_steps is not None and cfg.loss.warmup_steps < 1:
        violations.append(f"loss.warmup_steps: must be >= 1, got {cfg.loss.warmup_steps}")

    capacity = cfg.queue.capacity or info.queue_capacity
    min_fill = cfg.queue.min_fill if cfg.queue.min_fill is not None else t.batch_size
    if capacity < t.batch_size:
        violations.append(f"queue.capacity: K={capacity} must be >= batch size N={t.batch_size}")
    if min_fill < 0 or min_fill > capacity:
        violations.append(f"queue.min_fill: must be in [0, {capacity}], got {min_fill}")

    ema = None
    try:
        ema = EmaConfig(m0=cfg.ema.m0, schedule=MomentumSchedule(cfg.ema.schedule), total_steps=cfg.ema.total_steps)
        violations.extend(ema.violations())
    except ValueError:
        violations.append(f"ema.schedule: {cfg.ema.schedule!r} is not one of constant/cosine_to_one")

    o = cfg.optim
    if o.optimizer not in OPTIMIZERS:
        violations.append(f"optim.optimizer: {o.optimizer!r} is not one of {'/'.join(OPTIMIZERS)}")
    if o.base_lr <= 0:
        violations.append(f"optim.base_lr: must be positive, got {o.base_lr}")
    if o.weight_decay < 0:
        violations.append(f"optim.weight_decay: must be non-negative, got {o.weight_decay}")
    if o.warmup_epochs < 0 or (t.epochs > 0 and o.warmup_epochs >= t.epochs):
        violations.append(f"optim.warmup_epochs: must be in [0, epochs), got {o.warmup_epochs}")

    p = cfg.eval.probe
    if p.epochs <= 0:
        violations.append(f"eval.probe.epochs: must be positive, got {p.epochs}")
    bad = [m for m in p.milestones if not 0 < m < p.epochs]
    if bad:
        violations.append(f"eval.probe.milestones: {bad} must lie strictly inside (0, {p.epochs})")
    if cfg.eval.encoder not in ("student", "teacher"):
        violations.append(f"eval.encoder: {cfg.eval.encoder!r} is not one of student/teacher")
    if cfg.eval.knn.k < 1 or cfg.eval.knn.temperature <= 0:
        violations.append("eval.knn: k must be >= 1 and temperature > 0")
    if cfg.logging.log_every < 1:
        violations.append(f"logging.log_every: must be >= 1, got {cfg.logging.log_every}")

    teacher = _build_policy(cfg.augmentation.teacher, info, "teacher", violations)
    student = _build_policy(cfg.augmentation.student, info, "student", violations)
    multi_crop = None
    if crop_mode == CropMode.MULTI_CROP:
        mc = cfg.augmentation.multi_crop
        try:
            multi_crop = MultiCropSpec(tuple(mc.resolutions), tuple(mc.scale_min), tuple(mc.scale_max))
        except ValueError as e:
            violations.extend(f"augmentation.multi_crop: {v}" for v in str(e).split("; "))

    backbone = projector = predictor = None
    m = cfg.model
    try:
        backbone = BackboneSpec(family=m.backbone)
        small = m.small_input_stem if m.small_input_stem is not None else info.native_size <= 96
        if small:
            backbone = adapt_backbone_small_input(backbone)
        projector = default_projector(backbone, out_dim=m.projector_out_dim, hidden_dim=m.projector_hidden_dim)
        if m.predictor:
            predictor = default_predictor(projector)
            if m.predictor_hidden_dim:
                predictor = HeadSpec(projector.out_dim, m.predictor_hidden_dim, projector.out_dim)
    except ValueError as e:
        violations.append(f"model: {e}")

    if violations:
        return None
    return TrainConfig(
        dataset=info, backbone=backbone, projector=projector, predictor=predictor, temps=temps,
        queue_capacity=capacity, queue_min_fill=min_fill, ema=ema, epochs=t.epochs, batch_size=t.batch_size,
        base_lr=o.base_lr, momentum=o.momentum, weight_decay=o.weight_decay, optimizer=o.optimizer,
        warmup_epochs=o.warmup_epochs, crop_mode=crop_mode, warmup_enabled=cfg.loss.warmup,
        warmup_steps=cfg.loss.warmup_steps, teacher_policy=teacher, student_policy=student,
        multi_crop=multi_crop, seed=t.seed,
    )


def _fill_defaults(cfg: ExperimentConfig):
    """Write dataset-dependent defaults back so the resolved config has no nulls left to guess."""
    try:
        info = cfg.dataset_info()
    except DatasetError:
        return
    for section in (cfg.augmentation.teacher, cfg.augmentation.student):
        if section.output_size is None:
            section.output_size = info.output_size
    if cfg.queue.capacity is None:
        cfg.queue.capacity = info.queue_capacity
    if cfg.queue.min_fill is None:
        cfg.queue.min_fill = cfg.train.batch_size
    if cfg.model.small_input_stem is None:
        cfg.model.small_input_stem = info.native_size <= 96


def load_config(raw: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None,
                source: Optional[str] = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a plain mapping; ``overrides`` use dotted keys."""
    schema = OmegaConf.structured(ExperimentConfig)
    violations = _merge_strict(schema, raw)
    for dotted, value in (overrides or {}).items():
        violations.extend(_merge_strict(schema, _nest(dotted, value)))
    try:
        cfg: ExperimentConfig = OmegaConf.to_object(schema)
    except OmegaConfBaseException as e:
        raise ConfigError(violations + [str(e).splitlines()[0]], source) from e
    _fill_defaults(cfg)
    _resolve(cfg, violations)
    if violations:
        raise ConfigError(violations, source)
    return cfg


def _nest(dotted: str, value: Any) -> Dict[str, Any]:
    node: Dict[str, Any] = {}
    root = node
    parts = dotted.split(".")
    for key in parts[:-1]:
        node[key] = {}
        node = node[key]
    node[parts[-1]] = value
    return root


def parse_config(path, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Load and fully validate a YAML experiment file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file {path} does not exist"], str(path))
    try:
        loaded = OmegaConf.load(path)
    except yaml.YAMLError as e:
        raise ConfigError([" ".join(str(e).split())], str(path)) from e
    raw = OmegaConf.to_container(loaded, resolve=False) or {}
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping"], str(path))
    cfg = load_config(raw, overrides, str(path))
    logger.info(f"Config {path} validated (hash {cfg.config_hash()})")
    return cfg


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    """Write the fully resolved config next to the run output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "config.resolved.yaml"
    target.write_text(cfg.to_yaml())
    return target

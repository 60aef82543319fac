"""Training loop: augmentation -> model -> loss -> optimizer -> EMA -> queue."""

import logging
import math
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch
from torch.utils.data import DataLoader

from .augmentation import ViewBuilder
from .checkpoint import capture_rng_state, load_checkpoint, restore_rng_state, save_checkpoint
from .config import ExperimentConfig, TrainConfig, build_train_config, write_resolved
from .datasets import DatasetSplits, EpochSampler, PretrainDataset, ingest_dataset
from .ema import ema_update, momentum_schedule
from .errors import ConfigError, TrainingDivergedError
from .loss import total_loss, warmup_weight
from .memory_queue import MemoryQueue
from .metrics import MetricsLogger, StepMetrics, log_metrics
from .model import ModelPair, embedding_std, forward_student, forward_teacher

logger = logging.getLogger(__name__)


class LARS(torch.optim.Optimizer):
    """SGD with momentum and layer-wise trust ratio. Groups with ``lars_exclude`` skip decay and adaptation."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 trust_coefficient: float = 0.001):
        defaults = dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                        trust_coefficient=trust_coefficient, lars_exclude=False)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                d_p = p.grad
                if not group["lars_exclude"]:
                    if group["weight_decay"] != 0:
                        d_p = d_p.add(p, alpha=group["weight_decay"])
                    param_norm = torch.norm(p)
                    update_norm = torch.norm(d_p)
                    one = torch.ones_like(param_norm)
                    trust = torch.where(
                        (param_norm > 0) & (update_norm > 0),
                        group["trust_coefficient"] * param_norm / update_norm, one,
                    )
                    d_p = d_p.mul(trust)
                state = self.state[p]
                if "mu" not in state:
                    state["mu"] = torch.clone(d_p).detach()
                else:
                    state["mu"].mul_(group["momentum"]).add_(d_p)
                p.add_(state["mu"], alpha=-group["lr"])
        return loss


def build_optimizer(pair: ModelPair, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = list(pair.student_parameters())
    if cfg.optimizer == "lars":
        # biases and normalization parameters are exempt from decay and trust scaling
        regular = [p for p in params if p.ndim > 1]
        exempt = [p for p in params if p.ndim <= 1]
        return LARS([{"params": regular}, {"params": exempt, "weight_decay": 0.0, "lars_exclude": True}],
                    lr=cfg.peak_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.peak_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear ramp from 0 over the warm-up epochs, then cosine decay to 0 at the final step."""
    peak = cfg.peak_lr
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return peak * step / warm
    if total <= warm:
        return peak
    progress = min((step - warm) / (total - warm), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def set_deterministic(enabled: bool):
    """Ask torch for reproducible kernels; device nondeterminism outside these switches is not covered."""
    if not enabled:
        torch.backends.cudnn.benchmark = True
        return
    os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


class Trainer:
    """Owns the model pair, optimizer and queue; the single writer of all three."""

    def __init__(self, cfg: TrainConfig, steps_per_epoch: int, device: torch.device = torch.device("cpu"),
                 input_sizes: Sequence[int] = ()):
        if steps_per_epoch < 1:
            raise ConfigError([f"batch size {cfg.batch_size} leaves no full batch per epoch"])
        self.cfg = cfg
        self.device = device
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = cfg.epochs * steps_per_epoch
        self.ema_cfg = cfg.ema_config(self.total_steps)
        self.warmup = cfg.warmup_schedule(self.total_steps)

        torch.manual_seed(cfg.seed)
        self.pair = ModelPair(cfg.backbone, cfg.projector, cfg.predictor, input_sizes).to(device)
        self.optimizer = build_optimizer(self.pair, cfg)
        self.queue = MemoryQueue(cfg.queue_capacity, self.pair.embedding_dim, device=device,
                                 min_fill=cfg.queue_min_fill)
        self.step = 0
        self._cold_start_logged = False

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def alpha(self, step: int) -> float:
        return warmup_weight(step, self.warmup) if self.cfg.warmup_enabled else 1.0

    def train_step(self, batch) -> StepMetrics:
        """One optimizer update, then EMA, then enqueue of the teacher embeddings."""
        teacher_view, student_views = batch[0], batch[1]
        step = self.step
        lr = lr_schedule(step, self.cfg, self.steps_per_epoch)
        m = momentum_schedule(min(step, self.ema_cfg.total_steps), self.ema_cfg)
        alpha = self.alpha(step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        self.pair.train()
        z_t = forward_teacher(teacher_view.to(self.device, non_blocking=True), self.pair)
        bank = self.queue.snapshot()
        if not self.queue.is_warm:
            # cold start: relate against the current teacher batch as well
            bank = torch.cat([bank, z_t.values], dim=0)
            if not self._cold_start_logged:
                logger.warning(f"Queue holds {self.queue.fill} < {self.queue.min_fill} embeddings; "
                               f"including the current teacher batch in the relation bank until it fills")
                self._cold_start_logged = True

        losses: List[torch.Tensor] = []
        parts: Dict[str, float] = {"loss_rel": 0.0, "loss_nce": 0.0}
        for view in student_views:
            z_s = forward_student(view.to(self.device, non_blocking=True), self.pair)
            loss_i, metrics_i = total_loss(z_s, z_t, bank, self.cfg.temps, alpha)
            losses.append(loss_i)
            parts["loss_rel"] += metrics_i["loss_rel"] / len(student_views)
            parts["loss_nce"] += metrics_i["loss_nce"] / len(student_views)
        loss = torch.stack(losses).mean()

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(list(self.pair.student_parameters()), float("inf")).item()
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            logger.error(f"Diverged: step={step} lr={lr:.6g} alpha={alpha:.4f} grad_norm={grad_norm:.6g} "
                         f"loss_rel={parts['loss_rel']} loss_nce={parts['loss_nce']}")
            raise TrainingDivergedError(step, lr, alpha, grad_norm, loss_value)
        self.optimizer.step()
        ema_update(self.pair, m)
        self.queue.enqueue(z_t)
        self.step += 1

        return StepMetrics(
            step=step, epoch=step // self.steps_per_epoch, loss_total=loss_value,
            loss_rel=parts["loss_rel"], loss_nce=parts["loss_nce"], alpha=alpha, lr=lr, m=m,
            queue_fill=self.queue.fill, embedding_std=embedding_std(z_t), grad_norm=grad_norm,
        )

    def state_dict(self, config_hash: str, config: Optional[Dict] = None) -> Dict:
        pair = self.pair
        return {
            "step": self.step,
            "epoch": self.epoch,
            "student": {"backbone": pair.student_backbone.state_dict(),
                        "projector": pair.student_projector.state_dict()},
            "predictor": pair.predictor.state_dict() if pair.predictor is not None else None,
            "teacher": {"backbone": pair.teacher_backbone.state_dict(),
                        "projector": pair.teacher_projector.state_dict()},
            "optimizer": self.optimizer.state_dict(),
            "queue": self.queue.state_dict(),
            "rng": capture_rng_state(),
            "config_hash": config_hash,
            "config": config,
        }

    def load_state_dict(self, state: Dict):
        pair = self.pair
        pair.student_backbone.load_state_dict(state["student"]["backbone"])
        pair.student_projector.load_state_dict(state["student"]["projector"])
        if pair.predictor is not None and state.get("predictor") is not None:
            pair.predictor.load_state_dict(state["predictor"])
        pair.teacher_backbone.load_state_dict(state["teacher"]["backbone"])
        pair.teacher_projector.load_state_dict(state["teacher"]["projector"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.queue.load_state_dict(state["queue"])
        restore_rng_state(state["rng"])
        self.step = int(state["step"])


def build_pair_from_checkpoint(cfg: ExperimentConfig, path, force: bool = False,
                               device: torch.device = torch.device("cpu")) -> ModelPair:
    """Model pair with weights restored from a checkpoint, for evaluation."""
    train_cfg = build_train_config(cfg)
    state = load_checkpoint(path, cfg.config_hash(), force)
    pair = ModelPair(train_cfg.backbone, train_cfg.projector, train_cfg.predictor)
    pair.student_backbone.load_state_dict(state["student"]["backbone"])
    pair.student_projector.load_state_dict(state["student"]["projector"])
    if pair.predictor is not None and state.get("predictor") is not None:
        pair.predictor.load_state_dict(state["predictor"])
    pair.teacher_backbone.load_state_dict(state["teacher"]["backbone"])
    pair.teacher_projector.load_state_dict(state["teacher"]["projector"])
    return pair.to(device).eval()


def load_splits(cfg: ExperimentConfig) -> DatasetSplits:
    """Ingest the configured dataset, verifying cardinalities."""
    d = cfg.data
    if d.dataset == "fake":
        return ingest_dataset("fake", d.root, train_size=d.fake_train_size, test_size=d.fake_test_size,
                              image_size=d.fake_image_size, num_classes=d.fake_num_classes)
    return ingest_dataset(d.dataset, d.root)


def _loader(dataset, sampler, batch_size: int, num_workers: int, device: torch.device) -> DataLoader:
    return DataLoader(dataset, batch_size=batch_size, sampler=sampler, num_workers=num_workers,
                      drop_last=True, pin_memory=device.type == "cuda",
                      prefetch_factor=4 if num_workers > 0 else None)


def fit(cfg: ExperimentConfig, resume=None, force: bool = False,
        splits: Optional[DatasetSplits] = None) -> Path:
    """Pretrain per ``cfg``; returns the final checkpoint path."""
    train_cfg = build_train_config(cfg)
    out = Path(cfg.output_dir)
    write_resolved(cfg, out)
    set_deterministic(cfg.train.deterministic)
    device = resolve_device(cfg.train.device)
    num_workers = 0 if cfg.train.deterministic else cfg.data.num_workers

    if splits is None:
        splits = load_splits(cfg)
    pretrain = splits.pretrain_split()
    builder = ViewBuilder(train_cfg.crop_mode, train_cfg.teacher_policy, train_cfg.student_policy,
                          train_cfg.multi_crop, seed=train_cfg.seed)
    steps_per_epoch = train_cfg.steps_per_epoch(len(pretrain))
    trainer = Trainer(train_cfg, steps_per_epoch, device, builder.input_sizes())
    config_hash = cfg.config_hash()

    if resume is not None:
        trainer.load_state_dict(load_checkpoint(resume, config_hash, force))
        logger.info(f"Resumed from {resume} at step {trainer.step}")

    stop = trainer.total_steps
    if cfg.train.max_steps is not None:
        stop = min(stop, cfg.train.max_steps)
    logger.info(f"Training {cfg.name}: {len(pretrain)} images, {steps_per_epoch} steps/epoch, "
                f"{stop} steps on {device} ({train_cfg.crop_mode.value}, K={train_cfg.queue_capacity})")

    dataset = PretrainDataset(pretrain, builder)
    sampler = EpochSampler(len(pretrain), seed=train_cfg.seed)
    checkpoints = out / "checkpoints"
    healthy_std: Optional[float] = None
    warned_collapse = False

    with MetricsLogger(out / "metrics.jsonl") as sink, MetricsLogger(out / "eval.jsonl") as eval_sink:
        while trainer.step < stop:
            epoch = trainer.epoch
            sampler.set_epoch(epoch, (trainer.step % steps_per_epoch) * train_cfg.batch_size)
            epoch_losses = []
            for batch in _loader(dataset, sampler, train_cfg.batch_size, num_workers, device):
                if trainer.step >= stop:
                    break
                record = trainer.train_step(batch)
                epoch_losses.append(record.loss_total)

                if healthy_std is None:
                    healthy_std = record.embedding_std
                elif (not warned_collapse and healthy_std > 0
                      and record.embedding_std < cfg.logging.collapse_warn_ratio * healthy_std):
                    logger.warning(f"Embedding std {record.embedding_std:.5f} fell below "
                                   f"{cfg.logging.collapse_warn_ratio:.0%} of its initial {healthy_std:.5f}: "
                                   f"representation may be collapsing")
                    warned_collapse = True

                if record.step % cfg.logging.log_every == 0:
                    log_metrics(record, sink)
                    logger.info(record.summary())
                if trainer.step % cfg.train.checkpoint_every == 0:
                    save_checkpoint(trainer.state_dict(config_hash, cfg.to_dict()), checkpoints / "last.pt")

            if trainer.step % steps_per_epoch == 0 and epoch_losses:
                logger.info(f"Epoch {epoch + 1}/{train_cfg.epochs} done: mean loss "
                            f"{sum(epoch_losses) / len(epoch_losses):.4f}, queue {trainer.queue.fill}")
                knn = cfg.eval.knn
                if knn.every and (epoch + 1) % knn.every == 0:
                    from .evaluation import knn_monitor
                    acc = knn_monitor(trainer.pair.encoder(cfg.eval.encoder), splits, knn.k, knn.temperature,
                                      device=device, batch_size=train_cfg.batch_size)
                    eval_sink.log({"step": trainer.step, "epoch": epoch + 1, "knn_top1": acc})
                    logger.info(f"kNN top-1 after epoch {epoch + 1}: {acc:.2%}")

    final = save_checkpoint(trainer.state_dict(config_hash, cfg.to_dict()), checkpoints / "final.pt")
    logger.info(f"Training finished at step {trainer.step}")
    return final

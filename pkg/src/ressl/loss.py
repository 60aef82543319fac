"""Relation distributions, relational consistency, InfoNCE and the warm-up blend."""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Tuple, Union

import torch
import torch.nn.functional as F

from .errors import ShapeError
from .model import EmbeddingBatch, as_tensor

Embeddings = Union[torch.Tensor, EmbeddingBatch]


@dataclass
class RelationDistribution:
    """B x K row-stochastic similarity softmax, with its log kept for stable cross-entropy."""

    probs: torch.Tensor
    log_probs: torch.Tensor
    temperature: float

    @classmethod
    def from_logits(cls, logits: torch.Tensor, temperature: float) -> "RelationDistribution":
        return cls(probs=F.softmax(logits, dim=1), log_probs=F.log_softmax(logits, dim=1), temperature=temperature)

    @classmethod
    def from_probs(cls, probs: torch.Tensor, temperature: float = 0.0) -> "RelationDistribution":
        """Wrap explicit probabilities (e.g. a one-hot target)."""
        return cls(probs=probs, log_probs=torch.log(probs), temperature=temperature)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.probs.shape)


@dataclass(frozen=True)
class TemperaturePair:
    tau_s: float = 0.1
    tau_t: float = 0.04

    def __post_init__(self):
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ValueError(f"temperatures must be positive, got tau_s={self.tau_s}, tau_t={self.tau_t}")
        # tau_t == tau_s is the unsharpened endpoint of the temperature sweep, still accepted.
        if self.tau_t > self.tau_s:
            raise ValueError(
                f"teacher distribution must be sharper than the student's: need tau_t <= tau_s, "
                f"got tau_t={self.tau_t}, tau_s={self.tau_s}"
            )

    @property
    def sharpens(self) -> bool:
        return self.tau_t < self.tau_s


class WarmupMode(str, Enum):
    LINEAR = "linear"


@dataclass(frozen=True)
class WarmupSchedule:
    warmup_steps: int
    mode: WarmupMode = WarmupMode.LINEAR

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")


def _similarity_logits(z: torch.Tensor, bank: torch.Tensor, tau: float) -> torch.Tensor:
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise ValueError("relation bank is empty")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if z.ndim != 2 or z.shape[1] != bank.shape[1]:
        raise ShapeError(f"embeddings {tuple(z.shape)} do not match bank {tuple(bank.shape)}")
    return z @ bank.detach().T / tau


def relation_distribution(z: Embeddings, bank: torch.Tensor, tau: float) -> RelationDistribution:
    """softmax_k(z_i . bank_k / tau), row by row."""
    return RelationDistribution.from_logits(_similarity_logits(as_tensor(z), bank, tau), tau)


def relational_consistency(p_student: RelationDistribution, p_teacher: RelationDistribution) -> torch.Tensor:
    """Cross-entropy -(1/B) sum_i sum_k p2_ik log p1_ik; equals KL(p2 || p1) up to the constant H(p2)."""
    if p_student.shape != p_teacher.shape:
        raise ShapeError(f"relation shapes differ: student {p_student.shape} vs teacher {p_teacher.shape}")
    target = p_teacher.probs.detach()
    # 0 * log p terms are taken as 0 so one-hot targets stay finite
    terms = torch.where(target > 0, target * p_student.log_probs, torch.zeros_like(target))
    return -terms.sum(dim=1).mean()


def relation_entropy(p: RelationDistribution) -> torch.Tensor:
    """Mean row entropy of a relation distribution."""
    terms = torch.where(p.probs > 0, p.probs * p.log_probs, torch.zeros_like(p.probs))
    return -terms.sum(dim=1).mean()


def info_nce(z1: Embeddings, z2: Embeddings, bank: torch.Tensor, tau: float) -> torch.Tensor:
    """Positive (z1_i, z2_i) against the bank as negatives."""
    q = as_tensor(z1)
    k = as_tensor(z2).detach()
    if q.shape != k.shape:
        raise ShapeError(f"positives must be row-aligned, got {tuple(q.shape)} and {tuple(k.shape)}")
    negatives = _similarity_logits(q, bank, tau)
    positives = (q * k).sum(dim=1, keepdim=True) / tau
    logits = torch.cat([positives, negatives], dim=1)
    labels = torch.zeros(logits.shape[0], dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, labels)


def warmup_weight(step: int, sched: WarmupSchedule) -> float:
    """alpha = min(step / warmup_steps, 1)."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    return min(step / sched.warmup_steps, 1.0)


def total_loss(z1: Embeddings, z2: Embeddings, bank: torch.Tensor, temps: TemperaturePair,
               alpha: float) -> Tuple[torch.Tensor, Dict[str, float]]:
    """alpha * L_relation + (1 - alpha) * L_InfoNCE; component values are reported unweighted."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    p_student = relation_distribution(z1, bank, temps.tau_s)
    p_teacher = relation_distribution(as_tensor(z2).detach(), bank, temps.tau_t)
    loss_rel = relational_consistency(p_student, p_teacher)
    loss_nce = info_nce(z1, z2, bank, temps.tau_s)
    loss = alpha * loss_rel + (1.0 - alpha) * loss_nce
    metrics = {"loss_rel": loss_rel.item(), "loss_nce": loss_nce.item(), "alpha": float(alpha)}
    return loss, metrics

"""Frozen-encoder evaluation: linear probe, kNN monitor, neighbor retrieval, embedding export."""

import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from .augmentation import (AugmentationKind, AugmentationPolicy, apply_view, contrastive_policy, eval_view,
                           view_seed, weak_policy)
from .datasets import DatasetInfo, DatasetSplits, EpochSampler, TransformDataset
from .errors import DatasetError, ShapeError
from .model import ModelPair

logger = logging.getLogger(__name__)

Transform = Callable[[torch.Tensor, int, int], torch.Tensor]


@dataclass(frozen=True)
class ProbeProtocol:
    epochs: int = 100
    lr: float = 10.0
    weight_decay: float = 0.0
    momentum: float = 0.9
    milestones: Tuple[int, ...] = (60, 80)
    gamma: float = 0.1
    batch_size: int = 256
    augment: bool = True

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError(f"epochs and batch_size must be positive, got {self.epochs} and {self.batch_size}")
        if any(not 0 < m < self.epochs for m in self.milestones):
            raise ValueError(f"milestones {list(self.milestones)} must lie strictly inside (0, {self.epochs})")

    @classmethod
    def from_config(cls, section) -> "ProbeProtocol":
        return cls(epochs=section.epochs, lr=section.lr, weight_decay=section.weight_decay,
                   momentum=section.momentum, milestones=tuple(section.milestones), gamma=section.gamma,
                   batch_size=section.batch_size, augment=section.augment)


def parameter_hash(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state_dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def eval_transform(info: DatasetInfo) -> Transform:
    def transform(image: torch.Tensor, epoch: int, index: int) -> torch.Tensor:
        return eval_view(image, info.output_size, info.eval_resize, info.mean, info.std)
    return transform


def probe_train_transform(info: DatasetInfo, seed: int = 0) -> Transform:
    """Random resized crop and flip only."""
    policy = weak_policy(info.output_size, mean=info.mean, std=info.std)

    def transform(image: torch.Tensor, epoch: int, index: int) -> torch.Tensor:
        return apply_view(image, policy, view_seed(seed, epoch, index, 0))
    return transform


@torch.no_grad()
def extract_features(encoder: nn.Module, split, transform: Transform, device: Union[str, torch.device] = "cpu",
                     batch_size: int = 256, epoch: int = 0, num_workers: int = 0,
                     progress: bool = False) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(features, labels, sample indices) for every item of ``split`` in index order."""
    sampler = EpochSampler(len(split), seed=0, shuffle=False)
    sampler.set_epoch(epoch)
    loader = DataLoader(TransformDataset(split, transform), batch_size=batch_size, sampler=sampler,
                        num_workers=num_workers)
    was_training = encoder.training
    encoder.eval()
    feats, labels, indices = [], [], []
    try:
        for images, y, idx in tqdm(loader, desc="features", leave=False, disable=not progress):
            feats.append(encoder(images.to(device)).float().cpu())
            labels.append(torch.as_tensor(y))
            indices.append(torch.as_tensor(idx))
    finally:
        encoder.train(was_training)
    return torch.cat(feats), torch.cat(labels).long(), torch.cat(indices).long()


def _check_labels(labels: torch.Tensor, num_classes: int, split_name: str):
    if labels.numel() == 0:
        raise DatasetError(f"{split_name} split is empty")
    lo, hi = int(labels.min()), int(labels.max())
    if lo < 0 or hi >= num_classes:
        raise DatasetError(f"{split_name} labels span [{lo}, {hi}], expected [0, {num_classes - 1}]")


def fit_linear_classifier(encoder: nn.Module, split, info: DatasetInfo, proto: ProbeProtocol,
                          device: Union[str, torch.device] = "cpu", seed: int = 0) -> nn.Linear:
    """Train a linear head on L2-normalized pooled features of the frozen encoder."""
    gen = torch.Generator().manual_seed(seed)
    train_view = probe_train_transform(info, seed) if proto.augment else eval_transform(info)
    feats, labels, _ = extract_features(encoder, split, train_view, device, proto.batch_size)
    _check_labels(labels, info.num_classes, "train")

    torch.manual_seed(seed)
    classifier = nn.Linear(feats.shape[1], info.num_classes).to(device)
    optimizer = torch.optim.SGD(classifier.parameters(), lr=proto.lr, momentum=proto.momentum,
                                weight_decay=proto.weight_decay)
    scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=list(proto.milestones), gamma=proto.gamma)

    for epoch in range(proto.epochs):
        if proto.augment and epoch > 0:
            feats, labels, _ = extract_features(encoder, split, train_view, device, proto.batch_size, epoch=epoch)
        order = torch.randperm(len(labels), generator=gen)
        classifier.train()
        total = 0.0
        for start in range(0, len(order), proto.batch_size):
            batch = order[start:start + proto.batch_size]
            x = F.normalize(feats[batch].to(device), dim=1)
            loss = F.cross_entropy(classifier(x), labels[batch].to(device))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        scheduler.step()
        logger.debug(f"probe epoch {epoch + 1}/{proto.epochs}: loss {total / len(order):.4f}")
    return classifier


@torch.no_grad()
def classifier_accuracy(encoder: nn.Module, classifier: nn.Linear, split, info: DatasetInfo,
                        device: Union[str, torch.device] = "cpu", batch_size: int = 256) -> float:
    feats, labels, _ = extract_features(encoder, split, eval_transform(info), device, batch_size)
    _check_labels(labels, info.num_classes, split.name)
    classifier.eval()
    preds = classifier(F.normalize(feats.to(device), dim=1)).argmax(dim=1).cpu()
    return (preds == labels).float().mean().item()


def linear_probe(encoder: nn.Module, splits: DatasetSplits, proto: ProbeProtocol = ProbeProtocol(),
                 device: Union[str, torch.device] = "cpu", seed: int = 0) -> float:
    """Test top-1 of a linear classifier trained on the labeled train split; the encoder is left untouched."""
    before = parameter_hash(encoder)
    requires_grad = [p.requires_grad for p in encoder.parameters()]
    for p in encoder.parameters():
        p.requires_grad_(False)
    try:
        classifier = fit_linear_classifier(encoder, splits.train, splits.info, proto, device, seed)
        top1 = classifier_accuracy(encoder, classifier, splits.test, splits.info, device, proto.batch_size)
    finally:
        for p, flag in zip(encoder.parameters(), requires_grad):
            p.requires_grad_(flag)
    if parameter_hash(encoder) != before:
        raise RuntimeError("encoder parameters changed during linear probe")
    logger.info(f"Linear probe top-1: {top1:.2%}")
    return top1


def build_feature_bank(encoder: nn.Module, split, info: DatasetInfo, device: Union[str, torch.device] = "cpu",
                       batch_size: int = 256) -> Tuple[torch.Tensor, torch.Tensor]:
    """Unit-norm pooled features of ``split`` under the evaluation view, plus labels."""
    feats, labels, _ = extract_features(encoder, split, eval_transform(info), device, batch_size)
    return F.normalize(feats, dim=1), labels


def knn_predict(features: torch.Tensor, bank: torch.Tensor, bank_labels: torch.Tensor, num_classes: int,
                k: int, temperature: float = 0.1, weighted: bool = True) -> torch.Tensor:
    """Vote among the k most cosine-similar bank rows; weights exp(sim / t), or 1 when not ``weighted``."""
    if not 1 <= k <= bank.shape[0]:
        raise ValueError(f"k={k} must be in [1, bank size {bank.shape[0]}]")
    if features.shape[1] != bank.shape[1]:
        raise ShapeError(f"feature dim {features.shape[1]} != bank dim {bank.shape[1]}")
    sims = features @ bank.T
    top_sims, top_idx = sims.topk(k, dim=1)
    top_labels = bank_labels[top_idx]
    weights = (top_sims / temperature).exp() if weighted else torch.ones_like(top_sims)
    scores = torch.zeros(features.shape[0], num_classes, dtype=weights.dtype, device=weights.device)
    scores.scatter_add_(1, top_labels, weights)
    return scores.argmax(dim=1)


def knn_eval(encoder: nn.Module, train_split, test_split, info: DatasetInfo, k: int = 20,
             temperature: float = 0.1, device: Union[str, torch.device] = "cpu", batch_size: int = 256) -> float:
    """Weighted kNN top-1 on ``test_split`` against a bank built from ``train_split``."""
    bank, bank_labels = build_feature_bank(encoder, train_split, info, device, batch_size)
    if k > bank.shape[0]:
        raise ValueError(f"k={k} exceeds feature bank size {bank.shape[0]}")
    feats, labels = build_feature_bank(encoder, test_split, info, device, batch_size)
    correct = 0
    for start in range(0, len(labels), batch_size):
        preds = knn_predict(feats[start:start + batch_size], bank, bank_labels, info.num_classes, k, temperature)
        correct += (preds == labels[start:start + batch_size]).sum().item()
    return correct / len(labels)


def knn_monitor(encoder: nn.Module, splits: DatasetSplits, k: int, temperature: float,
                device: Union[str, torch.device] = "cpu", batch_size: int = 256) -> float:
    return knn_eval(encoder, splits.train, splits.test, splits.info, k, temperature, device, batch_size)


@torch.no_grad()
def embed_projection(pair: ModelPair, images: torch.Tensor) -> torch.Tensor:
    """Teacher backbone + projector, normalized; the space the relation is computed in."""
    was_training = pair.training
    pair.eval()
    try:
        return F.normalize(pair.teacher_projector(pair.teacher_backbone(images)), dim=1)
    finally:
        pair.train(was_training)


def build_embedding_bank(pair: ModelPair, split, info: DatasetInfo, device: Union[str, torch.device] = "cpu",
                         batch_size: int = 256) -> Tuple[torch.Tensor, torch.Tensor]:
    """Projection-space bank of ``split`` under the evaluation view."""

    class _Projection(nn.Module):
        def forward(self, x):
            return embed_projection(pair, x)

    feats, labels, _ = extract_features(_Projection(), split, eval_transform(info), device, batch_size)
    return feats, labels


def rank_neighbors(query: torch.Tensor, bank: torch.Tensor, n: int) -> torch.Tensor:
    """Indices of the ``n`` bank rows most cosine-similar to ``query``, most similar first."""
    if n < 0 or n > bank.shape[0]:
        raise ValueError(f"n={n} must be in [0, bank size {bank.shape[0]}]")
    if n == 0:
        return torch.empty(0, dtype=torch.long)
    sims = F.normalize(bank, dim=1) @ F.normalize(query.reshape(-1), dim=0)
    return torch.argsort(sims, descending=True, stable=True)[:n]


def nearest_neighbors(image: torch.Tensor, bank: torch.Tensor, n: int, pair: ModelPair, info: DatasetInfo,
                      aug: Union[str, AugmentationKind] = AugmentationKind.WEAK, seed: int = 0,
                      policy: Optional[AugmentationPolicy] = None,
                      device: Union[str, torch.device] = "cpu") -> List[int]:
    """Bank indices nearest to a weakly or contrastively augmented view of ``image``."""
    aug = AugmentationKind(aug)
    if policy is None:
        if aug == AugmentationKind.WEAK:
            policy = weak_policy(info.output_size, mean=info.mean, std=info.std)
        elif aug == AugmentationKind.CONTRASTIVE:
            policy = contrastive_policy(info.output_size, mean=info.mean, std=info.std)
        else:
            raise ValueError(f"aug must be weak or contrastive, got {aug.value!r}")
    view = apply_view(image, policy, seed).unsqueeze(0).to(device)
    query = embed_projection(pair, view)[0].cpu()
    return rank_neighbors(query, bank, n).tolist()


def identity_policy(info: DatasetInfo) -> AugmentationPolicy:
    """Weak policy reduced to a plain resize; the query view matches the bank view."""
    return replace(weak_policy(info.output_size, mean=info.mean, std=info.std),
                   crop_scale_min=1.0, crop_scale_max=1.0, flip_prob=0.0)


def export_embeddings(encoder: nn.Module, split, out_path, info: DatasetInfo,
                      device: Union[str, torch.device] = "cpu", batch_size: int = 256) -> Path:
    """CSV with header ``sample_id,label,f0..f{D-1}``; floats written with 9 significant digits."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        feats, labels, indices = extract_features(encoder, split, eval_transform(info), device, batch_size)
        frame = pd.DataFrame(feats.numpy(), columns=[f"f{i}" for i in range(feats.shape[1])])
        frame.insert(0, "label", labels.numpy())
        frame.insert(0, "sample_id", indices.numpy())
        frame.to_csv(f, index=False, float_format="%.9g")
    logger.info(f"Exported {len(frame)} embeddings of dim {feats.shape[1]} to {out_path}")
    return out_path


def read_embeddings(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(sample ids, labels, float32 features) from an export file."""
    frame = pd.read_csv(path)
    feature_cols: Sequence[str] = [c for c in frame.columns if c.startswith("f")]
    return (frame["sample_id"].to_numpy(), frame["label"].to_numpy(),
            frame[list(feature_cols)].to_numpy(dtype=np.float32))

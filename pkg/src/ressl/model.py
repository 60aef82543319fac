"""Backbones, projector/predictor heads and the student/teacher model pair."""

import copy
import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.models as tv_models

from .errors import ShapeError

logger = logging.getLogger(__name__)

RESIDUAL_FAMILIES: Dict[str, int] = {
    "resnet18": 512,
    "resnet34": 512,
    "resnet50": 2048,
    "resnet101": 2048,
    "resnet152": 2048,
}

# Non-residual plug-ins; no small-input stem exists for these.
PLUGIN_FAMILIES: Dict[str, int] = {
    "efficientnet_b0": 1280,
    "efficientnet_b1": 1280,
    "mobilenet_v3_large": 960,
}

NORM_TOLERANCE = 1e-5


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "resnet18"
    small_input_stem: bool = False
    feature_dim: Optional[int] = None

    def __post_init__(self):
        dims = {**RESIDUAL_FAMILIES, **PLUGIN_FAMILIES}
        if self.family not in dims:
            raise ValueError(f"unknown backbone family {self.family!r}; expected one of {sorted(dims)}")
        if self.feature_dim is None:
            object.__setattr__(self, "feature_dim", dims[self.family])
        elif self.feature_dim != dims[self.family]:
            raise ValueError(f"{self.family} has feature_dim {dims[self.family]}, got {self.feature_dim}")
        if self.small_input_stem and self.family not in RESIDUAL_FAMILIES:
            raise ValueError(f"small_input_stem is only defined for residual families, not {self.family}")

    @property
    def stem_stride(self) -> int:
        """Downsampling applied before the first residual stage."""
        return 1 if self.small_input_stem else 4


@dataclass(frozen=True)
class HeadSpec:
    in_dim: int
    hidden_dim: int
    out_dim: int
    layers: int = 2

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) <= 0:
            raise ValueError(f"head dims must be positive, got {self.in_dim}/{self.hidden_dim}/{self.out_dim}")
        if self.layers != 2:
            raise ValueError(f"heads have exactly 2 layers, got {self.layers}")


@dataclass
class EmbeddingBatch:
    """B x D embeddings; ``normalized`` promises unit L2 rows."""

    values: torch.Tensor
    normalized: bool = True

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"embeddings must be B x D, got {tuple(self.values.shape)}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def check_normalized(self, tol: float = NORM_TOLERANCE) -> bool:
        if self.values.shape[0] == 0:
            return True
        norms = self.values.detach().norm(dim=1)
        return bool(torch.all((norms - 1).abs() <= tol))


def as_tensor(z: Union[torch.Tensor, EmbeddingBatch]) -> torch.Tensor:
    return z.values if isinstance(z, EmbeddingBatch) else z


def adapt_backbone_small_input(spec: BackboneSpec) -> BackboneSpec:
    """3x3 stride-1 stem and no max-pool, for 32-64 px inputs. Idempotent."""
    if spec.family not in RESIDUAL_FAMILIES:
        raise ValueError(f"small-input stem adaptation needs a residual family, got {spec.family!r}")
    return replace(spec, small_input_stem=True)


class Backbone(nn.Module):
    """Torchvision encoder returning globally average-pooled features."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        net = tv_models.__dict__[spec.family](weights=None)
        if spec.family in RESIDUAL_FAMILIES:
            if spec.small_input_stem:
                net.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
                net.maxpool = nn.Identity()
            net.fc = nn.Identity()
        else:
            net.classifier = nn.Identity()
        self.net = net

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        """Activations before global pooling."""
        net = self.net
        if self.spec.family not in RESIDUAL_FAMILIES:
            return net.features(x)
        x = net.maxpool(net.relu(net.bn1(net.conv1(x))))
        return net.layer4(net.layer3(net.layer2(net.layer1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.net.avgpool(self.feature_map(x)), 1)


def build_head(spec: HeadSpec) -> nn.Sequential:
    """Linear -> BN -> ReLU -> Linear; the output layer is bare."""
    return nn.Sequential(
        nn.Linear(spec.in_dim, spec.hidden_dim, bias=False),
        nn.BatchNorm1d(spec.hidden_dim),
        nn.ReLU(inplace=True),
        nn.Linear(spec.hidden_dim, spec.out_dim),
    )


def default_projector(backbone: BackboneSpec, out_dim: int = 128, hidden_dim: Optional[int] = None) -> HeadSpec:
    return HeadSpec(in_dim=backbone.feature_dim, hidden_dim=hidden_dim or backbone.feature_dim, out_dim=out_dim)


def default_predictor(projector: HeadSpec) -> HeadSpec:
    """Same structure as the projector, fed by the projector output."""
    return HeadSpec(in_dim=projector.out_dim, hidden_dim=projector.hidden_dim, out_dim=projector.out_dim)


class ModelPair(nn.Module):
    """Student (backbone, projector, optional predictor) and its EMA teacher (backbone, projector)."""

    def __init__(self, backbone: BackboneSpec, projector: HeadSpec, predictor: Optional[HeadSpec] = None,
                 input_sizes: Sequence[int] = ()):
        super().__init__()
        if projector.in_dim != backbone.feature_dim:
            raise ShapeError(f"projector in_dim {projector.in_dim} != backbone feature_dim {backbone.feature_dim}")
        if predictor is not None and predictor.in_dim != projector.out_dim:
            raise ShapeError(f"predictor in_dim {predictor.in_dim} != projector out_dim {projector.out_dim}")
        self.backbone_spec = backbone
        self.projector_spec = projector
        self.predictor_spec = predictor
        self.input_sizes = tuple(input_sizes)

        self.student_backbone = Backbone(backbone)
        self.student_projector = build_head(projector)
        self.predictor = build_head(predictor) if predictor is not None else None

        self.teacher_backbone = copy.deepcopy(self.student_backbone)
        self.teacher_projector = copy.deepcopy(self.student_projector)
        for p in self.teacher_parameters():
            p.requires_grad_(False)
        # Teacher running statistics move only through ema_update.
        for m in self.teacher_modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.momentum = 0.0

    @property
    def embedding_dim(self) -> int:
        return self.projector_spec.out_dim

    def student_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.student_backbone.parameters()
        yield from self.student_projector.parameters()
        if self.predictor is not None:
            yield from self.predictor.parameters()

    def teacher_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.teacher_backbone.parameters()
        yield from self.teacher_projector.parameters()

    def teacher_modules(self) -> Iterator[nn.Module]:
        yield from self.teacher_backbone.modules()
        yield from self.teacher_projector.modules()

    def coupled_modules(self) -> List[Tuple[nn.Module, nn.Module]]:
        """(student, teacher) module pairs linked by EMA. The predictor has no teacher."""
        return [(self.student_backbone, self.teacher_backbone), (self.student_projector, self.teacher_projector)]

    def encoder(self, which: str = "student") -> Backbone:
        if which == "student":
            return self.student_backbone
        if which == "teacher":
            return self.teacher_backbone
        raise ValueError(f"encoder must be 'student' or 'teacher', got {which!r}")

    def check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected an image batch of shape Bx3xHxW, got {tuple(x.shape)}")
        if self.input_sizes and (x.shape[2] != x.shape[3] or x.shape[2] not in self.input_sizes):
            raise ShapeError(
                f"input size {x.shape[2]}x{x.shape[3]} is not one of the configured sizes {self.input_sizes}"
            )


def student_projection(x: torch.Tensor, pair: ModelPair) -> EmbeddingBatch:
    """Student backbone + projector, without the predictor."""
    pair.check_input(x)
    return EmbeddingBatch(F.normalize(pair.student_projector(pair.student_backbone(x)), dim=1))


def forward_student(x: torch.Tensor, pair: ModelPair) -> EmbeddingBatch:
    """z1 = normalize(q(g(F(x)))); q is skipped when the pair has no predictor."""
    pair.check_input(x)
    h = pair.student_projector(pair.student_backbone(x))
    if pair.predictor is not None:
        h = pair.predictor(h)
    return EmbeddingBatch(F.normalize(h, dim=1))


@torch.no_grad()
def forward_teacher(x: torch.Tensor, pair: ModelPair) -> EmbeddingBatch:
    """z2 = normalize(g_t(F_t(x))), outside the autograd graph."""
    pair.check_input(x)
    return EmbeddingBatch(F.normalize(pair.teacher_projector(pair.teacher_backbone(x)), dim=1))


def embedding_std(z: Union[torch.Tensor, EmbeddingBatch]) -> float:
    """Mean over dimensions of the per-dimension batch std; tends to 0 under collapse."""
    values = as_tensor(z).detach()
    if values.shape[0] < 2:
        return 0.0
    return values.float().std(dim=0).mean().item()

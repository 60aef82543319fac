"""Seeded image augmentation pipelines for teacher (weak), student (contrastive) and multi-crop views.

Each view runs a ``torchvision.transforms`` pipeline under a forked RNG seeded from the
caller's seed, so a view is a pure function of ``(image, policy, seed)`` and can be produced
from any number of data-loader workers without touching the global RNG stream.
"""

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torchvision.transforms as T
import torchvision.transforms.functional as TF

from .errors import ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)

# SimCLR color distortion: jitter amplitudes are these multiples of the strength s.
JITTER_BRIGHTNESS = 0.8
JITTER_CONTRAST = 0.8
JITTER_SATURATION = 0.8
JITTER_HUE = 0.2

BLUR_SIGMA = (0.1, 2.0)
BLUR_KERNEL_FRACTION = 0.1
SOLARIZE_THRESHOLD = 0.5


class AugmentationKind(str, Enum):
    WEAK = "weak"
    CONTRASTIVE = "contrastive"
    MULTI_CROP = "multi_crop"


class CropMode(str, Enum):
    """How many student views each image contributes to a train step."""
    ONE_CROP = "one_crop"
    TWO_CROP = "two_crop"
    MULTI_CROP = "multi_crop"


@dataclass(frozen=True)
class ColorJitterSpec:
    strength: float = 0.5
    prob: float = 0.8


@dataclass(frozen=True)
class AugmentationPolicy:
    """One view's transform set. Absent optional transforms are ``None``."""

    kind: AugmentationKind = AugmentationKind.WEAK
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    output_size: int = 32
    flip_prob: float = 0.5
    color_jitter: Optional[ColorJitterSpec] = None
    grayscale_prob: Optional[float] = None
    blur_prob: Optional[float] = None
    solarize_prob: Optional[float] = None
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        violations = self.violations()
        if violations:
            raise ValueError("; ".join(violations))

    def violations(self) -> List[str]:
        """Every invariant this policy breaks."""
        found = []
        if not 0 < self.crop_scale_min <= self.crop_scale_max <= 1:
            found.append(
                f"crop scale must satisfy 0 < min <= max <= 1, got ({self.crop_scale_min}, {self.crop_scale_max})"
            )
        if self.output_size < 1:
            found.append(f"output_size must be positive, got {self.output_size}")
        probs = {
            "flip_prob": self.flip_prob,
            "color_jitter.prob": self.color_jitter.prob if self.color_jitter else None,
            "grayscale_prob": self.grayscale_prob,
            "blur_prob": self.blur_prob,
            "solarize_prob": self.solarize_prob,
        }
        for name, value in probs.items():
            if value is not None and not 0 <= value <= 1:
                found.append(f"{name} must be in [0, 1], got {value}")
        if self.color_jitter is not None:
            strength = self.color_jitter.strength
            if strength < 0 or JITTER_HUE * strength > 0.5:
                found.append(f"color_jitter.strength must be in [0, {0.5 / JITTER_HUE}], got {strength}")
        if self.kind == AugmentationKind.WEAK:
            extra = [name for name in ("color_jitter", "grayscale_prob", "blur_prob", "solarize_prob")
                     if getattr(self, name) is not None]
            if extra:
                found.append(f"weak policy may only crop and flip, but sets {', '.join(extra)}")
        if len(self.mean) != 3 or len(self.std) != 3:
            found.append("mean and std need exactly 3 channel values")
        elif any(s <= 0 for s in self.std):
            found.append(f"std values must be positive, got {self.std}")
        return found

    def transform_set(self) -> FrozenSet[str]:
        """Names of the transforms this policy can apply."""
        names = {"crop"}
        if self.flip_prob > 0:
            names.add("flip")
        if self.color_jitter is not None:
            names.add("color_jitter")
        for name in ("grayscale", "blur", "solarize"):
            if getattr(self, f"{name}_prob") is not None:
                names.add(name)
        return frozenset(names)


@dataclass(frozen=True)
class MultiCropSpec:
    """Parallel lists describing each multi-crop view."""

    resolutions: Tuple[int, ...] = (224, 192, 160, 128, 96)
    scale_min: Tuple[float, ...] = (0.14, 0.117, 0.095, 0.073, 0.05)
    scale_max: Tuple[float, ...] = (1.0, 0.86, 0.715, 0.571, 0.429)

    def __post_init__(self):
        violations = self.violations()
        if violations:
            raise ValueError("; ".join(violations))

    def violations(self) -> List[str]:
        found = []
        n = len(self.resolutions)
        if n < 2:
            found.append(f"multi-crop needs at least 2 views, got {n}")
        if len(self.scale_min) != n or len(self.scale_max) != n:
            found.append("resolutions, scale_min and scale_max must have equal length")
            return found
        for i, (lo, hi) in enumerate(zip(self.scale_min, self.scale_max)):
            if not 0 < lo <= hi <= 1:
                found.append(f"view {i}: crop scale must satisfy 0 < min <= max <= 1, got ({lo}, {hi})")
        if any(r < 1 for r in self.resolutions):
            found.append(f"resolutions must be positive, got {self.resolutions}")
        return found


def weak_policy(output_size: int, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> AugmentationPolicy:
    """Teacher view: random resized crop (0.2, 1.0) and horizontal flip."""
    return AugmentationPolicy(kind=AugmentationKind.WEAK, crop_scale_min=0.2, crop_scale_max=1.0,
                              output_size=output_size, flip_prob=0.5, mean=tuple(mean), std=tuple(std))


def contrastive_policy(output_size: int, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> AugmentationPolicy:
    """Student view on small and medium datasets."""
    return AugmentationPolicy(
        kind=AugmentationKind.CONTRASTIVE, crop_scale_min=0.2, crop_scale_max=1.0,
        output_size=output_size, flip_prob=0.5, color_jitter=ColorJitterSpec(strength=0.5, prob=0.8),
        grayscale_prob=0.2, blur_prob=0.5, mean=tuple(mean), std=tuple(std),
    )


def imagenet_contrastive_policy(output_size: int = 224) -> AugmentationPolicy:
    """Student view for the large-scale recipe: BYOL-style with blur 0.5, solarize 0.1, crop floor 0.14."""
    return AugmentationPolicy(
        kind=AugmentationKind.CONTRASTIVE, crop_scale_min=0.14, crop_scale_max=1.0,
        output_size=output_size, flip_prob=0.5, color_jitter=ColorJitterSpec(strength=0.5, prob=0.8),
        grayscale_prob=0.2, blur_prob=0.5, solarize_prob=0.1,
    )


def view_seed(global_seed: int, epoch: int, sample_index: int, view_index: int) -> int:
    """Per-view seed, independent across (epoch, sample, view) and stable across processes."""
    payload = f"{global_seed}:{epoch}:{sample_index}:{view_index}".encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def image_to_tensor(array: np.ndarray) -> torch.Tensor:
    """Decode an HxWx3 uint8 array into a 3xHxW float tensor in [0, 1]."""
    if array.ndim != 3 or array.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 RGB array, got shape {array.shape}")
    return torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).float().div_(255.0)


def _check_image(image: torch.Tensor):
    if not isinstance(image, torch.Tensor):
        raise TypeError(f"expected a torch.Tensor image, got {type(image).__name__}")
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected an RGB image of shape 3xHxW, got {tuple(image.shape)}")
    if image.shape[1] < 1 or image.shape[2] < 1:
        raise ShapeError(f"image must be at least 1x1, got {image.shape[1]}x{image.shape[2]}")
    if not image.is_floating_point():
        raise ValueError(f"expected a float image in [0, 1], got dtype {image.dtype}")
    if image.numel() and (image.min() < 0 or image.max() > 1):
        raise ValueError("image values must lie in [0, 1]")


def blur_kernel_size(side: int) -> int:
    """10% of the image side, rounded to an odd size of at least 3."""
    k = int(round(BLUR_KERNEL_FRACTION * side))
    if k % 2 == 0:
        k += 1
    return max(k, 3)


@lru_cache(maxsize=64)
def build_transform(policy: AugmentationPolicy) -> T.Compose:
    """The torchvision pipeline for one policy, up to but excluding normalization."""
    size = (policy.output_size, policy.output_size)
    if policy.crop_scale_min == policy.crop_scale_max == 1.0:
        steps = [T.Resize(size, antialias=True)]
    else:
        steps = [T.RandomResizedCrop(size, scale=(policy.crop_scale_min, policy.crop_scale_max),
                                     ratio=CROP_RATIO, antialias=True)]
    if policy.flip_prob > 0:
        steps.append(T.RandomHorizontalFlip(policy.flip_prob))
    if policy.color_jitter is not None:
        s = policy.color_jitter.strength
        jitter = T.ColorJitter(JITTER_BRIGHTNESS * s, JITTER_CONTRAST * s, JITTER_SATURATION * s, JITTER_HUE * s)
        steps.append(T.RandomApply([jitter], p=policy.color_jitter.prob))
    if policy.grayscale_prob is not None:
        steps.append(T.RandomGrayscale(policy.grayscale_prob))
    if policy.blur_prob is not None:
        k = blur_kernel_size(policy.output_size)
        steps.append(T.RandomApply([T.GaussianBlur(k, sigma=BLUR_SIGMA)], p=policy.blur_prob))
    if policy.solarize_prob is not None:
        steps.append(T.RandomSolarize(SOLARIZE_THRESHOLD, p=policy.solarize_prob))
    return T.Compose(steps)


def apply_view(image: torch.Tensor, policy: AugmentationPolicy, seed: int) -> torch.Tensor:
    """Produce one augmented, normalized view of a 3xHxW float image."""
    _check_image(image)
    transform = build_transform(policy)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        view = transform(image)
    # grayscale output shares memory across channels, so no in-place ops here
    view = view.clamp(0.0, 1.0)
    return TF.normalize(view, list(policy.mean), list(policy.std))


def multi_crop_views(image: torch.Tensor, spec: MultiCropSpec, seed: int,
                     policy: AugmentationPolicy) -> List[torch.Tensor]:
    """One view per multi-crop entry; ``policy`` supplies everything except crop and size."""
    views = []
    for i, (res, lo, hi) in enumerate(zip(spec.resolutions, spec.scale_min, spec.scale_max)):
        crop_policy = replace(policy, kind=AugmentationKind.MULTI_CROP, output_size=res,
                              crop_scale_min=lo, crop_scale_max=hi)
        views.append(apply_view(image, crop_policy, view_seed(seed, 0, 0, i)))
    return views


def eval_view(image: torch.Tensor, output_size: int, resize_size: int,
              mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    """Deterministic evaluation view: resize shorter side, center crop, normalize."""
    _check_image(image)
    view = TF.resize(image, [resize_size], antialias=True)
    view = TF.center_crop(view, [output_size, output_size]).clamp(0.0, 1.0)
    return TF.normalize(view, list(mean), list(std))


@dataclass
class ViewBuilder:
    """Builds the teacher view and the student views for one image."""

    crop_mode: CropMode
    teacher: AugmentationPolicy
    student: AugmentationPolicy
    multi_crop: Optional[MultiCropSpec] = None
    seed: int = 0
    _teacher_policy: AugmentationPolicy = field(init=False, repr=False)

    def __post_init__(self):
        if self.crop_mode == CropMode.MULTI_CROP:
            if self.multi_crop is None:
                raise ValueError("multi_crop mode needs a MultiCropSpec")
            # teacher sees the largest resolution
            self._teacher_policy = replace(self.teacher, output_size=max(self.multi_crop.resolutions))
        else:
            self._teacher_policy = self.teacher

    @property
    def num_student_views(self) -> int:
        if self.crop_mode == CropMode.ONE_CROP:
            return 1
        if self.crop_mode == CropMode.TWO_CROP:
            return 2
        return len(self.multi_crop.resolutions)

    def input_sizes(self) -> Tuple[int, ...]:
        """Every spatial size a model fed by this builder must accept."""
        sizes = {self._teacher_policy.output_size, self.student.output_size}
        if self.multi_crop is not None and self.crop_mode == CropMode.MULTI_CROP:
            sizes = {self._teacher_policy.output_size, *self.multi_crop.resolutions}
        return tuple(sorted(sizes))

    def __call__(self, image: torch.Tensor, epoch: int, index: int) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        teacher_view = apply_view(image, self._teacher_policy, view_seed(self.seed, epoch, index, 0))
        if self.crop_mode == CropMode.MULTI_CROP:
            students = multi_crop_views(image, self.multi_crop, view_seed(self.seed, epoch, index, 1), self.student)
        else:
            students = [
                apply_view(image, self.student, view_seed(self.seed, epoch, index, v + 1))
                for v in range(self.num_student_views)
            ]
        return teacher_view, students

"""Seeded view generation."""

from dataclasses import replace

import numpy as np
import pytest
import torch

from ressl.augmentation import (
    AugmentationKind,
    AugmentationPolicy,
    ColorJitterSpec,
    CropMode,
    MultiCropSpec,
    ViewBuilder,
    apply_view,
    blur_kernel_size,
    build_transform,
    contrastive_policy,
    eval_view,
    image_to_tensor,
    imagenet_contrastive_policy,
    view_seed,
    weak_policy,
)
from ressl.errors import ShapeError


@pytest.fixture
def image():
    gen = torch.Generator().manual_seed(0)
    return torch.rand(3, 40, 48, generator=gen)


class TestPolicies:
    def test_weak_policy_only_crops_and_flips(self):
        assert weak_policy(32).transform_set() == {"crop", "flip"}

    def test_contrastive_policy_is_superset(self):
        assert weak_policy(32).transform_set() < contrastive_policy(32).transform_set()

    def test_weak_policy_with_jitter_rejected(self):
        with pytest.raises(ValueError, match="weak policy"):
            AugmentationPolicy(kind=AugmentationKind.WEAK, color_jitter=ColorJitterSpec())

    def test_bad_crop_scale_rejected(self):
        with pytest.raises(ValueError, match="crop scale"):
            AugmentationPolicy(crop_scale_min=0.8, crop_scale_max=0.5)

    def test_violations_are_collected(self):
        with pytest.raises(ValueError) as excinfo:
            replace(weak_policy(32), flip_prob=2.0, output_size=0)
        assert len(str(excinfo.value).split("; ")) == 2

    def test_multi_crop_lengths_checked(self):
        with pytest.raises(ValueError):
            MultiCropSpec(resolutions=(224, 96), scale_min=(0.14,), scale_max=(1.0, 0.4))


class TestApplyView:
    def test_same_seed_same_view(self, image):
        policy = contrastive_policy(32)
        assert torch.equal(apply_view(image, policy, 7), apply_view(image, policy, 7))

    def test_different_seed_different_view(self, image):
        policy = contrastive_policy(32)
        assert not torch.equal(apply_view(image, policy, 7), apply_view(image, policy, 8))

    def test_output_shape(self, image):
        assert apply_view(image, weak_policy(24), 0).shape == (3, 24, 24)

    def test_resize_only_policy_is_deterministic_in_seed(self, image):
        policy = AugmentationPolicy(crop_scale_min=1.0, crop_scale_max=1.0, flip_prob=0.0, output_size=32)
        assert torch.equal(apply_view(image, policy, 1), apply_view(image, policy, 2))

    def test_grayscale_without_blur(self, image):
        policy = AugmentationPolicy(kind=AugmentationKind.CONTRASTIVE, grayscale_prob=1.0, blur_prob=None,
                                    mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        view = apply_view(image, policy, 0)
        assert view.shape == (3, 32, 32)
        assert torch.equal(view[0], view[1]) and torch.equal(view[1], view[2])

    def test_contrastive_views_over_many_seeds(self, image):
        policy = contrastive_policy(16)
        for seed in range(200):
            assert torch.isfinite(apply_view(image, policy, seed)).all()

    def test_global_rng_untouched(self, image):
        torch.manual_seed(5)
        expected = torch.rand(3)
        torch.manual_seed(5)
        apply_view(image, contrastive_policy(16), 11)
        assert torch.equal(torch.rand(3), expected)

    def test_pipeline_follows_policy(self):
        names = [type(t).__name__ for t in build_transform(imagenet_contrastive_policy(64)).transforms]
        assert names == ["RandomResizedCrop", "RandomHorizontalFlip", "RandomApply", "RandomGrayscale",
                         "RandomApply", "RandomSolarize"]
        resize_only = AugmentationPolicy(crop_scale_min=1.0, crop_scale_max=1.0, flip_prob=0.0)
        assert [type(t).__name__ for t in build_transform(resize_only).transforms] == ["Resize"]

    def test_rejects_bad_images(self):
        with pytest.raises(ShapeError):
            apply_view(torch.rand(1, 16, 16), weak_policy(16), 0)
        with pytest.raises(ShapeError):
            apply_view(torch.rand(3, 0, 16), weak_policy(16), 0)
        with pytest.raises(ValueError):
            apply_view(torch.rand(3, 16, 16) * 2, weak_policy(16), 0)

    def test_one_pixel_image(self):
        view = apply_view(torch.rand(3, 1, 1), weak_policy(8), 0)
        assert view.shape == (3, 8, 8)
        assert torch.isfinite(view).all()

    def test_eval_view_is_center_crop(self):
        img = torch.rand(3, 32, 32)
        view = eval_view(img, 32, 32, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        torch.testing.assert_close(view, img)


class TestSeeds:
    def test_view_seed_stable_and_distinct(self):
        assert view_seed(0, 1, 2, 3) == view_seed(0, 1, 2, 3)
        seeds = {view_seed(0, e, i, v) for e in range(3) for i in range(10) for v in range(3)}
        assert len(seeds) == 90
        assert all(0 <= s < 2 ** 63 for s in seeds)

    def test_blur_kernel_is_odd(self):
        assert blur_kernel_size(32) == 3
        assert blur_kernel_size(224) == 23
        assert all(blur_kernel_size(s) % 2 == 1 for s in range(1, 300))


class TestViewBuilder:
    def test_one_and_two_crop(self, image):
        for mode, n in ((CropMode.ONE_CROP, 1), (CropMode.TWO_CROP, 2)):
            builder = ViewBuilder(mode, weak_policy(16), contrastive_policy(16), seed=3)
            teacher, students = builder(image, epoch=0, index=5)
            assert teacher.shape == (3, 16, 16)
            assert len(students) == n

    def test_views_depend_on_epoch(self, image):
        builder = ViewBuilder(CropMode.ONE_CROP, weak_policy(16), contrastive_policy(16))
        assert not torch.equal(builder(image, 0, 0)[0], builder(image, 1, 0)[0])

    def test_multi_crop_sizes(self, image):
        spec = MultiCropSpec(resolutions=(32, 24, 16), scale_min=(0.14, 0.1, 0.05), scale_max=(1.0, 0.8, 0.4))
        builder = ViewBuilder(CropMode.MULTI_CROP, weak_policy(16), contrastive_policy(16), spec)
        teacher, students = builder(image, 0, 0)
        assert teacher.shape[-1] == 32
        assert [s.shape[-1] for s in students] == [32, 24, 16]
        assert builder.input_sizes() == (16, 24, 32)

    def test_multi_crop_needs_spec(self):
        with pytest.raises(ValueError):
            ViewBuilder(CropMode.MULTI_CROP, weak_policy(16), contrastive_policy(16))


class TestImageToTensor:
    def test_scales_to_unit_range(self):
        array = np.full((4, 5, 3), 255, dtype=np.uint8)
        tensor = image_to_tensor(array)
        assert tensor.shape == (3, 4, 5)
        assert torch.all(tensor == 1.0)

    def test_rejects_grayscale(self):
        with pytest.raises(ShapeError):
            image_to_tensor(np.zeros((4, 4), dtype=np.uint8))

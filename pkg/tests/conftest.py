"""Shared fixtures: tiny configs, generated datasets, small model pairs."""

import numpy as np
import pytest
import torch

from ressl.config import load_config
from ressl.datasets import ArraySplit, DatasetSplits, fake_info
from ressl.model import BackboneSpec, HeadSpec, ModelPair


def tiny_raw(out_dir, **sections):
    """Mapping for a seconds-long CPU run on 16px generated images."""
    raw = {
        "name": "tiny",
        "output_dir": str(out_dir),
        "data": {"dataset": "fake", "num_workers": 0, "fake_train_size": 32, "fake_test_size": 16,
                 "fake_image_size": 16, "fake_num_classes": 4},
        "model": {"backbone": "resnet18", "projector_hidden_dim": 32, "projector_out_dim": 16},
        "queue": {"capacity": 32, "min_fill": 8},
        "optim": {"warmup_epochs": 1},
        "train": {"epochs": 3, "batch_size": 8, "device": "cpu", "deterministic": True, "checkpoint_every": 2},
        "eval": {"probe": {"epochs": 3, "milestones": [1, 2], "batch_size": 8}, "knn": {"k": 3}},
        "logging": {"log_every": 1},
    }
    for section, values in sections.items():
        if isinstance(values, dict):
            raw.setdefault(section, {}).update(values)
        else:
            raw[section] = values
    return raw


@pytest.fixture
def tiny_cfg(tmp_path):
    return load_config(tiny_raw(tmp_path / "run"))


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def toy_splits(rng):
    """Four colour classes of 16px images; trivially separable by mean colour."""
    info = fake_info(train_size=32, test_size=16, image_size=16, num_classes=4)
    palette = np.array([[230, 30, 30], [30, 230, 30], [30, 30, 230], [230, 230, 30]], dtype=np.float64)

    def make(n):
        labels = np.arange(n) % 4
        noise = rng.normal(0, 10, size=(n, 16, 16, 3))
        images = np.clip(palette[labels][:, None, None, :] + noise, 0, 255).astype(np.uint8)
        return images, labels

    train_images, train_labels = make(32)
    test_images, test_labels = make(16)
    return DatasetSplits(info, ArraySplit("train", train_images, train_labels),
                         ArraySplit("test", test_images, test_labels))


@pytest.fixture
def small_pair():
    torch.manual_seed(0)
    backbone = BackboneSpec("resnet18", small_input_stem=True)
    projector = HeadSpec(backbone.feature_dim, 32, 16)
    predictor = HeadSpec(16, 32, 16)
    return ModelPair(backbone, projector, predictor)

"""Dataset registry, ingestion of the published layouts, and torch datasets feeding the trainer."""

import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
import requests
import torch
import torchvision.datasets as tv_datasets
from PIL import Image
from torch.utils.data import Dataset, Sampler

from .augmentation import ViewBuilder, image_to_tensor, view_seed
from .errors import DatasetError

logger = logging.getLogger(__name__)

TINY_IMAGENET_URL = "http://cs231n.stanford.edu/tiny-imagenet-200.zip"


@dataclass(frozen=True)
class DatasetInfo:
    id: str
    num_classes: int
    native_size: int
    output_size: int
    eval_resize: int
    train_size: int
    test_size: int
    unlabeled_size: int
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]
    queue_capacity: int


REGISTRY: Dict[str, DatasetInfo] = {
    "cifar10": DatasetInfo("cifar10", 10, 32, 32, 32, 50000, 10000, 0,
                           (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616), 4096),
    "cifar100": DatasetInfo("cifar100", 100, 32, 32, 32, 50000, 10000, 0,
                            (0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762), 4096),
    "stl10": DatasetInfo("stl10", 10, 96, 64, 64, 5000, 8000, 100000,
                         (0.4467, 0.4398, 0.4066), (0.2603, 0.2566, 0.2713), 16384),
    "tiny_imagenet": DatasetInfo("tiny_imagenet", 200, 64, 64, 64, 100000, 10000, 0,
                                 (0.4802, 0.4481, 0.3975), (0.2302, 0.2265, 0.2262), 16384),
    "imagenet": DatasetInfo("imagenet", 1000, 224, 224, 256, 1281167, 50000, 0,
                            (0.485, 0.456, 0.406), (0.229, 0.224, 0.225), 65536),
}


def fake_info(train_size: int = 256, test_size: int = 64, image_size: int = 32, num_classes: int = 10) -> DatasetInfo:
    """Registry entry for torchvision's FakeData, sized by the caller."""
    return DatasetInfo("fake", num_classes, image_size, image_size, image_size, train_size, test_size, 0,
                       (0.5, 0.5, 0.5), (0.25, 0.25, 0.25), 256)


def dataset_info(dataset_id: str, **fake_kwargs) -> DatasetInfo:
    if dataset_id == "fake":
        return fake_info(**fake_kwargs)
    if dataset_id not in REGISTRY:
        raise DatasetError(f"unknown dataset {dataset_id!r}; expected one of {sorted(REGISTRY) + ['fake']}")
    return REGISTRY[dataset_id]


class ArraySplit:
    """Split held as an N x H x W x 3 uint8 array. Label -1 marks unlabeled images."""

    def __init__(self, name: str, images: np.ndarray, labels: np.ndarray):
        if images.ndim != 4 or images.shape[3] != 3:
            raise DatasetError(f"{name}: expected N x H x W x 3 images, got shape {images.shape}")
        self.name = name
        self.images = images
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.images)

    def read(self, index: int) -> Tuple[np.ndarray, int]:
        return self.images[index], int(self.labels[index])


class ImageFileSplit:
    """Split backed by image files decoded on demand."""

    def __init__(self, name: str, paths: List[Path], labels: List[int]):
        self.name = name
        self.paths = list(paths)
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.paths)

    def read(self, index: int) -> Tuple[np.ndarray, int]:
        with Image.open(self.paths[index]) as img:
            return np.asarray(img.convert("RGB")), int(self.labels[index])


class ConcatSplit:
    def __init__(self, name: str, parts: List):
        self.name = name
        self.parts = parts
        self._offsets = np.cumsum([0] + [len(p) for p in parts])

    def __len__(self) -> int:
        return int(self._offsets[-1])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([p.labels for p in self.parts])

    def read(self, index: int) -> Tuple[np.ndarray, int]:
        part = int(np.searchsorted(self._offsets, index, side="right")) - 1
        return self.parts[part].read(index - int(self._offsets[part]))


@dataclass
class DatasetSplits:
    info: DatasetInfo
    train: object
    test: object
    unlabeled: Optional[object] = None

    def pretrain_split(self):
        """Images used for self-supervised pretraining (labeled + unlabeled when present)."""
        if self.unlabeled is None:
            return self.train
        return ConcatSplit("pretrain", [self.train, self.unlabeled])


def check_cardinality(info: DatasetInfo, found: Dict[str, int]):
    """Raise listing every split whose size differs from the published one."""
    expected = {"train": info.train_size, "test": info.test_size}
    if info.unlabeled_size:
        expected["unlabeled"] = info.unlabeled_size
    mismatches = [f"{split}: expected {n}, found {found.get(split, 0)}"
                  for split, n in expected.items() if found.get(split, 0) != n]
    if mismatches:
        raise DatasetError(f"{info.id} cardinality mismatch: " + "; ".join(mismatches))


def _torchvision(factory: Callable, dataset_id: str, **kwargs):
    try:
        return factory(**kwargs)
    except RuntimeError as e:
        raise DatasetError(f"{dataset_id}: {e}") from e


def _load_cifar(info: DatasetInfo, root: Path) -> DatasetSplits:
    factory = tv_datasets.CIFAR10 if info.id == "cifar10" else tv_datasets.CIFAR100
    train = _torchvision(factory, info.id, root=str(root), train=True, download=False)
    test = _torchvision(factory, info.id, root=str(root), train=False, download=False)
    return DatasetSplits(info, ArraySplit("train", train.data, np.array(train.targets)),
                         ArraySplit("test", test.data, np.array(test.targets)))


def _load_stl10(info: DatasetInfo, root: Path) -> DatasetSplits:
    splits = {}
    for split in ("train", "unlabeled", "test"):
        ds = _torchvision(tv_datasets.STL10, info.id, root=str(root), split=split, download=False)
        splits[split] = ArraySplit(split, ds.data.transpose(0, 2, 3, 1), ds.labels)
    return DatasetSplits(info, splits["train"], splits["test"], splits["unlabeled"])


def _load_tiny_imagenet(info: DatasetInfo, root: Path) -> DatasetSplits:
    base = root / "tiny-imagenet-200"
    wnids_file = base / "wnids.txt"
    if not wnids_file.exists():
        raise DatasetError(f"tiny_imagenet: {wnids_file} not found")
    wnids = sorted(wnids_file.read_text().split())
    index = {w: i for i, w in enumerate(wnids)}

    train_paths, train_labels = [], []
    for wnid in wnids:
        for path in sorted((base / "train" / wnid / "images").glob("*.JPEG")):
            train_paths.append(path)
            train_labels.append(index[wnid])

    annotations = base / "val" / "val_annotations.txt"
    if not annotations.exists():
        raise DatasetError(f"tiny_imagenet: {annotations} not found")
    val_paths, val_labels = [], []
    for line in annotations.read_text().splitlines():
        parts = line.split("\t")
        if len(parts) >= 2:
            val_paths.append(base / "val" / "images" / parts[0])
            val_labels.append(index[parts[1]])
    return DatasetSplits(info, ImageFileSplit("train", train_paths, train_labels),
                         ImageFileSplit("test", val_paths, val_labels))


def _load_imagenet(info: DatasetInfo, root: Path) -> DatasetSplits:
    splits = {}
    for split, folder in (("train", "train"), ("test", "val")):
        path = root / "imagenet" / folder
        if not path.is_dir():
            raise DatasetError(f"imagenet: {path} not found")
        folder_ds = tv_datasets.ImageFolder(str(path))
        splits[split] = ImageFileSplit(split, [Path(p) for p, _ in folder_ds.samples],
                                       [label for _, label in folder_ds.samples])
    return DatasetSplits(info, splits["train"], splits["test"])


def _load_fake(info: DatasetInfo) -> DatasetSplits:
    def materialize(size: int, offset: int) -> ArraySplit:
        ds = tv_datasets.FakeData(size=size, image_size=(3, info.native_size, info.native_size),
                                  num_classes=info.num_classes, random_offset=offset)
        images, labels = zip(*((np.asarray(img.convert("RGB")), int(label)) for img, label in ds))
        return ArraySplit("fake", np.stack(images), np.array(labels))

    return DatasetSplits(info, materialize(info.train_size, 0), materialize(info.test_size, info.train_size))


def ingest_dataset(dataset_id: str, root, **fake_kwargs) -> DatasetSplits:
    """Index the dataset under ``root`` and verify split cardinalities before any training."""
    info = dataset_info(dataset_id, **fake_kwargs)
    if dataset_id == "fake":
        splits = _load_fake(info)
    else:
        root = Path(root)
        if not root.is_dir():
            raise DatasetError(f"{dataset_id}: dataset root {root} does not exist")
        loaders = {"cifar10": _load_cifar, "cifar100": _load_cifar, "stl10": _load_stl10,
                   "tiny_imagenet": _load_tiny_imagenet, "imagenet": _load_imagenet}
        splits = loaders[dataset_id](info, root)

    found = {"train": len(splits.train), "test": len(splits.test)}
    if splits.unlabeled is not None:
        found["unlabeled"] = len(splits.unlabeled)
    check_cardinality(info, found)
    logger.info(f"Loaded {dataset_id}: " + ", ".join(f"{k} {v}" for k, v in found.items()))
    return splits


def download_dataset(dataset_id: str, root):
    """Fetch a dataset into ``root`` in its published layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if dataset_id in ("cifar10", "cifar100"):
        factory = tv_datasets.CIFAR10 if dataset_id == "cifar10" else tv_datasets.CIFAR100
        for train in (True, False):
            factory(root=str(root), train=train, download=True)
    elif dataset_id == "stl10":
        tv_datasets.STL10(root=str(root), split="train", download=True)
    elif dataset_id == "tiny_imagenet":
        archive = root / "tiny-imagenet-200.zip"
        if not archive.exists():
            logger.info(f"Downloading {TINY_IMAGENET_URL}")
            with requests.get(TINY_IMAGENET_URL, stream=True, timeout=60) as response:
                response.raise_for_status()
                partial = archive.with_suffix(".part")
                with open(partial, "wb") as f:
                    for chunk in response.iter_content(chunk_size=1 << 20):
                        f.write(chunk)
                partial.rename(archive)
        with zipfile.ZipFile(archive) as zf:
            zf.extractall(root)
    else:
        raise DatasetError(f"{dataset_id} cannot be downloaded automatically")
    logger.info(f"{dataset_id} ready under {root}")


class EpochSampler(Sampler):
    """Seeded per-epoch permutation yielding (epoch, index) pairs, resumable mid-epoch."""

    def __init__(self, size: int, seed: int, shuffle: bool = True):
        self.size = size
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0
        self.start = 0

    def set_epoch(self, epoch: int, start: int = 0):
        self.epoch = epoch
        self.start = start

    def order(self, epoch: int) -> torch.Tensor:
        if not self.shuffle:
            return torch.arange(self.size)
        gen = torch.Generator().manual_seed(view_seed(self.seed, epoch, -1, -1))
        return torch.randperm(self.size, generator=gen)

    def __iter__(self) -> Iterator[Tuple[int, int]]:
        for idx in self.order(self.epoch)[self.start:].tolist():
            yield self.epoch, idx

    def __len__(self) -> int:
        return max(self.size - self.start, 0)


class PretrainDataset(Dataset):
    """Teacher view + student views for the sampled (epoch, index)."""

    def __init__(self, split, builder: ViewBuilder):
        self.split = split
        self.builder = builder

    def __len__(self) -> int:
        return len(self.split)

    def __getitem__(self, key: Tuple[int, int]):
        epoch, index = key
        image, _ = self.split.read(index)
        teacher_view, student_views = self.builder(image_to_tensor(image), epoch, index)
        return teacher_view, student_views, index


class TransformDataset(Dataset):
    """Applies ``transform(image_tensor, epoch, index)`` and returns (view, label, index)."""

    def __init__(self, split, transform: Callable[[torch.Tensor, int, int], torch.Tensor]):
        self.split = split
        self.transform = transform

    def __len__(self) -> int:
        return len(self.split)

    def __getitem__(self, key):
        epoch, index = key if isinstance(key, tuple) else (0, key)
        image, label = self.split.read(index)
        return self.transform(image_to_tensor(image), epoch, index), label, index

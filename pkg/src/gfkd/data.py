"""Procedural multi-class segmentation data.

Classes: 0 background, 1 disk, 2 rectangle, 3 thin annulus. Each sample
draws from its own RNG stream seeded by (dataset seed, sample id), so any
sample can be regenerated in isolation.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from gfkd.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

AUGMENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) in [0, 1]
    label: np.ndarray  # (H, W) int64
    id: int


@dataclass
class DatasetSpec:
    seed: int = 0
    n_train: int = 512
    n_val: int = 128
    image_size: int = 32
    num_classes: int = 4
    noise_sigma: float = 0.1
    labeled_fraction: float = 1.0

    def validate(self) -> None:
        if self.n_train < 0 or self.n_val < 0:
            raise ValueError("split sizes must be non-negative")
        if self.image_size % 4 or self.image_size < 8:
            raise ValueError(f"image_size must be a multiple of 4 and >= 8, got {self.image_size}")
        if self.num_classes != 4:
            raise ValueError("the procedural generator draws exactly 4 classes")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must lie in [0, 1], got {self.labeled_fraction}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class Dataset:
    spec: DatasetSpec
    train: List[Sample]
    val: List[Sample]
    labeled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def labeled_train(self) -> List[Sample]:
        return [s for s, f in zip(self.train, self.labeled) if f]


def _disk(yy, xx, size, rng):
    r = rng.uniform(0.12, 0.22) * size
    cy, cx = rng.uniform(r, size - r, size=2)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rectangle(yy, xx, size, rng):
    h, w = rng.uniform(0.2, 0.4, size=2) * size
    y0 = rng.uniform(0, size - h)
    x0 = rng.uniform(0, size - w)
    return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)


def _annulus(yy, xx, size, rng):
    r = rng.uniform(0.18, 0.3) * size
    thick = rng.uniform(1.2, 2.0)
    cy, cx = rng.uniform(r, size - r, size=2)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return (d <= r) & (d > r - thick)


_SHAPES = {1: _disk, 2: _rectangle, 3: _annulus}
_INTENSITY = {1: (0.55, 0.8), 2: (0.4, 0.65), 3: (0.7, 0.95)}


def make_sample(spec: DatasetSpec, sample_id: int) -> Sample:
    rng = np.random.default_rng([spec.seed, sample_id])
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    image = np.full((n, n), rng.uniform(0.05, 0.3))
    label = np.zeros((n, n), dtype=np.int64)
    for cls in rng.permutation([1, 2, 3]):
        region = _SHAPES[int(cls)](yy, xx, n, rng)
        image[region] = rng.uniform(*_INTENSITY[int(cls)])
        label[region] = cls
    image = np.clip(image + rng.normal(0.0, spec.noise_sigma, size=(n, n)), 0.0, 1.0)
    return Sample(image=image[None], label=label, id=sample_id)


def generate_dataset(spec: DatasetSpec) -> Tuple[List[Sample], List[Sample]]:
    spec.validate()
    train = [make_sample(spec, i) for i in range(spec.n_train)]
    val = [make_sample(spec, spec.n_train + i) for i in range(spec.n_val)]
    return train, val


def partition_labels(train: Sequence[Sample], labeled_fraction: float, seed: int) -> np.ndarray:
    """Flags exactly floor(fraction * n) samples as labeled via a seeded shuffle."""
    n = len(train)
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must lie in [0, 1], got {labeled_fraction}")
    k = int(np.floor(labeled_fraction * n + 1e-9))
    order = np.random.default_rng([seed, 0x1ABE1]).permutation(n)
    flags = np.zeros(n, dtype=bool)
    flags[order[:k]] = True
    return flags


def build_dataset(spec: DatasetSpec) -> Dataset:
    train, val = generate_dataset(spec)
    return Dataset(spec, train, val, partition_labels(train, spec.labeled_fraction, spec.seed))


def apply_augmentation(arr: np.ndarray, code: int) -> np.ndarray:
    """Apply dihedral transform ``code`` (index into AUGMENTATIONS) to the last two axes."""
    if code == 0:
        return arr
    if code == 1:
        return arr[..., :, ::-1].copy()
    if code == 2:
        return arr[..., ::-1, :].copy()
    return np.rot90(arr, k=code - 2, axes=(-2, -1)).copy()


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    code = int(rng.integers(len(AUGMENTATIONS)))
    return augment_with(sample, code)


def augment_with(sample: Sample, code: int) -> Sample:
    return Sample(apply_augmentation(sample.image, code), apply_augmentation(sample.label, code), sample.id)


def stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise ValueError("empty sample list")
    return np.stack([s.image for s in samples]), np.stack([s.label for s in samples])


def spec_dict(spec: DatasetSpec) -> dict:
    return asdict(spec)


def dump_dataset(dataset: Dataset, directory: str) -> dict:
    """Write train.gfkd / val.gfkd (checkpoint framing) and manifest.json."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"spec": spec_dict(dataset.spec), "files": {}}
    for split, samples in (("train", dataset.train), ("val", dataset.val)):
        entries = {"ids": np.array([s.id for s in samples], dtype=np.float64)}
        if samples:
            images, labels = stack(samples)
            entries["images"], entries["labels"] = images, labels.astype(np.float64)
        if split == "train":
            entries["labeled"] = np.asarray(dataset.labeled, dtype=np.float64)
        path = os.path.join(directory, f"{split}.gfkd")
        save_checkpoint(path, entries)
        with open(path, "rb") as fh:
            manifest["files"][f"{split}.gfkd"] = hashlib.sha256(fh.read()).hexdigest()
    with open(os.path.join(directory, "manifest.json"), "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset_dump(directory: str) -> Dataset:
    """Read a :func:`dump_dataset` directory, verifying the manifest hashes."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    spec = DatasetSpec(**manifest["spec"])
    splits = {}
    for split in ("train", "val"):
        path = os.path.join(directory, f"{split}.gfkd")
        with open(path, "rb") as fh:
            if hashlib.sha256(fh.read()).hexdigest() != manifest["files"][f"{split}.gfkd"]:
                raise CheckpointError(f"{path} does not match the manifest hash")
        entries = load_checkpoint(path)
        ids = entries["ids"].astype(np.int64)
        samples = []
        if len(ids):
            for k, i in enumerate(ids):
                samples.append(Sample(entries["images"][k], entries["labels"][k].astype(np.int64), int(i)))
        splits[split] = (samples, entries)
    labeled = splits["train"][1]["labeled"].astype(bool)
    return Dataset(spec, splits["train"][0], splits["val"][0], labeled)

"""Datasets, training augmentation, and the deterministic eval transform.

Images are float32 RGB tensors in [0, 1], shape (N, 3, H, W). Normalization
is applied by the training/eval code, not stored in the arrays, so the same
dataset can serve teachers and students that share a preprocessing contract.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .errors import ConfigurationError, ShapeError

log = logging.getLogger(__name__)

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
SYNTHETIC_MEAN = (0.5, 0.5, 0.5)
SYNTHETIC_STD = (0.25, 0.25, 0.25)

DATA_ROOT_ENV = "ENSDISTILL_DATA_ROOT"

CROP_SCALE = (0.08, 1.0)
CROP_RATIO = (3.0 / 4.0, 4.0 / 3.0)


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    split: str
    num_classes: int
    resolution: int
    mean: tuple[float, ...]
    std: tuple[float, ...]
    label_arity: str = "single"
    similar_pair: Optional[tuple[int, int]] = None
    dissimilar_pair: Optional[tuple[int, int]] = None

    def __post_init__(self) -> None:
        # the split tag seeds the sample draw, so any label works; it only
        # has to be present so two splits never share a generator stream
        if not self.split:
            raise ConfigurationError("split must be a non-empty tag")
        if self.label_arity not in ("single", "multi"):
            raise ConfigurationError(f"unknown label_arity {self.label_arity!r}")


@dataclass(frozen=True)
class CropParams:
    """Sampled augmentation parameters, kept for crop/label consistency checks."""

    area_fraction: float
    aspect_ratio: float
    flip: bool
    top: int
    left: int
    height: int
    width: int


class ArrayDataset:
    """In-memory dataset: image tensor + labels + its DatasetSpec."""

    def __init__(self, spec: DatasetSpec, images: torch.Tensor, labels: torch.Tensor) -> None:
        if images.dim() != 4 or images.size(1) != 3:
            raise ShapeError(f"images must be (N,3,H,W), got {tuple(images.shape)}")
        if images.size(0) != labels.size(0):
            raise ShapeError("images and labels disagree on N")
        if spec.label_arity == "single":
            if labels.dim() != 1:
                raise ShapeError("single-label datasets need (N,) class indices")
            if labels.numel() and (labels.min() < 0 or labels.max() >= spec.num_classes):
                raise ConfigurationError("label index out of range")
        else:
            if labels.shape != (images.size(0), spec.num_classes):
                raise ShapeError("multi-label datasets need (N, num_classes) binary vectors")
        self.spec = spec
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return self.images.size(0)

    def with_labels(self, labels: torch.Tensor) -> "ArrayDataset":
        """Same images, replaced labels (used by the label-isolation probe)."""
        return ArrayDataset(self.spec, self.images, labels)

    def subset(self, indices: torch.Tensor) -> "ArrayDataset":
        return ArrayDataset(self.spec, self.images[indices], self.labels[indices])


def derived_seed(*parts: object) -> int:
    """Stable 64-bit seed keyed by (seed, epoch, purpose, ...) tags."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derived_generator(*parts: object) -> torch.Generator:
    """Independent RNG stream keyed by the same tag scheme as derived_seed."""
    g = torch.Generator()
    g.manual_seed(derived_seed(*parts))
    return g


def epoch_permutation(n: int, seed: int, epoch: int) -> torch.Tensor:
    """Seed-deterministic iteration order for one training epoch."""
    return torch.randperm(n, generator=derived_generator(seed, epoch, "order"))


def normalize(batch: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    m = torch.tensor(mean, dtype=batch.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=batch.dtype).view(1, -1, 1, 1)
    return (batch - m) / s


def sample_crop_params(
    height: int,
    width: int,
    rng: torch.Generator,
    scale: tuple[float, float] = CROP_SCALE,
    ratio: tuple[float, float] = CROP_RATIO,
) -> tuple[int, int, int, int]:
    """Pick a crop rectangle: area ~ U(scale), log-aspect ~ U(log ratio).

    Falls back to the largest centered in-ratio rectangle after 10 rejected
    attempts, as in the usual random-resized-crop procedure.
    """
    area = float(height * width)
    for _ in range(10):
        target_area = area * (
            scale[0] + (scale[1] - scale[0]) * torch.rand((), generator=rng).item()
        )
        log_r = (
            math.log(ratio[0])
            + (math.log(ratio[1]) - math.log(ratio[0])) * torch.rand((), generator=rng).item()
        )
        ar = math.exp(log_r)
        w = int(round(math.sqrt(target_area * ar)))
        h = int(round(math.sqrt(target_area / ar)))
        if 0 < w <= width and 0 < h <= height:
            top = int(torch.randint(0, height - h + 1, (), generator=rng).item())
            left = int(torch.randint(0, width - w + 1, (), generator=rng).item())
            return top, left, h, w
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w = width
        h = min(height, int(round(w / ratio[0])))
    elif in_ratio > ratio[1]:
        h = height
        w = min(width, int(round(h * ratio[1])))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def augment_train(
    image: torch.Tensor,
    rng: torch.Generator,
    out_resolution: int,
    scale: tuple[float, float] = CROP_SCALE,
) -> tuple[torch.Tensor, CropParams]:
    """Random area-fraction crop resized to the training resolution, then a fair coin flip."""
    if image.dim() != 3 or image.size(0) != 3:
        raise ShapeError(f"expected a (3,H,W) image, got {tuple(image.shape)}")
    h_src, w_src = image.size(1), image.size(2)
    if h_src < 2 or w_src < 2:
        log.warning("degenerate %dx%d source image; using center crop", h_src, w_src)
        out = TF.center_crop(TF.resize(image, out_resolution, antialias=True), out_resolution)
        params = CropParams(1.0, w_src / max(h_src, 1), False, 0, 0, h_src, w_src)
        return out, params
    top, left, h, w = sample_crop_params(h_src, w_src, rng, scale=scale)
    out = TF.resized_crop(
        image, top, left, h, w, [out_resolution, out_resolution], antialias=True
    )
    flip = bool(torch.rand((), generator=rng).item() < 0.5)
    if flip:
        out = TF.hflip(out)
    params = CropParams(
        area_fraction=(h * w) / float(h_src * w_src),
        aspect_ratio=w / h,
        flip=flip,
        top=top,
        left=left,
        height=h,
        width=w,
    )
    return out, params


def augment_batch(
    images: torch.Tensor, rng: torch.Generator, out_resolution: int
) -> tuple[torch.Tensor, list[CropParams]]:
    outs, params = [], []
    for i in range(images.size(0)):
        out, p = augment_train(images[i], rng, out_resolution)
        outs.append(out)
        params.append(p)
    return torch.stack(outs), params


def transform_eval(
    image: torch.Tensor, resolution: int, resize_ratio: float = 1.0
) -> torch.Tensor:
    """Deterministic shorter-side resize followed by a center crop. No randomness."""
    if image.dim() != 3 or image.size(0) != 3:
        raise ShapeError(f"expected a (3,H,W) image, got {tuple(image.shape)}")
    target_short = max(resolution, int(round(resolution * resize_ratio)))
    if min(image.size(1), image.size(2)) != target_short:
        image = TF.resize(image, target_short, antialias=True)
    return TF.center_crop(image, resolution)


def transform_eval_batch(
    images: torch.Tensor, resolution: int, resize_ratio: float = 1.0
) -> torch.Tensor:
    if images.size(2) == resolution and images.size(3) == resolution and resize_ratio == 1.0:
        return images
    return torch.stack(
        [transform_eval(images[i], resolution, resize_ratio) for i in range(images.size(0))]
    )


def _smooth_field(rng: torch.Generator, resolution: int, grid: int = 4) -> torch.Tensor:
    base = torch.randn(1, 3, grid, grid, generator=rng)
    field = F.interpolate(base, size=(resolution, resolution), mode="bilinear", align_corners=False)
    field = field[0]
    return field / field.std().clamp_min(1e-6)


def _class_patterns(
    num_classes: int, seed: int, resolution: int, similar_rho: float
) -> list[torch.Tensor]:
    rng = derived_generator(seed, "patterns")
    patterns = [_smooth_field(rng, resolution) for _ in range(num_classes)]
    if num_classes >= 2:
        # classes 0 and 1 share most of their structure: the designated similar pair
        patterns[1] = similar_rho * patterns[0] + math.sqrt(1 - similar_rho**2) * patterns[1]
    return patterns


def synthetic_dataset(
    num_classes: int,
    samples_per_class: int,
    seed: int,
    resolution: int = 16,
    split: str = "train",
    signal: float = 0.22,
    noise: float = 0.30,
    similar_rho: float = 0.88,
    label_flip: float = 0.0,
) -> ArrayDataset:
    """Deterministic class-separable toy images: class pattern + per-sample noise.

    Classes 0 and 1 are built to be semantically close (shared base pattern);
    higher class indices are mutually independent. Same seed, same pixels.
    ``label_flip`` reassigns that fraction of labels uniformly at random,
    which makes one-hot supervision noisy without touching the images.
    """
    if num_classes < 2 or samples_per_class < 1:
        raise ConfigurationError("need num_classes >= 2 and samples_per_class >= 1")
    if not 0.0 <= label_flip < 1.0:
        raise ConfigurationError("label_flip must lie in [0, 1)")
    patterns = _class_patterns(num_classes, seed, resolution, similar_rho)
    rng = derived_generator(seed, split, "samples")
    images = torch.empty(num_classes * samples_per_class, 3, resolution, resolution)
    labels = torch.empty(num_classes * samples_per_class, dtype=torch.long)
    i = 0
    for c in range(num_classes):
        for _ in range(samples_per_class):
            eps = torch.randn(3, resolution, resolution, generator=rng)
            images[i] = (0.5 + signal * patterns[c] + noise * eps).clamp(0.0, 1.0)
            labels[i] = c
            i += 1
    if label_flip > 0.0:
        flip_rng = derived_generator(seed, split, "flips")
        flip_mask = torch.rand(labels.size(0), generator=flip_rng) < label_flip
        random_labels = torch.randint(
            0, num_classes, (labels.size(0),), generator=flip_rng
        )
        labels = torch.where(flip_mask, random_labels, labels)
    spec = DatasetSpec(
        name="synthetic",
        split=split,
        num_classes=num_classes,
        resolution=resolution,
        mean=SYNTHETIC_MEAN,
        std=SYNTHETIC_STD,
        similar_pair=(0, 1) if num_classes >= 2 else None,
        dissimilar_pair=(2, 3) if num_classes >= 4 else None,
    )
    return ArrayDataset(spec, images, labels)


def synthetic_pair(
    num_classes: int,
    train_per_class: int,
    val_per_class: int,
    seed: int,
    resolution: int = 16,
    train_label_flip: float = 0.0,
    **kwargs: float,
) -> tuple[ArrayDataset, ArrayDataset]:
    """Train/val splits drawn from the same class patterns, disjoint noise streams.

    Label flipping only ever applies to the train split; val labels stay clean.
    """
    train = synthetic_dataset(
        num_classes,
        train_per_class,
        seed,
        resolution,
        split="train",
        label_flip=train_label_flip,
        **kwargs,
    )
    val = synthetic_dataset(num_classes, val_per_class, seed, resolution, split="val", **kwargs)
    return train, val


def synthetic_multilabel(
    source_classes: int,
    samples_per_class: int,
    seed: int,
    resolution: int = 16,
    split: str = "train",
    **kwargs: float,
) -> ArrayDataset:
    """Multi-hot relabeling of the synthetic set: attribute bits of the class index."""
    base = synthetic_dataset(
        source_classes, samples_per_class, seed, resolution, split=split, **kwargs
    )
    bits = max(2, (source_classes - 1).bit_length())
    multi = torch.zeros(len(base), bits)
    for b in range(bits):
        multi[:, b] = (base.labels >> b) & 1
    spec = replace(
        base.spec,
        name="synthetic-multilabel",
        num_classes=bits,
        label_arity="multi",
        similar_pair=None,
        dissimilar_pair=None,
    )
    return ArrayDataset(spec, base.images, multi)


def cifar10(root: Optional[str], split: str, download: bool = False) -> ArrayDataset:
    """CIFAR-10 from the standard on-disk layout under ``root``.

    ``root`` defaults to the ENSDISTILL_DATA_ROOT environment variable.
    Designated class pairs: (cat, dog) similar, (ship, frog) dissimilar.
    """
    import torchvision.datasets

    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigurationError(
            f"no dataset root: pass dataset.root or set {DATA_ROOT_ENV}"
        )
    try:
        ds = torchvision.datasets.CIFAR10(root=root, train=(split == "train"), download=download)
    except RuntimeError as exc:
        raise ConfigurationError(f"CIFAR-10 not found under {root}: {exc}") from exc
    images = torch.from_numpy(ds.data).permute(0, 3, 1, 2).float() / 255.0
    labels = torch.tensor(ds.targets, dtype=torch.long)
    spec = DatasetSpec(
        name="cifar10",
        split=split,
        num_classes=10,
        resolution=32,
        mean=CIFAR10_MEAN,
        std=CIFAR10_STD,
        similar_pair=(3, 5),
        dissimilar_pair=(8, 6),
    )
    return ArrayDataset(spec, images, labels)

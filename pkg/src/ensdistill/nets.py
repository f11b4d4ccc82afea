"""Desk-scale residual CNN family for teachers and students.

Four capacity tiers share one architecture template (3 residual stages for
small square inputs); teachers are deeper/wider than students. Every model
exposes logits, the penultimate embedding (the flattened input of the final
linear classifier) and a stable, ordered iterator over named weight tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

CAPACITY_TIERS = ("teacher-large", "teacher-medium", "student-small", "student-tiny")

# name -> (blocks per stage, stage widths)
ARCHITECTURES: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {
    "resnet8w8": ((1, 1, 1), (8, 16, 32)),
    "resnet14w16": ((2, 2, 2), (16, 32, 64)),
    "resnet14w24": ((2, 2, 2), (24, 48, 96)),
    "resnet20w32": ((3, 3, 3), (32, 64, 128)),
}

TIER_DEFAULT_ARCH = {
    "student-tiny": "resnet8w8",
    "student-small": "resnet14w16",
    "teacher-medium": "resnet14w24",
    "teacher-large": "resnet20w32",
}


@dataclass(frozen=True)
class ModelSpec:
    """Identity and sizing of one network."""

    name: str
    num_classes: int
    input_resolution: int
    capacity_tier: str

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_resolution < 8:
            raise ConfigurationError(
                f"input_resolution must be >= 8, got {self.input_resolution}"
            )
        if self.capacity_tier not in CAPACITY_TIERS:
            raise ConfigurationError(
                f"unknown capacity_tier {self.capacity_tier!r}; expected one of {CAPACITY_TIERS}"
            )

    @classmethod
    def for_tier(cls, tier: str, num_classes: int, input_resolution: int) -> "ModelSpec":
        if tier not in TIER_DEFAULT_ARCH:
            raise ConfigurationError(f"unknown capacity_tier {tier!r}")
        return cls(
            name=TIER_DEFAULT_ARCH[tier],
            num_classes=num_classes,
            input_resolution=input_resolution,
            capacity_tier=tier,
        )


def tier_for_arch(name: str) -> str:
    for tier, arch in TIER_DEFAULT_ARCH.items():
        if arch == name:
            return tier
    raise ConfigurationError(f"unknown architecture {name!r}")


class BasicBlock(nn.Module):
    """Two 3x3 convs with identity (or 1x1 projected) skip."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class DeskResNet(nn.Module):
    """Residual classifier for square inputs of at least 8 pixels.

    ``forward`` returns logits; ``embed`` returns the penultimate activation,
    i.e. exactly the vector the final linear layer consumes.
    """

    def __init__(self, spec: ModelSpec) -> None:
        super().__init__()
        if spec.name not in ARCHITECTURES:
            raise ConfigurationError(
                f"unknown architecture {spec.name!r}; known: {sorted(ARCHITECTURES)}"
            )
        self.spec = spec
        blocks, widths = ARCHITECTURES[spec.name]
        self.conv_in = nn.Conv2d(3, widths[0], 3, stride=1, padding=1, bias=False)
        self.bn_in = nn.BatchNorm2d(widths[0])
        stages = []
        in_ch = widths[0]
        for stage_idx, (n_blocks, width) in enumerate(zip(blocks, widths)):
            stride = 1 if stage_idx == 0 else 2
            layers = []
            for b in range(n_blocks):
                layers.append(BasicBlock(in_ch, width, stride if b == 0 else 1))
                in_ch = width
            stages.append(nn.Sequential(*layers))
        self.stage1, self.stage2, self.stage3 = stages
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(widths[-1], spec.num_classes)

    def _check_resolution(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.size(1) != 3:
            raise ShapeError(f"expected NCHW RGB batch, got shape {tuple(x.shape)}")
        res = self.spec.input_resolution
        if x.size(2) != res or x.size(3) != res:
            raise ShapeError(
                f"batch resolution {x.size(2)}x{x.size(3)} does not match "
                f"model input_resolution {res}; resize is never implicit"
            )

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        self._check_resolution(x)
        out = F.relu(self.bn_in(self.conv_in(x)))
        out = self.stage1(out)
        out = self.stage2(out)
        out = self.stage3(out)
        return torch.flatten(self.pool(out), 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.embed(x))

    def embedding_dim(self) -> int:
        return self.fc.in_features

    def named_weight_tensors(self) -> Iterator[tuple[str, torch.Tensor]]:
        """Ordered, run-stable enumeration of all learnable tensors."""
        yield from self.named_parameters()

    def conv_layer_names(self) -> list[str]:
        # main-path convs only; 1x1 projection shortcuts are not useful trace anchors
        return [
            name
            for name, mod in self.named_modules()
            if isinstance(mod, nn.Conv2d) and "shortcut" not in name
        ]


def build_model(spec: ModelSpec, seed: int) -> DeskResNet:
    """Construct a model with seed-deterministic initial weights.

    Initialization runs under a forked RNG, so two calls with the same spec
    and seed are bit-identical and the caller's RNG stream is untouched.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DeskResNet(spec)
    return model


def forward_logits(model: DeskResNet, batch: torch.Tensor) -> torch.Tensor:
    """One logit vector per image; deterministic when the model is in eval mode."""
    return model(batch)


def forward_embedding(model: DeskResNet, batch: torch.Tensor) -> torch.Tensor:
    """Penultimate activations for the batch (same contract as forward_logits)."""
    return model.embed(batch)


def middle_conv_layer(model: DeskResNet) -> str:
    """Name of the middle convolutional layer, the default percentile anchor."""
    names = model.conv_layer_names()
    return names[len(names) // 2]

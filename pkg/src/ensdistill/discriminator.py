"""Logit-space discriminator and the adversarial term it adds to the student loss.

The discriminator reads raw final-layer logits (no softmax) and scores how
ensemble-like they look. Per training step the student first descends its own
loss, then the discriminator takes exactly one opposing step.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError, ShapeError
from .losses import bce_loss


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_dim: int
    hidden_dims: tuple[int, int] = (128, 64)
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ConfigurationError("input_dim must be positive")
        if len(self.hidden_dims) != 2 or any(h < 1 for h in self.hidden_dims):
            raise ConfigurationError("hidden_dims must be two positive widths")


class Discriminator(nn.Module):
    """Three fully connected layers; returns a raw score per sample."""

    def __init__(self, spec: DiscriminatorSpec) -> None:
        super().__init__()
        self.spec = spec
        h1, h2 = spec.hidden_dims
        self.fc1 = nn.Linear(spec.input_dim, h1)
        self.fc2 = nn.Linear(h1, h2)
        self.fc3 = nn.Linear(h2, 1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, logits: torch.Tensor) -> torch.Tensor:
        if logits.dim() != 2 or logits.size(1) != self.spec.input_dim:
            raise ShapeError(
                f"discriminator expects (N,{self.spec.input_dim}), got {tuple(logits.shape)}"
            )
        x = self.act(self.fc1(logits))
        x = self.act(self.fc2(x))
        return self.fc3(x).squeeze(1)


def build_discriminator(spec: DiscriminatorSpec, seed: int) -> Discriminator:
    """Seed-deterministic construction isolated from the ambient RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Discriminator(spec)


def discriminator_prob(disc: Discriminator, logits: torch.Tensor) -> torch.Tensor:
    """P(input came from the ensemble) for a batch of raw logits."""
    return torch.sigmoid(disc(logits))


class AdversarialRegularizer:
    """Owns the discriminator and its optimizer; exposes the two per-step calls."""

    def __init__(
        self,
        spec: DiscriminatorSpec,
        seed: int,
        lr: float,
        momentum: float = 0.9,
    ) -> None:
        if not spec.enabled:
            raise ConfigurationError("regularizer requires an enabled spec")
        self.disc = build_discriminator(spec, seed)
        self.optimizer = torch.optim.SGD(self.disc.parameters(), lr=lr, momentum=momentum)

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def student_loss(self, student_logits: torch.Tensor) -> torch.Tensor:
        """Non-saturating generator term: push D(student) toward the ensemble label.

        Differentiable w.r.t. the student only; discriminator weights do not
        accumulate gradient from this call.
        """
        for p in self.disc.parameters():
            p.requires_grad_(False)
        try:
            prob = discriminator_prob(self.disc, student_logits)
            return bce_loss(torch.ones_like(prob), prob)
        finally:
            for p in self.disc.parameters():
                p.requires_grad_(True)

    def step(self, teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> float:
        """One BCE step telling ensemble (1) from student (0) logits, both detached."""
        if teacher_logits.shape != student_logits.shape:
            raise ShapeError("teacher and student logits must share a shape")
        self.optimizer.zero_grad()
        scores = self.disc(torch.cat([teacher_logits.detach(), student_logits.detach()]))
        prob = torch.sigmoid(scores)
        labels = torch.cat(
            [torch.ones(teacher_logits.size(0)), torch.zeros(student_logits.size(0))]
        )
        loss = bce_loss(labels, prob)
        loss.backward()
        self.optimizer.step()
        return float(loss.detach().item())

    def state_dict(self) -> dict:
        return {
            "disc": self.disc.state_dict(),
            "optimizer": self.optimizer.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.disc.load_state_dict(state["disc"])
        self.optimizer.load_state_dict(state["optimizer"])


def discriminator_step(
    regularizer: AdversarialRegularizer,
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
) -> float:
    return regularizer.step(teacher_logits, student_logits)


def adversarial_student_loss(
    regularizer: AdversarialRegularizer, student_logits: torch.Tensor
) -> torch.Tensor:
    return regularizer.student_loss(student_logits)

"""Frozen teacher ensembles and their averaged soft predictions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericalError, ShapeError
from .nets import DeskResNet, ModelSpec, build_model

SOFTMAX_TEMPERATURE = 1.0  # fixed by the recipe; kept visible, not configurable


@dataclass(frozen=True)
class Preprocessing:
    """Input contract every ensemble member must accept."""

    input_resolution: int
    mean: tuple[float, ...]
    std: tuple[float, ...]


@dataclass(frozen=True)
class TeacherRef:
    spec: ModelSpec
    checkpoint: Optional[str] = None


@dataclass(frozen=True)
class EnsembleSpec:
    teachers: tuple[TeacherRef, ...]
    preprocessing: Preprocessing

    def __post_init__(self) -> None:
        if len(self.teachers) < 1:
            raise ConfigurationError("an ensemble needs at least one teacher")
        classes = {t.spec.num_classes for t in self.teachers}
        if len(classes) != 1:
            raise ConfigurationError(f"teachers disagree on class count: {sorted(classes)}")
        for t in self.teachers:
            if t.spec.input_resolution != self.preprocessing.input_resolution:
                raise ConfigurationError(
                    f"teacher {t.spec.name} expects resolution {t.spec.input_resolution}, "
                    f"preprocessing provides {self.preprocessing.input_resolution}"
                )

    @property
    def num_classes(self) -> int:
        return self.teachers[0].spec.num_classes


def teacher_softmax(model: torch.nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Temperature-1 softmax of one frozen teacher; rejects non-finite outputs."""
    with torch.no_grad():
        logits = model(batch)
        if not torch.isfinite(logits).all():
            raise NumericalError("teacher produced non-finite logits")
        return F.softmax(logits / SOFTMAX_TEMPERATURE, dim=1)


def ensemble_predict(models: Sequence[torch.nn.Module], batch: torch.Tensor) -> torch.Tensor:
    """Unweighted mean of per-teacher softmax outputs. Order of teachers is irrelevant."""
    if not models:
        raise ConfigurationError("empty model list")
    acc = teacher_softmax(models[0], batch)
    for m in models[1:]:
        acc = acc + teacher_softmax(m, batch)
    return acc / len(models)


class TeacherEnsemble:
    """Loaded, eval-mode, gradient-free teacher set behind one predict() call."""

    def __init__(self, spec: EnsembleSpec, models: Sequence[DeskResNet]) -> None:
        if len(models) != len(spec.teachers):
            raise ConfigurationError("model count does not match spec")
        self.spec = spec
        self.models = list(models)
        for m in self.models:
            m.eval()
            m.requires_grad_(False)

    @classmethod
    def from_spec(cls, spec: EnsembleSpec) -> "TeacherEnsemble":
        """Builds every member and loads its checkpoint up front; missing files fail here."""
        models = []
        for ref in spec.teachers:
            model = build_model(ref.spec, seed=0)
            if ref.checkpoint is None:
                raise ConfigurationError(f"teacher {ref.spec.name} has no checkpoint path")
            state = torch.load(ref.checkpoint, map_location="cpu", weights_only=True)
            if isinstance(state, dict) and "model_state" in state:
                state = state["model_state"]
            model.load_state_dict(state)
            models.append(model)
        return cls(spec, models)

    @classmethod
    def from_models(
        cls, models: Sequence[DeskResNet], preprocessing: Preprocessing
    ) -> "TeacherEnsemble":
        refs = tuple(TeacherRef(m.spec) for m in models)
        return cls(EnsembleSpec(refs, preprocessing), models)

    def __len__(self) -> int:
        return len(self.models)

    def predict(self, batch: torch.Tensor) -> torch.Tensor:
        """Averaged soft target for an already augmented + normalized batch."""
        self._check_batch(batch)
        return ensemble_predict(self.models, batch).detach()

    def predict_logits(self, batch: torch.Tensor) -> torch.Tensor:
        """Mean of raw teacher logits; the ensemble-side discriminator input."""
        self._check_batch(batch)
        with torch.no_grad():
            acc = self.models[0](batch)
            for m in self.models[1:]:
                acc = acc + m(batch)
            logits = acc / len(self.models)
        if not torch.isfinite(logits).all():
            raise NumericalError("teacher produced non-finite logits")
        return logits.detach()

    def _check_batch(self, batch: torch.Tensor) -> None:
        res = self.spec.preprocessing.input_resolution
        if batch.dim() != 4 or batch.size(2) != res or batch.size(3) != res:
            raise ShapeError(
                f"ensemble expects (N,3,{res},{res}), got {tuple(batch.shape)}"
            )


@dataclass
class SupervisionStats:
    """Per-class mean soft target rows, for inspecting what the ensemble teaches."""

    class_ids: list[int] = field(default_factory=list)
    mean_probs: list[torch.Tensor] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)

    def row(self, class_id: int) -> torch.Tensor:
        return self.mean_probs[self.class_ids.index(class_id)]


def supervision_stats(probs: torch.Tensor, labels: torch.Tensor) -> SupervisionStats:
    """Averages soft-target rows per true class; classes absent from the batch are omitted."""
    if probs.dim() != 2 or labels.dim() != 1 or probs.size(0) != labels.size(0):
        raise ShapeError("expected (N, C) probs with (N,) labels")
    stats = SupervisionStats()
    for c in sorted(torch.unique(labels).tolist()):
        mask = labels == c
        stats.class_ids.append(int(c))
        stats.mean_probs.append(probs[mask].mean(dim=0))
        stats.counts.append(int(mask.sum().item()))
    return stats

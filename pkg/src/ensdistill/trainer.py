"""Training loops: hard-label pretraining and ensemble distillation.

Determinism contract: every random choice (init, iteration order, crops,
flips) comes from generators derived from (seed, epoch, purpose), never from
the ambient RNG. Resuming from an epoch checkpoint therefore replays the
remaining epochs bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import (
    ArrayDataset,
    augment_batch,
    derived_generator,
    derived_seed,
    epoch_permutation,
    normalize,
    transform_eval_batch,
)
from .discriminator import AdversarialRegularizer, DiscriminatorSpec
from .ensemble import TeacherEnsemble
from .errors import ConfigurationError, NumericalOverflowError
from .losses import ce_loss, hard_label_ce, teacher_entropy
from .nets import DeskResNet, ModelSpec, build_model, middle_conv_layer

log = logging.getLogger(__name__)

PERCENTILE_LEVELS = (10, 25, 50, 75, 90)


def lr_at(
    epoch: int, lr_init: float, milestones: Sequence[int], decay: float = 0.1
) -> float:
    """Step schedule: lr drops by ``decay`` at each milestone epoch (0-indexed)."""
    drops = sum(1 for m in milestones if epoch >= m)
    return lr_init * decay**drops


def default_milestone(total_epochs: int) -> int:
    """Single decay point at ceil(total / 1.8): the 0.01 -> 0.001 step."""
    return math.ceil(total_epochs / 1.8)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@dataclass(frozen=True)
class PretrainConfig:
    """Ordinary supervised training; used for teachers and student inits."""

    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    lr_milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True
    eval_train: bool = True


@dataclass(frozen=True)
class DistillConfig:
    """The distillation recipe. Defaults are the desk-scale settings.

    No weight decay and no hard labels: supervision is the averaged teacher
    softmax, optionally sharpened by the adversarial term (weight 0.1). The
    reference full-scale settings are lr 0.01 -> 0.001 at epoch 100 of 180,
    batch 512; desk scale keeps the ratios with 90 epochs and batch 128.
    """

    total_epochs: int = 90
    batch_size: int = 128
    lr_init: float = 0.01
    lr_milestones: Optional[tuple[int, ...]] = None
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    adv_weight: float = 0.1
    discriminator_enabled: bool = True
    discriminator_hidden: tuple[int, int] = (128, 64)
    init_mode: str = "hard-label-pretrained"
    use_hard_labels_in_distill: bool = False
    seed: int = 0
    eval_train: bool = True
    debug_crop_consistency: bool = False

    # "superior" inits come from a longer or augmented pretraining run; the
    # loop treats them like any other pretrained weights
    INIT_MODES = ("random", "hard-label-pretrained", "superior")

    def __post_init__(self) -> None:
        if self.init_mode not in self.INIT_MODES:
            raise ConfigurationError(f"unknown init_mode {self.init_mode!r}")
        if self.total_epochs < 1:
            raise ConfigurationError("total_epochs must be positive")

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.lr_milestones is not None:
            return self.lr_milestones
        return (default_milestone(self.total_epochs),)


@dataclass
class MetricsRecord:
    """One epoch of scalars; serialized one JSON object per line."""

    epoch: int
    lr: float
    loss_ce: Optional[float] = None
    loss_kl: Optional[float] = None
    loss_adv: Optional[float] = None
    loss_disc: Optional[float] = None
    loss_hard: Optional[float] = None
    train_top1: Optional[float] = None
    train_top5: Optional[float] = None
    val_top1: Optional[float] = None
    val_top5: Optional[float] = None
    weight_percentiles: Optional[dict[str, float]] = None
    percentile_layer: Optional[str] = None
    seconds: Optional[float] = None

    def to_json_line(self) -> str:
        # absent quantities are absent keys: a run without a discriminator
        # has no discriminator entries at all
        row = {k: v for k, v in dataclasses.asdict(self).items() if v is not None}
        return json.dumps(row, sort_keys=True)

    @staticmethod
    def from_json_line(line: str) -> "MetricsRecord":
        return MetricsRecord(**json.loads(line))

    def comparable(self) -> dict:
        """Everything except wall-clock time, for determinism comparisons."""
        d = dataclasses.asdict(self)
        d.pop("seconds")
        return d


def config_fingerprint(config: object, *extra: object) -> str:
    """sha256 over the canonical JSON of a config plus context tags."""
    if dataclasses.is_dataclass(config) and not isinstance(config, type):
        payload: object = dataclasses.asdict(config)
    else:
        payload = config
    text = json.dumps([payload, [str(e) for e in extra]], sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class CheckpointBundle:
    """Everything needed to resume at an epoch boundary or reuse the weights."""

    kind: str
    model_spec: dict
    model_state: dict
    epochs_completed: int
    config_fingerprint: str
    config: dict
    metrics: list = field(default_factory=list)
    optimizer_state: Optional[dict] = None
    regularizer_state: Optional[dict] = None
    val_top1: Optional[float] = None
    # training never consumes the ambient stream, but the snapshot makes the
    # bundle self-contained for any code that does
    rng_state: Optional[torch.Tensor] = None

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        torch.save(dataclasses.asdict(self), tmp)
        os.replace(tmp, path)

    @staticmethod
    def load(path: str) -> "CheckpointBundle":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        return CheckpointBundle(**payload)

    def spec(self) -> ModelSpec:
        return ModelSpec(**self.model_spec)

    def build_model(self) -> DeskResNet:
        model = build_model(self.spec(), seed=0)
        model.load_state_dict(self.model_state)
        return model

    def records(self) -> list[MetricsRecord]:
        return [MetricsRecord(**m) for m in self.metrics]


@dataclass(frozen=True)
class EvalResult:
    top1: float
    top5: float


def _topk_correct(logits: torch.Tensor, labels: torch.Tensor, k: int) -> int:
    top = logits.topk(k, dim=1).indices
    return int((top == labels.view(-1, 1)).any(dim=1).sum().item())


def evaluate(
    model: DeskResNet,
    dataset: ArrayDataset,
    batch_size: int = 256,
    resize_ratio: float = 1.0,
) -> EvalResult:
    """Single-crop eval: deterministic resize + center crop, normalized once."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    model.eval()
    k = min(5, dataset.spec.num_classes)
    correct1 = correct5 = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            batch = transform_eval_batch(images, model.spec.input_resolution, resize_ratio)
            batch = normalize(batch, dataset.spec.mean, dataset.spec.std)
            logits = model(batch)
            correct1 += _topk_correct(logits, labels, 1)
            correct5 += _topk_correct(logits, labels, k)
    n = len(dataset)
    return EvalResult(top1=100.0 * correct1 / n, top5=100.0 * correct5 / n)


def weight_percentile_row(model: DeskResNet) -> tuple[str, dict[str, float]]:
    """Percentiles of the monitored middle conv layer, one trace point per epoch."""
    layer = middle_conv_layer(model) + ".weight"
    weights = dict(model.named_parameters())[layer].detach().reshape(-1)
    values = np.percentile(weights.numpy(), PERCENTILE_LEVELS)
    return layer, {f"p{lvl}": float(v) for lvl, v in zip(PERCENTILE_LEVELS, values)}


class _RunWriter:
    """Owns the run directory layout: metrics.jsonl + checkpoints/."""

    def __init__(self, run_dir: Optional[str], fresh: bool) -> None:
        self.run_dir = run_dir
        if run_dir is None:
            return
        os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
        self.metrics_path = os.path.join(run_dir, "metrics.jsonl")
        if fresh and os.path.exists(self.metrics_path):
            os.remove(self.metrics_path)

    def append_metrics(self, record: MetricsRecord) -> None:
        if self.run_dir is None:
            return
        with open(self.metrics_path, "a") as fh:
            fh.write(record.to_json_line() + "\n")

    def save_checkpoint(self, bundle: CheckpointBundle, epoch: int) -> Optional[str]:
        if self.run_dir is None:
            return None
        path = os.path.join(self.run_dir, "checkpoints", f"epoch_{epoch:04d}.pt")
        bundle.save(path)
        bundle.save(os.path.join(self.run_dir, "checkpoints", "latest.pt"))
        return path


def _train_batches(n: int, batch_size: int, seed: int, epoch: int):
    """Permuted index batches; a trailing singleton is dropped (batchnorm needs N>1)."""
    perm = epoch_permutation(n, seed, epoch)
    for chunk in perm.split(batch_size):
        if chunk.numel() > 1:
            yield chunk


def _tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().numpy().tobytes()).hexdigest()


def pretrain_hard(
    spec: ModelSpec,
    train: ArrayDataset,
    val: ArrayDataset,
    config: PretrainConfig,
    run_dir: Optional[str] = None,
) -> tuple[DeskResNet, list[MetricsRecord]]:
    """Supervised baseline trainer; produces teachers and student inits."""
    model = build_model(spec, seed=config.seed)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    fingerprint = config_fingerprint(config, spec.name, train.spec.name)
    writer = _RunWriter(run_dir, fresh=True)
    metrics: list[MetricsRecord] = []
    for epoch in range(config.epochs):
        start_time = time.perf_counter()
        lr = lr_at(epoch, config.lr, config.lr_milestones, config.lr_decay)
        set_lr(optimizer, lr)
        aug_rng = derived_generator(config.seed, epoch, "augment")
        loss_sum = 0.0
        seen = 0
        model.train()
        for idx in _train_batches(len(train), config.batch_size, config.seed, epoch):
            images = train.images[idx]
            if config.augment:
                batch, _ = augment_batch(images, aug_rng, spec.input_resolution)
            else:
                batch = transform_eval_batch(images, spec.input_resolution)
            batch = normalize(batch, train.spec.mean, train.spec.std)
            optimizer.zero_grad()
            loss = hard_label_ce(train.labels[idx], model(batch))
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.item()) * idx.numel()
            seen += idx.numel()
        train_eval = evaluate(model, train) if config.eval_train else None
        val_eval = evaluate(model, val)
        record = MetricsRecord(
            epoch=epoch,
            lr=lr,
            loss_hard=loss_sum / max(seen, 1),
            train_top1=train_eval.top1 if train_eval else None,
            train_top5=train_eval.top5 if train_eval else None,
            val_top1=val_eval.top1,
            val_top5=val_eval.top5,
            seconds=time.perf_counter() - start_time,
        )
        metrics.append(record)
        writer.append_metrics(record)
        bundle = CheckpointBundle(
            kind="pretrain",
            model_spec=dataclasses.asdict(spec),
            model_state=model.state_dict(),
            optimizer_state=optimizer.state_dict(),
            epochs_completed=epoch + 1,
            config_fingerprint=fingerprint,
            config=dataclasses.asdict(config),
            metrics=[dataclasses.asdict(m) for m in metrics],
            val_top1=val_eval.top1,
            rng_state=torch.get_rng_state(),
        )
        writer.save_checkpoint(bundle, epoch)
    return model, metrics


def _soft_step(
    student: DeskResNet,
    ensemble: TeacherEnsemble,
    batch: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    regularizer: Optional[AdversarialRegularizer],
    adv_weight: float,
    check_crop_consistency: bool,
) -> dict[str, float]:
    """One distillation step. Takes images only: labels never reach this code path."""
    if check_crop_consistency:
        digest_for_teachers = _tensor_digest(batch)
    target = ensemble.predict(batch)
    teacher_logits = ensemble.predict_logits(batch) if regularizer is not None else None
    student.train()
    optimizer.zero_grad()
    if check_crop_consistency:
        assert _tensor_digest(batch) == digest_for_teachers, "student saw a different batch"
    student_logits = student(batch)
    loss_ce = ce_loss(target, student_logits)
    total = loss_ce
    out: dict[str, float] = {}
    if regularizer is not None:
        loss_adv = regularizer.student_loss(student_logits)
        total = total + adv_weight * loss_adv
        out["loss_adv"] = float(loss_adv.detach().item())
    if not torch.isfinite(total):
        raise NumericalOverflowError(f"distillation loss diverged: {total.item()!r}")
    total.backward()
    optimizer.step()
    if regularizer is not None:
        out["loss_disc"] = regularizer.step(teacher_logits, student_logits.detach())
    out["loss_ce"] = float(loss_ce.detach().item())
    # CE and KL differ by the target entropy, so KL comes free of a second pass
    out["loss_kl"] = out["loss_ce"] - float(teacher_entropy(target).item())
    return out


def _hard_step(
    student: DeskResNet,
    batch: torch.Tensor,
    labels: torch.Tensor,
    optimizer: torch.optim.Optimizer,
) -> dict[str, float]:
    student.train()
    optimizer.zero_grad()
    loss = hard_label_ce(labels, student(batch))
    if not torch.isfinite(loss):
        raise NumericalOverflowError(f"training loss diverged: {loss.item()!r}")
    loss.backward()
    optimizer.step()
    return {"loss_hard": float(loss.item())}


@dataclass
class DistillResult:
    model: DeskResNet
    metrics: list[MetricsRecord]
    run_dir: Optional[str] = None
    final_checkpoint: Optional[str] = None


def distill(
    student_spec: ModelSpec,
    ensemble: Optional[TeacherEnsemble],
    train: ArrayDataset,
    val: ArrayDataset,
    config: DistillConfig,
    init_state: Optional[dict] = None,
    run_dir: Optional[str] = None,
    resume_from: Optional[str] = None,
) -> DistillResult:
    """Distills ``student_spec`` against the ensemble (or hard labels, if configured).

    ``init_state`` supplies the student weights for the non-random init
    modes. Passing ``resume_from`` replays the remaining epochs exactly as
    the uninterrupted run would have.
    """
    soft = not config.use_hard_labels_in_distill
    if soft and ensemble is None:
        raise ConfigurationError("soft-target distillation needs an ensemble")
    if config.init_mode != "random" and init_state is None and resume_from is None:
        raise ConfigurationError(f"init_mode={config.init_mode!r} needs init_state")
    fingerprint = config_fingerprint(config, student_spec.name, train.spec.name)

    student = build_model(student_spec, seed=config.seed)
    optimizer = torch.optim.SGD(
        student.parameters(),
        lr=config.lr_init,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    regularizer = None
    if soft and config.discriminator_enabled:
        regularizer = AdversarialRegularizer(
            DiscriminatorSpec(student_spec.num_classes, config.discriminator_hidden),
            seed=derived_seed(config.seed, "discriminator"),
            lr=config.lr_init,
            momentum=config.momentum,
        )

    metrics: list[MetricsRecord] = []
    start_epoch = 0
    if resume_from is not None:
        bundle = CheckpointBundle.load(resume_from)
        if bundle.config_fingerprint != fingerprint:
            raise ConfigurationError("checkpoint was produced by a different configuration")
        student.load_state_dict(bundle.model_state)
        optimizer.load_state_dict(bundle.optimizer_state)
        if regularizer is not None:
            if bundle.regularizer_state is None:
                raise ConfigurationError("checkpoint lacks discriminator state")
            regularizer.load_state_dict(bundle.regularizer_state)
        metrics = bundle.records()
        start_epoch = bundle.epochs_completed
        if bundle.rng_state is not None:
            torch.set_rng_state(bundle.rng_state)
    elif init_state is not None:
        student.load_state_dict(init_state)

    writer = _RunWriter(run_dir, fresh=resume_from is None)
    milestones = config.resolved_milestones()
    final_checkpoint = None
    for epoch in range(start_epoch, config.total_epochs):
        start_time = time.perf_counter()
        lr = lr_at(epoch, config.lr_init, milestones, config.lr_decay)
        set_lr(optimizer, lr)
        if regularizer is not None:
            regularizer.set_lr(lr)
        aug_rng = derived_generator(config.seed, epoch, "augment")
        sums: dict[str, float] = {}
        seen = 0
        for idx in _train_batches(len(train), config.batch_size, config.seed, epoch):
            batch, _ = augment_batch(
                train.images[idx], aug_rng, student_spec.input_resolution
            )
            batch = normalize(batch, train.spec.mean, train.spec.std)
            if soft:
                step_out = _soft_step(
                    student,
                    ensemble,
                    batch,
                    optimizer,
                    regularizer,
                    config.adv_weight,
                    config.debug_crop_consistency,
                )
            else:
                step_out = _hard_step(student, batch, train.labels[idx], optimizer)
            for key, value in step_out.items():
                sums[key] = sums.get(key, 0.0) + value * idx.numel()
            seen += idx.numel()
        means = {k: v / max(seen, 1) for k, v in sums.items()}
        train_eval = evaluate(student, train) if config.eval_train else None
        val_eval = evaluate(student, val)
        layer, percentiles = weight_percentile_row(student)
        record = MetricsRecord(
            epoch=epoch,
            lr=lr,
            loss_ce=means.get("loss_ce"),
            loss_kl=means.get("loss_kl"),
            loss_adv=means.get("loss_adv"),
            loss_disc=means.get("loss_disc"),
            loss_hard=means.get("loss_hard"),
            train_top1=train_eval.top1 if train_eval else None,
            train_top5=train_eval.top5 if train_eval else None,
            val_top1=val_eval.top1,
            val_top5=val_eval.top5,
            weight_percentiles=percentiles,
            percentile_layer=layer,
            seconds=time.perf_counter() - start_time,
        )
        metrics.append(record)
        writer.append_metrics(record)
        bundle = CheckpointBundle(
            kind="distill",
            model_spec=dataclasses.asdict(student_spec),
            model_state=student.state_dict(),
            optimizer_state=optimizer.state_dict(),
            regularizer_state=regularizer.state_dict() if regularizer else None,
            epochs_completed=epoch + 1,
            config_fingerprint=fingerprint,
            config=dataclasses.asdict(config),
            metrics=[dataclasses.asdict(m) for m in metrics],
            val_top1=val_eval.top1,
            rng_state=torch.get_rng_state(),
        )
        final_checkpoint = writer.save_checkpoint(bundle, epoch)
    return DistillResult(
        model=student, metrics=metrics, run_dir=run_dir, final_checkpoint=final_checkpoint
    )

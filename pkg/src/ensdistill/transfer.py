"""Downstream reuse of a trained backbone: full finetuning or a linear probe.

The probe freezes every tensor outside the classifier head, batchnorm
statistics included, so the backbone is byte-identical before and after.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, replace
from typing import Optional

import torch

from .data import (
    ArrayDataset,
    augment_batch,
    derived_generator,
    normalize,
    transform_eval_batch,
)
from .errors import ConfigurationError, ShapeError
from .losses import hard_label_ce, multilabel_sigmoid_ce
from .nets import DeskResNet, ModelSpec, build_model
from .trainer import (
    CheckpointBundle,
    MetricsRecord,
    _RunWriter,
    _train_batches,
    config_fingerprint,
    evaluate,
)

TRANSFER_EVAL_RESIZE_RATIO = 8.0 / 7.0

MODE_DEFAULT_LR = {"finetune": 0.01, "linear-probe": 0.1}


@dataclass(frozen=True)
class TransferConfig:
    mode: str = "finetune"
    objective: str = "softmax-ce"
    epochs: int = 200
    batch_size: int = 128
    lr: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    eval_train: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODE_DEFAULT_LR:
            raise ConfigurationError(f"unknown transfer mode {self.mode!r}")
        if self.objective not in ("softmax-ce", "sigmoid-ce"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")

    def resolved_lr(self) -> float:
        return self.lr if self.lr is not None else MODE_DEFAULT_LR[self.mode]


def multilabel_accuracy(targets: torch.Tensor, logits: torch.Tensor) -> float:
    """Mean per-class binary accuracy (percent) at the 0.5 sigmoid threshold."""
    if targets.shape != logits.shape or targets.dim() != 2:
        raise ShapeError("expected matching (N, C) targets and logits")
    preds = (torch.sigmoid(logits) > 0.5).float()
    per_class = (preds == targets).float().mean(dim=0)
    return float(per_class.mean().item()) * 100.0


def evaluate_multilabel(
    model: DeskResNet,
    dataset: ArrayDataset,
    batch_size: int = 256,
    resize_ratio: float = TRANSFER_EVAL_RESIZE_RATIO,
) -> float:
    model.eval()
    logits = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            batch = transform_eval_batch(images, model.spec.input_resolution, resize_ratio)
            batch = normalize(batch, dataset.spec.mean, dataset.spec.std)
            logits.append(model(batch))
    return multilabel_accuracy(dataset.labels, torch.cat(logits))


def build_transfer_model(
    source_spec: ModelSpec, source_state: dict, num_classes: int, seed: int
) -> DeskResNet:
    """Source backbone weights under a freshly initialized head of the target width."""
    target_spec = replace(source_spec, num_classes=num_classes)
    model = build_model(target_spec, seed=seed)
    backbone_state = {k: v for k, v in source_state.items() if not k.startswith("fc.")}
    missing, unexpected = model.load_state_dict(backbone_state, strict=False)
    if unexpected:
        raise ConfigurationError(f"source state has unknown tensors: {unexpected}")
    if any(not k.startswith("fc.") for k in missing):
        raise ConfigurationError(f"source state is missing backbone tensors: {missing}")
    return model


def backbone_tensors(model: DeskResNet) -> dict[str, torch.Tensor]:
    """Every parameter and buffer outside the head, for freeze verification."""
    out = {}
    for name, p in model.named_parameters():
        if not name.startswith("fc."):
            out[name] = p.detach().clone()
    for name, b in model.named_buffers():
        if not name.startswith("fc."):
            out[name] = b.detach().clone()
    return out


@dataclass
class TransferResult:
    model: DeskResNet
    metrics: list[MetricsRecord]
    run_dir: Optional[str] = None


def transfer_run(
    source: CheckpointBundle,
    train: ArrayDataset,
    val: ArrayDataset,
    config: TransferConfig,
    run_dir: Optional[str] = None,
) -> TransferResult:
    """Adapts a trained backbone to a new labeled dataset.

    For multi-label datasets the objective must be sigmoid_ce and accuracy is
    the mean per-class binary accuracy; val_top1 carries that number.
    """
    multilabel = train.spec.label_arity == "multi"
    if multilabel != (config.objective == "sigmoid-ce"):
        raise ConfigurationError(
            f"objective {config.objective!r} does not fit "
            f"label_arity {train.spec.label_arity!r}"
        )
    model = build_transfer_model(
        source.spec(), source.model_state, train.spec.num_classes, seed=config.seed
    )
    probe = config.mode == "linear-probe"
    if probe:
        for name, p in model.named_parameters():
            p.requires_grad_(name.startswith("fc."))
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(
        trainable,
        lr=config.resolved_lr(),
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    fingerprint = config_fingerprint(config, source.spec().name, train.spec.name)
    writer = _RunWriter(run_dir, fresh=True)
    metrics: list[MetricsRecord] = []
    for epoch in range(config.epochs):
        start_time = time.perf_counter()
        # probe mode keeps batchnorm in eval so running stats stay frozen too
        model.train(not probe)
        aug_rng = derived_generator(config.seed, epoch, "augment")
        loss_sum = 0.0
        seen = 0
        for idx in _train_batches(len(train), config.batch_size, config.seed, epoch):
            batch, _ = augment_batch(
                train.images[idx], aug_rng, model.spec.input_resolution
            )
            batch = normalize(batch, train.spec.mean, train.spec.std)
            optimizer.zero_grad()
            logits = model(batch)
            if multilabel:
                loss = multilabel_sigmoid_ce(train.labels[idx], logits)
            else:
                loss = hard_label_ce(train.labels[idx], logits)
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.item()) * idx.numel()
            seen += idx.numel()
        if multilabel:
            val_top1 = evaluate_multilabel(model, val)
            train_top1 = evaluate_multilabel(model, train) if config.eval_train else None
            val_top5 = None
            train_top5 = None
        else:
            val_eval = evaluate(model, val, resize_ratio=TRANSFER_EVAL_RESIZE_RATIO)
            val_top1, val_top5 = val_eval.top1, val_eval.top5
            if config.eval_train:
                train_eval = evaluate(model, train, resize_ratio=TRANSFER_EVAL_RESIZE_RATIO)
                train_top1, train_top5 = train_eval.top1, train_eval.top5
            else:
                train_top1 = train_top5 = None
        record = MetricsRecord(
            epoch=epoch,
            lr=config.resolved_lr(),
            loss_hard=loss_sum / max(seen, 1),
            train_top1=train_top1,
            train_top5=train_top5,
            val_top1=val_top1,
            val_top5=val_top5,
            seconds=time.perf_counter() - start_time,
        )
        metrics.append(record)
        writer.append_metrics(record)
        bundle = CheckpointBundle(
            kind="transfer",
            model_spec=dataclasses.asdict(model.spec),
            model_state=model.state_dict(),
            optimizer_state=optimizer.state_dict(),
            epochs_completed=epoch + 1,
            config_fingerprint=fingerprint,
            config=dataclasses.asdict(config),
            metrics=[dataclasses.asdict(m) for m in metrics],
            val_top1=val_top1,
            rng_state=torch.get_rng_state(),
        )
        writer.save_checkpoint(bundle, epoch)
    return TransferResult(model=model, metrics=metrics, run_dir=run_dir)

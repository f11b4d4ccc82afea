"""Post-hoc analysis: per-class accuracy, weight statistics, curve comparisons.

All statistics are computed with integer counting or numpy's default
(linear-interpolation) percentile/histogram conventions so results are
reproducible to the bit across runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
import torch

from .data import ArrayDataset, normalize, transform_eval_batch
from .errors import ConfigurationError, ShapeError
from .nets import DeskResNet

log = logging.getLogger(__name__)

PERCENTILE_LEVELS = (10, 25, 50, 75, 90)


@dataclass
class ClasswiseReport:
    num_classes: int
    counts: list[int]
    correct: list[int]
    per_class: list[Optional[float]]
    absent_classes: list[int]
    overall: float
    similar_pair: Optional[tuple[int, int]] = None
    dissimilar_pair: Optional[tuple[int, int]] = None

    def pair_summary(self, pair: tuple[int, int]) -> dict[str, Optional[float]]:
        a, b = pair
        accs = [self.per_class[a], self.per_class[b]]
        mean = None if None in accs else (accs[0] + accs[1]) / 2.0
        return {"class_a": accs[0], "class_b": accs[1], "mean": mean}

    def csv_lines(self) -> list[str]:
        lines = ["class,count,correct,accuracy_pct"]
        for c in range(self.num_classes):
            acc = "" if self.per_class[c] is None else f"{self.per_class[c]:.4f}"
            lines.append(f"{c},{self.counts[c]},{self.correct[c]},{acc}")
        lines.append(f"overall,{sum(self.counts)},{sum(self.correct)},{self.overall:.4f}")
        return lines

    def summary_lines(self) -> list[str]:
        lines = []
        for c in range(self.num_classes):
            if c in self.absent_classes:
                lines.append(f"class {c}: absent from this split")
            else:
                lines.append(
                    f"class {c}: {self.per_class[c]:.2f}% ({self.correct[c]}/{self.counts[c]})"
                )
        lines.append(f"overall: {self.overall:.2f}%")
        for tag, pair in (("similar", self.similar_pair), ("dissimilar", self.dissimilar_pair)):
            if pair is not None:
                s = self.pair_summary(pair)
                if s["mean"] is not None:
                    lines.append(
                        f"{tag} pair {pair}: {s['class_a']:.2f}% / {s['class_b']:.2f}%"
                    )
        return lines


def classwise_accuracy(
    predictions: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int,
    similar_pair: Optional[tuple[int, int]] = None,
    dissimilar_pair: Optional[tuple[int, int]] = None,
) -> ClasswiseReport:
    """Integer-counted per-class accuracy; classes with no examples are flagged."""
    if predictions.shape != labels.shape or predictions.dim() != 1:
        raise ShapeError("expected matching (N,) predictions and labels")
    counts = [0] * num_classes
    correct = [0] * num_classes
    for c in range(num_classes):
        mask = labels == c
        counts[c] = int(mask.sum().item())
        correct[c] = int((predictions[mask] == c).sum().item())
    per_class: list[Optional[float]] = [
        (100.0 * correct[c] / counts[c]) if counts[c] else None for c in range(num_classes)
    ]
    absent = [c for c in range(num_classes) if counts[c] == 0]
    total = sum(counts)
    overall = 100.0 * sum(correct) / total if total else 0.0
    return ClasswiseReport(
        num_classes=num_classes,
        counts=counts,
        correct=correct,
        per_class=per_class,
        absent_classes=absent,
        overall=overall,
        similar_pair=similar_pair,
        dissimilar_pair=dissimilar_pair,
    )


def predict_classes(
    model: DeskResNet, dataset: ArrayDataset, batch_size: int = 256, resize_ratio: float = 1.0
) -> torch.Tensor:
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            batch = transform_eval_batch(images, model.spec.input_resolution, resize_ratio)
            batch = normalize(batch, dataset.spec.mean, dataset.spec.std)
            preds.append(model(batch).argmax(dim=1))
    return torch.cat(preds)


def classwise_eval(
    model: DeskResNet, dataset: ArrayDataset, batch_size: int = 256
) -> ClasswiseReport:
    preds = predict_classes(model, dataset, batch_size)
    return classwise_accuracy(
        preds,
        dataset.labels,
        dataset.spec.num_classes,
        similar_pair=dataset.spec.similar_pair,
        dissimilar_pair=dataset.spec.dissimilar_pair,
    )


def export_embeddings(
    model: DeskResNet,
    dataset: ArrayDataset,
    path: str,
    classes: Optional[Sequence[int]] = None,
    batch_size: int = 256,
) -> int:
    """Writes one row per sample: label, then embedding values, tab-separated %.6e.

    ``classes`` restricts the export to a subset of labels (the four-class
    similar/dissimilar study); None exports everything.
    """
    if classes is not None:
        if not len(classes):
            raise ConfigurationError("class subset must be non-empty")
        bad = [c for c in classes if not 0 <= c < dataset.spec.num_classes]
        if bad:
            raise ConfigurationError(f"unknown class {bad[0]} in subset")
        keep = torch.isin(dataset.labels, torch.tensor(sorted(classes)))
        dataset = dataset.subset(keep.nonzero(as_tuple=True)[0])
    model.eval()
    n = 0
    with open(path, "w") as fh, torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            batch = transform_eval_batch(images, model.spec.input_resolution)
            batch = normalize(batch, dataset.spec.mean, dataset.spec.std)
            emb = model.embed(batch)
            for i in range(emb.size(0)):
                row = "\t".join("%.6e" % v for v in emb[i].tolist())
                fh.write(f"{int(labels[i].item())}\t{row}\n")
                n += 1
    return n


@dataclass
class WeightHistogram:
    layer: str
    counts: list[int]
    edges: list[float]

    @property
    def total(self) -> int:
        return sum(self.counts)


def _select_tensors(
    model: torch.nn.Module, selector: Optional[str]
) -> list[tuple[str, torch.Tensor]]:
    """Parameter tensors matching a name or prefix; None picks the conv anchors."""
    named = list(model.named_parameters())
    if selector is None:
        if isinstance(model, DeskResNet):
            anchors = model.conv_layer_names()
            wanted = [anchors[0], anchors[len(anchors) // 2], anchors[-1]]
            # first/middle/last can coincide on shallow nets; keep unique order
            wanted = [f"{name}.weight" for name in dict.fromkeys(wanted)]
            by_name = dict(named)
            return [(name, by_name[name]) for name in wanted]
        return named
    matched = [
        (name, p)
        for name, p in named
        if name == selector or name.startswith(selector + ".")
    ]
    if not matched:
        raise ConfigurationError(f"no parameters match layer {selector!r}")
    return matched


def weight_histogram(
    model: torch.nn.Module, selector: Optional[str] = None, bins: int = 50
) -> list[WeightHistogram]:
    """Per-layer value histograms, numpy bin conventions (last bin closed).

    Each selected parameter tensor gets its own histogram spanning its own
    [min, max]. The default selector is the first/middle/last conv anchors.
    """
    out = []
    for name, p in _select_tensors(model, selector):
        # float64 so narrow ranges still split into representable bins
        values = p.detach().reshape(-1).to(torch.float64).numpy()
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            # a constant tensor still deserves a well-formed histogram
            lo, hi = lo - 1e-8, hi + 1e-8
        counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
        out.append(
            WeightHistogram(
                layer=name,
                counts=[int(c) for c in counts],
                edges=[float(e) for e in edges],
            )
        )
    return out


def percentile_values(values: Any, levels: Sequence[int] = PERCENTILE_LEVELS) -> dict[str, float]:
    """Linear-interpolation percentiles keyed p10..p90."""
    arr = values.detach().reshape(-1).numpy() if isinstance(values, torch.Tensor) else np.asarray(
        values, dtype=np.float64
    ).reshape(-1)
    if arr.size == 0:
        raise ConfigurationError("cannot take percentiles of nothing")
    out = np.percentile(arr, list(levels))
    return {f"p{lvl}": float(v) for lvl, v in zip(levels, out)}


def percentile_snapshot(
    model: torch.nn.Module, selector: Optional[str] = None
) -> dict[str, float]:
    """Percentiles of one monitored layer; the default anchor is the middle conv."""
    if selector is None and isinstance(model, DeskResNet):
        names = model.conv_layer_names()
        selector = names[len(names) // 2] + ".weight"
    tensors = _select_tensors(model, selector)
    flat = torch.cat([p.detach().reshape(-1) for _, p in tensors])
    if flat.numel() == 0:
        raise ConfigurationError("selected layer has no weight values")
    return percentile_values(flat)


@dataclass
class PercentileTrace:
    layer: str
    epochs: list[int]
    series: dict[str, list[float]]

    @staticmethod
    def from_metrics(records: Sequence[Any]) -> "PercentileTrace":
        layer = ""
        epochs = []
        series: dict[str, list[float]] = {f"p{lvl}": [] for lvl in PERCENTILE_LEVELS}
        for r in records:
            row = _get(r, "weight_percentiles")
            if row is None:
                continue
            layer = _get(r, "percentile_layer") or layer
            epochs.append(int(_get(r, "epoch")))
            for key in series:
                series[key].append(float(row[key]))
        return PercentileTrace(layer=layer, epochs=epochs, series=series)

    def csv_lines(self) -> list[str]:
        header = "epoch," + ",".join(f"p{lvl}" for lvl in PERCENTILE_LEVELS)
        lines = [header]
        for i, epoch in enumerate(self.epochs):
            row = ",".join("%.6e" % self.series[f"p{lvl}"][i] for lvl in PERCENTILE_LEVELS)
            lines.append(f"{epoch},{row}")
        return lines


def _get(record: Any, key: str) -> Any:
    if isinstance(record, dict):
        return record.get(key)
    return getattr(record, key, None)


@dataclass
class CurveComparison:
    epochs: list[int]
    a_values: list[float]
    b_values: list[float]
    delta: list[float]
    a_train_val_gap: list[Optional[float]]
    b_train_val_gap: list[Optional[float]]
    final_delta: Optional[float]
    best_a: Optional[float]
    best_b: Optional[float]


def compare_curves(
    a: Sequence[Any], b: Sequence[Any], key: str = "val_top1"
) -> CurveComparison:
    """Aligns two metric histories on shared epochs and reports a - b per epoch."""
    a_by_epoch = {int(_get(r, "epoch")): r for r in a}
    b_by_epoch = {int(_get(r, "epoch")): r for r in b}
    shared = sorted(set(a_by_epoch) & set(b_by_epoch))
    if len(shared) != len(a_by_epoch) or len(shared) != len(b_by_epoch):
        log.warning(
            "curves cover different epochs (%d vs %d); comparing the %d shared",
            len(a_by_epoch),
            len(b_by_epoch),
            len(shared),
        )
    a_values = [float(_get(a_by_epoch[e], key)) for e in shared]
    b_values = [float(_get(b_by_epoch[e], key)) for e in shared]

    def gap(r: Any) -> Optional[float]:
        t, v = _get(r, "train_top1"), _get(r, "val_top1")
        return None if t is None or v is None else float(t) - float(v)

    return CurveComparison(
        epochs=shared,
        a_values=a_values,
        b_values=b_values,
        delta=[x - y for x, y in zip(a_values, b_values)],
        a_train_val_gap=[gap(a_by_epoch[e]) for e in shared],
        b_train_val_gap=[gap(b_by_epoch[e]) for e in shared],
        final_delta=(a_values[-1] - b_values[-1]) if shared else None,
        best_a=max(a_values) if a_values else None,
        best_b=max(b_values) if b_values else None,
    )


@dataclass
class GapRow:
    name: str
    accuracy: float
    student_gap: float


def gap_report(
    student_top1: float,
    teacher_top1: dict[str, float],
    ensemble_top1: Optional[float] = None,
) -> list[GapRow]:
    """Student accuracy against each teacher and the ensemble; gap = reference - student."""
    rows = [GapRow("student", student_top1, 0.0)]
    for name, acc in teacher_top1.items():
        rows.append(GapRow(name, acc, acc - student_top1))
    if ensemble_top1 is not None:
        rows.append(GapRow("ensemble", ensemble_top1, ensemble_top1 - student_top1))
    return rows

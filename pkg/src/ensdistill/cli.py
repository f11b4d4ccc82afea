"""Command-line entry points: pretrain, distill, eval, transfer, analyze.

Configuration comes from a YAML file plus ``--set dotted.key=value``
overrides. Unknown keys are rejected with exit code 2 so typos fail loudly
instead of silently training the wrong thing.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing
from typing import Any, Optional

import torch
import yaml

from . import analysis
from .data import (
    ArrayDataset,
    cifar10,
    normalize,
    synthetic_dataset,
    synthetic_multilabel,
    transform_eval_batch,
)
from .ensemble import (
    EnsembleSpec,
    Preprocessing,
    TeacherEnsemble,
    TeacherRef,
    supervision_stats,
)
from .errors import ConfigurationError, PackageError
from .nets import ARCHITECTURES, ModelSpec, build_model, tier_for_arch
from .trainer import (
    CheckpointBundle,
    DistillConfig,
    PretrainConfig,
    distill,
    evaluate,
    pretrain_hard,
)
from .transfer import TransferConfig, transfer_run

SYNTH_DEFAULTS: dict[str, Any] = {
    "num_classes": 4,
    "train_per_class": 128,
    "val_per_class": 64,
    "resolution": 16,
    "seed": 0,
    "signal": 0.22,
    "noise": 0.30,
    "similar_rho": 0.88,
    "train_label_flip": 0.0,
}


# every section any subcommand understands; read-only commands accept the
# union so a training config can be reused for eval/analyze unchanged
TOP_LEVEL_KEYS = {
    "dataset",
    "model",
    "student",
    "teachers",
    "init_checkpoint",
    "source_checkpoint",
    "train",
    "distill",
    "transfer",
    "run_dir",
}


def _fail(message: str, code: int) -> "typing.NoReturn":
    print(f"ensdistill: error: {message}", file=sys.stderr)
    raise SystemExit(code)


def load_config(path: Optional[str], overrides: list[str]) -> dict:
    config: dict = {}
    if path:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{path} must contain a mapping")
        config = loaded
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set needs key=value, got {item!r}")
        key, _, raw = item.partition("=")
        value = yaml.safe_load(raw)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot override through scalar at {part!r}")
        node[parts[-1]] = value
    return config


def check_keys(data: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key {unknown[0]!r} in {where}")


def build_dataclass(cls: type, data: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    check_keys(data, set(fields), where)
    coerced = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    return cls(**coerced)


def dataset_from_config(
    config: dict, split: str, data_root: Optional[str] = None
) -> ArrayDataset:
    d = dict(config)
    name = d.pop("name", None)
    if name is None:
        raise ConfigurationError("dataset.name is required")
    if name == "synthetic":
        merged = {**SYNTH_DEFAULTS, **d}
        check_keys(merged, set(SYNTH_DEFAULTS), "dataset")
        per_class = merged["train_per_class"] if split == "train" else merged["val_per_class"]
        return synthetic_dataset(
            num_classes=merged["num_classes"],
            samples_per_class=per_class,
            seed=merged["seed"],
            resolution=merged["resolution"],
            split=split,
            signal=merged["signal"],
            noise=merged["noise"],
            similar_rho=merged["similar_rho"],
            label_flip=merged["train_label_flip"] if split == "train" else 0.0,
        )
    if name == "synthetic-multilabel":
        defaults = {
            "source_classes": 4,
            "train_per_class": 128,
            "val_per_class": 64,
            "resolution": 16,
            "seed": 0,
        }
        merged = {**defaults, **d}
        check_keys(merged, set(defaults), "dataset")
        per_class = merged["train_per_class"] if split == "train" else merged["val_per_class"]
        return synthetic_multilabel(
            source_classes=merged["source_classes"],
            samples_per_class=per_class,
            seed=merged["seed"],
            resolution=merged["resolution"],
            split=split,
        )
    if name == "cifar10":
        check_keys(d, {"root", "download"}, "dataset")
        # CIFAR-10 has no separate val split; "val" evaluates on the test set
        cifar_split = "train" if split == "train" else "test"
        return cifar10(
            data_root or d.get("root"), cifar_split, download=bool(d.get("download", False))
        )
    raise ConfigurationError(f"unknown dataset {name!r}")


def model_spec_from_config(config: dict, dataset: ArrayDataset) -> ModelSpec:
    check_keys(config, {"arch", "tier"}, "model")
    arch = config.get("arch")
    tier = config.get("tier")
    if arch is None and tier is None:
        raise ConfigurationError("model needs arch or tier")
    if arch is not None:
        if arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown arch {arch!r}")
        return ModelSpec(
            name=arch,
            num_classes=dataset.spec.num_classes,
            input_resolution=dataset.spec.resolution,
            capacity_tier=tier_for_arch(arch),
        )
    return ModelSpec.for_tier(
        tier, num_classes=dataset.spec.num_classes, input_resolution=dataset.spec.resolution
    )


def prepare_run_dir(run_dir: Optional[str], force: bool, resuming: bool) -> None:
    if run_dir is None:
        raise ConfigurationError("run_dir is required (config key or --run-dir)")
    if os.path.isdir(run_dir) and os.listdir(run_dir) and not (force or resuming):
        raise ConfigurationError(
            f"run dir {run_dir!r} is not empty; pass --force to overwrite or --resume"
        )
    os.makedirs(run_dir, exist_ok=True)


def save_config_copy(run_dir: str, config: dict) -> None:
    with open(os.path.join(run_dir, "config.yaml"), "w") as fh:
        yaml.safe_dump(config, fh, sort_keys=True)


def load_bundle(path: str) -> CheckpointBundle:
    if not os.path.exists(path):
        raise ConfigurationError(f"checkpoint not found: {path}")
    return CheckpointBundle.load(path)


def ensemble_from_bundles(
    paths: list[str], dataset: ArrayDataset
) -> tuple[TeacherEnsemble, dict[str, str]]:
    if not paths:
        raise ConfigurationError("distillation needs at least one teacher checkpoint")
    models = []
    names = {}
    for i, path in enumerate(paths):
        bundle = load_bundle(path)
        spec = bundle.spec()
        if spec.num_classes != dataset.spec.num_classes:
            raise ConfigurationError(
                f"teacher {path} has {spec.num_classes} classes, "
                f"dataset has {dataset.spec.num_classes}"
            )
        models.append(bundle.build_model())
        names[f"teacher{i}:{spec.name}"] = path
    pre = Preprocessing(
        input_resolution=dataset.spec.resolution,
        mean=tuple(dataset.spec.mean),
        std=tuple(dataset.spec.std),
    )
    refs = tuple(TeacherRef(m.spec, p) for m, p in zip(models, paths))
    return TeacherEnsemble(EnsembleSpec(refs, pre), models), names


def ensemble_top1(ens: TeacherEnsemble, dataset: ArrayDataset, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        batch = transform_eval_batch(images, ens.spec.preprocessing.input_resolution)
        batch = normalize(batch, dataset.spec.mean, dataset.spec.std)
        correct += int((ens.predict(batch).argmax(dim=1) == labels).sum().item())
    return 100.0 * correct / len(dataset)


def _apply_determinism(args: argparse.Namespace) -> None:
    if getattr(args, "deterministic", False):
        torch.use_deterministic_algorithms(True)


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    check_keys(config, {"dataset", "model", "train", "run_dir"}, "config")
    run_dir = args.run_dir or config.get("run_dir")
    prepare_run_dir(run_dir, args.force, resuming=False)
    train_ds = dataset_from_config(config.get("dataset", {}), "train", args.data_root)
    val_ds = dataset_from_config(config.get("dataset", {}), "val", args.data_root)
    spec = model_spec_from_config(config.get("model", {}), train_ds)
    train_cfg = build_dataclass(PretrainConfig, config.get("train", {}), "train")
    _apply_determinism(args)
    save_config_copy(run_dir, config)
    model, metrics = pretrain_hard(spec, train_ds, val_ds, train_cfg, run_dir=run_dir)
    final = metrics[-1]
    print(
        f"pretrain {spec.name}: epoch {final.epoch} "
        f"val top1 {final.val_top1:.2f} top5 {final.val_top5:.2f}"
    )
    return 0


def cmd_distill(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    check_keys(
        config,
        {"dataset", "student", "teachers", "init_checkpoint", "distill", "run_dir"},
        "config",
    )
    run_dir = args.run_dir or config.get("run_dir")
    prepare_run_dir(run_dir, args.force, resuming=args.resume)
    train_ds = dataset_from_config(config.get("dataset", {}), "train", args.data_root)
    val_ds = dataset_from_config(config.get("dataset", {}), "val", args.data_root)
    student_spec = model_spec_from_config(config.get("student", {}), train_ds)
    if args.discriminator is not None:
        config.setdefault("distill", {})["discriminator_enabled"] = args.discriminator == "on"
    cfg = build_dataclass(DistillConfig, config.get("distill", {}), "distill")

    ensemble = None
    teacher_accs: dict[str, float] = {}
    if not cfg.use_hard_labels_in_distill:
        teacher_paths = list(config.get("teachers") or [])
        ensemble, names = ensemble_from_bundles(teacher_paths, train_ds)
        for name, model in zip(names, ensemble.models):
            teacher_accs[name] = evaluate(model, val_ds).top1
        teacher_accs["ensemble"] = ensemble_top1(ensemble, val_ds)

    init_state = None
    if cfg.init_mode != "random":
        # "superior" is just a stronger pretraining checkpoint; loading is identical
        init_path = config.get("init_checkpoint")
        if init_path is None:
            raise ConfigurationError(f"init_mode {cfg.init_mode!r} needs init_checkpoint")
        init_bundle = load_bundle(init_path)
        if init_bundle.spec() != student_spec:
            raise ConfigurationError(
                f"init checkpoint is for {init_bundle.spec().name}, student is {student_spec.name}"
            )
        init_state = init_bundle.model_state

    _apply_determinism(args)
    save_config_copy(run_dir, config)
    if teacher_accs:
        os.makedirs(os.path.join(run_dir, "analysis"), exist_ok=True)
        with open(os.path.join(run_dir, "analysis", "ensemble_eval.json"), "w") as fh:
            json.dump(teacher_accs, fh, indent=2, sort_keys=True)

    resume_from = None
    if args.resume:
        resume_from = os.path.join(run_dir, "checkpoints", "latest.pt")
        if not os.path.exists(resume_from):
            raise ConfigurationError(f"nothing to resume: {resume_from} does not exist")
    result = distill(
        student_spec,
        ensemble,
        train_ds,
        val_ds,
        cfg,
        init_state=init_state,
        run_dir=run_dir,
        resume_from=resume_from,
    )
    trace = analysis.PercentileTrace.from_metrics(result.metrics)
    if trace.epochs:
        os.makedirs(os.path.join(run_dir, "analysis"), exist_ok=True)
        with open(os.path.join(run_dir, "analysis", "percentiles.csv"), "w") as fh:
            fh.write("\n".join(trace.csv_lines()) + "\n")
    final = result.metrics[-1]
    print(
        f"distill {student_spec.name}: epoch {final.epoch} "
        f"val top1 {final.val_top1:.2f} top5 {final.val_top5:.2f}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    check_keys(config, TOP_LEVEL_KEYS, "config")
    dataset = dataset_from_config(config.get("dataset", {}), args.split, args.data_root)
    bundle = load_bundle(args.checkpoint)
    model = bundle.build_model()
    result = evaluate(model, dataset, resize_ratio=args.resize_ratio)
    print(f"{bundle.spec().name} {args.split}: top1 {result.top1:.2f} top5 {result.top5:.2f}")
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set)
    check_keys(config, {"dataset", "source_checkpoint", "transfer", "run_dir"}, "config")
    run_dir = args.run_dir or config.get("run_dir")
    prepare_run_dir(run_dir, args.force, resuming=False)
    train_ds = dataset_from_config(config.get("dataset", {}), "train", args.data_root)
    val_ds = dataset_from_config(config.get("dataset", {}), "val", args.data_root)
    source_path = args.init or config.get("source_checkpoint")
    if source_path is None:
        raise ConfigurationError("transfer needs source_checkpoint (or --init)")
    if args.mode is not None:
        config.setdefault("transfer", {})["mode"] = args.mode
    cfg = build_dataclass(TransferConfig, config.get("transfer", {}), "transfer")
    _apply_determinism(args)
    save_config_copy(run_dir, config)
    result = transfer_run(load_bundle(source_path), train_ds, val_ds, cfg, run_dir=run_dir)
    final = result.metrics[-1]
    print(f"transfer {cfg.mode}: epoch {final.epoch} val acc {final.val_top1:.2f}")
    return 0


def _analyze_dataset(args: argparse.Namespace) -> ArrayDataset:
    config = load_config(args.config, args.set)
    check_keys(config, TOP_LEVEL_KEYS, "config")
    return dataset_from_config(config.get("dataset", {}), args.split, args.data_root)


def cmd_analyze_classwise(args: argparse.Namespace) -> int:
    dataset = _analyze_dataset(args)
    model = load_bundle(args.checkpoint).build_model()
    report = analysis.classwise_eval(model, dataset)
    for line in report.summary_lines():
        print(line)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(report.csv_lines()) + "\n")
    return 0


def cmd_analyze_supervision(args: argparse.Namespace) -> int:
    dataset = _analyze_dataset(args)
    ens, _ = ensemble_from_bundles(args.teachers, dataset)
    probs = []
    for start in range(0, len(dataset), 256):
        images = dataset.images[start : start + 256]
        batch = transform_eval_batch(images, dataset.spec.resolution)
        batch = normalize(batch, dataset.spec.mean, dataset.spec.std)
        probs.append(ens.predict(batch))
    stats = supervision_stats(torch.cat(probs), dataset.labels)
    payload = {
        str(c): {"count": n, "mean_probs": row.tolist()}
        for c, n, row in zip(stats.class_ids, stats.counts, stats.mean_probs)
    }
    for c, entry in payload.items():
        top = max(range(len(entry["mean_probs"])), key=entry["mean_probs"].__getitem__)
        print(
            f"class {c}: n={entry['count']} top={top} "
            f"p_true={entry['mean_probs'][int(c)]:.4f}"
        )
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
    return 0


def cmd_analyze_embeddings(args: argparse.Namespace) -> int:
    dataset = _analyze_dataset(args)
    model = load_bundle(args.checkpoint).build_model()
    n = analysis.export_embeddings(model, dataset, args.out, classes=args.classes)
    print(f"wrote {n} embeddings ({model.embedding_dim()} dims) to {args.out}")
    return 0


def cmd_analyze_histogram(args: argparse.Namespace) -> int:
    model = load_bundle(args.checkpoint).build_model()
    hists = analysis.weight_histogram(model, selector=args.layer, bins=args.bins)
    for hist in hists:
        print(f"{hist.layer}: {hist.total} values in {len(hist.counts)} bins "
              f"[{hist.edges[0]:.4g}, {hist.edges[-1]:.4g}]")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([dataclasses.asdict(h) for h in hists], fh, indent=2)
    return 0


def cmd_analyze_percentiles(args: argparse.Namespace) -> int:
    with open(args.metrics) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    trace = analysis.PercentileTrace.from_metrics(records)
    text = "\n".join(trace.csv_lines())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_analyze_compare(args: argparse.Namespace) -> int:
    def read(path: str) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    comparison = analysis.compare_curves(read(args.a), read(args.b), key=args.key)
    for i, epoch in enumerate(comparison.epochs):
        print(
            f"epoch {epoch}: a={comparison.a_values[i]:.2f} "
            f"b={comparison.b_values[i]:.2f} delta={comparison.delta[i]:+.2f}"
        )
    if comparison.final_delta is not None:
        print(f"final delta {comparison.final_delta:+.2f} "
              f"(best a {comparison.best_a:.2f}, best b {comparison.best_b:.2f})")
    return 0


def cmd_analyze_gaps(args: argparse.Namespace) -> int:
    dataset = _analyze_dataset(args)
    student = load_bundle(args.checkpoint).build_model()
    student_top1 = evaluate(student, dataset).top1
    teacher_accs = {}
    ens_top1 = None
    if args.teachers:
        ens, names = ensemble_from_bundles(args.teachers, dataset)
        for name, model in zip(names, ens.models):
            teacher_accs[name] = evaluate(model, dataset).top1
        ens_top1 = ensemble_top1(ens, dataset)
    for row in analysis.gap_report(student_top1, teacher_accs, ens_top1):
        print(f"{row.name}: {row.accuracy:.2f}% (gap {row.student_gap:+.2f})")
    return 0


def _add_common(parser: argparse.ArgumentParser, run_dir: bool = True) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value (dotted keys)",
    )
    parser.add_argument("--data-root", help="dataset root directory")
    if run_dir:
        parser.add_argument("--run-dir", help="output directory (overrides config)")
        parser.add_argument("--force", action="store_true", help="reuse a non-empty run dir")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic torch kernels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensdistill",
        description="Ensemble distillation with an adversarial logit discriminator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="supervised training for teachers and inits")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", help="train a student against a teacher ensemble")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/latest.pt")
    p.add_argument("--discriminator", choices=["on", "off"],
                   help="override distill.discriminator_enabled")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="single-crop evaluation of a checkpoint")
    _add_common(p, run_dir=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--resize-ratio", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", help="finetune or linear-probe a trained backbone")
    _add_common(p)
    p.add_argument("--init", help="source checkpoint (overrides source_checkpoint)")
    p.add_argument("--mode", choices=["finetune", "linear-probe"],
                   help="override transfer.mode")
    p.set_defaults(func=cmd_transfer)

    pa = sub.add_parser("analyze", help="post-hoc analysis commands")
    asub = pa.add_subparsers(dest="what", required=True)

    p = asub.add_parser("classwise", help="per-class accuracy report")
    _add_common(p, run_dir=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--out", help="write the per-class table as CSV")
    p.set_defaults(func=cmd_analyze_classwise)

    p = asub.add_parser("supervision", help="mean ensemble soft target per class")
    _add_common(p, run_dir=False)
    p.add_argument("--teachers", nargs="+", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--out", help="write per-class rows as JSON")
    p.set_defaults(func=cmd_analyze_supervision)

    p = asub.add_parser("embeddings", help="export penultimate-layer embeddings")
    _add_common(p, run_dir=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.add_argument("--classes", nargs="+", type=int,
                   help="restrict the export to these class ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_embeddings)

    p = asub.add_parser("histogram", help="weight-value histogram")
    _add_common(p, run_dir=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", help="parameter name or prefix; default: conv anchors")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", help="write counts and edges as JSON")
    p.set_defaults(func=cmd_analyze_histogram)

    p = asub.add_parser("percentiles", help="weight percentile trace from metrics.jsonl")
    _add_common(p, run_dir=False)
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_analyze_percentiles)

    p = asub.add_parser("compare", help="epoch-aligned comparison of two metric files")
    _add_common(p, run_dir=False)
    p.add_argument("--a", required=True, metavar="METRICS_A")
    p.add_argument("--b", required=True, metavar="METRICS_B")
    p.add_argument("--key", default="val_top1")
    p.set_defaults(func=cmd_analyze_compare)

    p = asub.add_parser("gaps", help="student accuracy vs teachers and ensemble")
    _add_common(p, run_dir=False)
    p.add_argument("--checkpoint", required=True, help="student checkpoint")
    p.add_argument("--teachers", nargs="*", default=[])
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_analyze_gaps)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _fail(str(exc), 2)
    except PackageError as exc:
        _fail(str(exc), 1)
    except OSError as exc:
        _fail(str(exc), 1)


if __name__ == "__main__":
    raise SystemExit(main())

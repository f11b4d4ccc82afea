"""Schedules, checkpointing, evaluation, and training-loop invariants."""

import dataclasses
import json
import math

import pytest
import torch

import ensdistill as ed
from ensdistill.data import synthetic_pair
from ensdistill.ensemble import Preprocessing, TeacherEnsemble
from ensdistill.errors import ConfigurationError
from ensdistill.nets import ModelSpec, build_model
from ensdistill.trainer import (
    CheckpointBundle,
    DistillConfig,
    MetricsRecord,
    PretrainConfig,
    config_fingerprint,
    default_milestone,
    distill,
    evaluate,
    lr_at,
    pretrain_hard,
    weight_percentile_row,
)


def tiny_pair(**kw):
    args = dict(num_classes=4, train_per_class=16, val_per_class=8, seed=0)
    args.update(kw)
    return synthetic_pair(**args)


def tiny_spec():
    return ModelSpec.for_tier("student-tiny", 4, 16)


def tiny_ensemble(train):
    t = build_model(tiny_spec(), seed=50)
    return TeacherEnsemble.from_models([t], Preprocessing(16, train.spec.mean, train.spec.std))


class TestSchedule:
    def test_paper_default_schedule(self):
        total = 180
        milestone = default_milestone(total)
        assert milestone == 100
        for epoch in range(total):
            want = 0.01 if epoch < milestone else 0.001
            assert lr_at(epoch, 0.01, (milestone,)) == pytest.approx(want)

    def test_desk_default_schedule(self):
        assert default_milestone(90) == 50
        assert lr_at(49, 0.01, (50,)) == pytest.approx(0.01)
        assert lr_at(50, 0.01, (50,)) == pytest.approx(0.001)

    def test_multiple_milestones_compound(self):
        assert lr_at(10, 0.1, (2, 5)) == pytest.approx(0.001)
        assert lr_at(3, 0.1, (2, 5)) == pytest.approx(0.01)

    def test_distill_config_default_milestone(self):
        cfg = DistillConfig(total_epochs=90)
        assert cfg.resolved_milestones() == (50,)
        cfg = DistillConfig(total_epochs=12)
        assert cfg.resolved_milestones() == (default_milestone(12),)

    def test_zero_weight_decay_step_is_noop(self):
        model = build_model(tiny_spec(), seed=0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        opt = torch.optim.SGD(model.parameters(), lr=0.01, momentum=0.9, weight_decay=0.0)
        opt.zero_grad()
        for p in model.parameters():
            p.grad = torch.zeros_like(p)
        opt.step()
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v), k

    def test_nonzero_weight_decay_shrinks(self):
        lin = torch.nn.Linear(4, 4, bias=False)
        with torch.no_grad():
            lin.weight.fill_(1.0)
        opt = torch.optim.SGD(lin.parameters(), lr=0.1, weight_decay=0.5)
        opt.zero_grad()
        lin.weight.grad = torch.zeros_like(lin.weight)
        opt.step()
        assert torch.allclose(lin.weight, torch.full((4, 4), 1.0 - 0.1 * 0.5))


class TestConfigs:
    def test_init_mode_values(self):
        assert DistillConfig.INIT_MODES == ("random", "hard-label-pretrained", "superior")
        for mode in DistillConfig.INIT_MODES:
            DistillConfig(init_mode=mode)
        with pytest.raises(ConfigurationError):
            DistillConfig(init_mode="pretrained")

    def test_distill_defaults_follow_recipe(self):
        cfg = DistillConfig()
        assert cfg.weight_decay == 0.0
        assert cfg.lr_init == 0.01
        assert cfg.lr_decay == 0.1
        assert cfg.adv_weight == 0.1
        assert cfg.momentum == 0.9
        assert cfg.use_hard_labels_in_distill is False
        assert cfg.discriminator_enabled is True

    def test_fingerprint_changes_with_config(self):
        a = config_fingerprint(DistillConfig(seed=0))
        b = config_fingerprint(DistillConfig(seed=1))
        c = config_fingerprint(DistillConfig(seed=0))
        assert a == c and a != b
        assert config_fingerprint(DistillConfig(seed=0), "x") != a


class TestEvaluate:
    def test_monte_carlo_uniform_logits(self):
        # a constant-logit model on C = 10 classes scores ~10% top-1 / ~50% top-5
        class Uniform(torch.nn.Module):
            spec = ModelSpec("resnet8w8", 10, 16, "student-tiny")

            def forward(self, x):
                g = torch.Generator().manual_seed(abs(hash(x.shape)) % (2**31))
                return torch.rand(x.size(0), 10, generator=g) * 1e-6

            def eval(self):
                return self

        ds = ed.synthetic_dataset(num_classes=10, samples_per_class=400, seed=1)
        result = evaluate(Uniform(), ds)
        assert abs(result.top1 - 10.0) <= 2.0
        assert abs(result.top5 - 50.0) <= 2.0

    def test_perfect_and_worst_case(self):
        ds = ed.synthetic_dataset(num_classes=4, samples_per_class=4, seed=0)

        class Oracle(torch.nn.Module):
            spec = ModelSpec("resnet8w8", 4, 16, "student-tiny")

            def __init__(self, labels, right=True):
                super().__init__()
                self.labels = labels
                self.right = right

            def forward(self, x):
                out = torch.zeros(x.size(0), 4)
                idx = self.labels if self.right else (self.labels + 1) % 4
                out[torch.arange(x.size(0)), idx] = 5.0
                return out

        assert evaluate(Oracle(ds.labels), ds).top1 == 100.0
        assert evaluate(Oracle(ds.labels, right=False), ds).top1 == 0.0

    def test_topk_clipped_to_num_classes(self):
        ds = ed.synthetic_dataset(num_classes=3, samples_per_class=4, seed=0)
        model = build_model(ModelSpec.for_tier("student-tiny", 3, 16), seed=0)
        result = evaluate(model, ds)
        assert result.top5 == 100.0  # k = min(5, C) = 3 covers every class

    def test_empty_dataset_rejected(self):
        ds = ed.synthetic_dataset(num_classes=4, samples_per_class=2, seed=0)
        empty = ds.subset(torch.tensor([], dtype=torch.long))
        model = build_model(tiny_spec(), seed=0)
        with pytest.raises(ConfigurationError):
            evaluate(model, empty)


class TestMetricsRecord:
    def test_none_fields_absent_from_json(self):
        rec = MetricsRecord(epoch=3, lr=0.01, loss_ce=1.0, val_top1=50.0, val_top5=90.0)
        data = json.loads(rec.to_json_line())
        assert "loss_adv" not in data and "loss_hard" not in data
        assert data["epoch"] == 3

    def test_json_roundtrip(self):
        rec = MetricsRecord(
            epoch=1, lr=0.01, loss_ce=0.5, loss_kl=0.1, val_top1=75.0, val_top5=99.0,
            weight_percentiles={"p10": -0.1, "p25": 0.0, "p50": 0.1, "p75": 0.2, "p90": 0.3},
            percentile_layer="stage2.0.conv1.weight",
        )
        back = MetricsRecord.from_json_line(rec.to_json_line())
        assert back.comparable() == rec.comparable()

    def test_comparable_ignores_wall_clock(self):
        a = MetricsRecord(epoch=0, lr=0.1, val_top1=10.0, val_top5=20.0, seconds=1.0)
        b = MetricsRecord(epoch=0, lr=0.1, val_top1=10.0, val_top5=20.0, seconds=9.0)
        assert a.comparable() == b.comparable()


class TestPretrain:
    def test_zero_epochs_returns_init(self):
        train, val = tiny_pair()
        cfg = PretrainConfig(epochs=0, seed=3)
        model, metrics = pretrain_hard(tiny_spec(), train, val, cfg)
        fresh = build_model(tiny_spec(), seed=3)
        assert metrics == []
        for a, b in zip(model.state_dict().values(), fresh.state_dict().values()):
            assert torch.equal(a, b)

    def test_learns_the_tiny_task(self):
        train, val = tiny_pair(train_per_class=32, noise=0.10)
        cfg = PretrainConfig(epochs=5, batch_size=32, lr=0.1, seed=0, augment=False)
        _, metrics = pretrain_hard(tiny_spec(), train, val, cfg)
        assert metrics[-1].train_top1 > 90.0

    def test_deterministic_across_calls(self):
        train, val = tiny_pair()
        cfg = PretrainConfig(epochs=2, batch_size=16, seed=1)
        m1, r1 = pretrain_hard(tiny_spec(), train, val, cfg)
        m2, r2 = pretrain_hard(tiny_spec(), train, val, cfg)
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)
        assert [r.comparable() for r in r1] == [r.comparable() for r in r2]


class TestDistill:
    def test_requires_ensemble_for_soft(self):
        train, val = tiny_pair()
        with pytest.raises(ConfigurationError):
            distill(tiny_spec(), None, train, val, DistillConfig(total_epochs=1))

    def test_requires_init_state_for_pretrained_mode(self):
        train, val = tiny_pair()
        ens = tiny_ensemble(train)
        with pytest.raises(ConfigurationError):
            distill(tiny_spec(), ens, train, val, DistillConfig(total_epochs=1))

    def test_soft_metrics_have_no_hard_loss(self):
        train, val = tiny_pair()
        ens = tiny_ensemble(train)
        cfg = DistillConfig(total_epochs=2, batch_size=16, init_mode="random", seed=0)
        res = distill(tiny_spec(), ens, train, val, cfg)
        last = res.metrics[-1]
        assert last.loss_hard is None
        assert last.loss_ce is not None and last.loss_kl is not None
        assert last.loss_adv is not None and last.loss_disc is not None
        assert last.percentile_layer.endswith(".weight")
        keys = set(last.weight_percentiles)
        assert keys == {"p10", "p25", "p50", "p75", "p90"}

    def test_disc_off_metrics_lack_adversarial_keys(self):
        train, val = tiny_pair()
        ens = tiny_ensemble(train)
        cfg = DistillConfig(
            total_epochs=1, batch_size=16, init_mode="random", discriminator_enabled=False
        )
        res = distill(tiny_spec(), ens, train, val, cfg)
        line = json.loads(res.metrics[-1].to_json_line())
        assert "loss_adv" not in line and "loss_disc" not in line

    def test_ce_minus_kl_equals_entropy_in_logs(self):
        train, val = tiny_pair()
        ens = tiny_ensemble(train)
        cfg = DistillConfig(total_epochs=2, batch_size=16, init_mode="random", seed=4)
        res = distill(tiny_spec(), ens, train, val, cfg)
        for rec in res.metrics:
            assert rec.loss_ce - rec.loss_kl > 0  # gap is the (positive) teacher entropy

    def test_hard_mode_records_hard_loss_only(self):
        train, val = tiny_pair()
        cfg = DistillConfig(
            total_epochs=1, batch_size=16, init_mode="random",
            use_hard_labels_in_distill=True, discriminator_enabled=False,
        )
        res = distill(tiny_spec(), None, train, val, cfg)
        last = res.metrics[-1]
        assert last.loss_hard is not None and last.loss_ce is None

    def test_lr_drops_at_milestone(self):
        train, val = tiny_pair()
        ens = tiny_ensemble(train)
        cfg = DistillConfig(
            total_epochs=4, batch_size=16, init_mode="random",
            lr_init=0.01, lr_milestones=(2,), seed=0,
        )
        res = distill(tiny_spec(), ens, train, val, cfg)
        assert [r.lr for r in res.metrics] == pytest.approx([0.01, 0.01, 0.001, 0.001])


class TestCheckpointResume:
    def run(self, run_dir, resume_from=None, epochs=3):
        train, val = tiny_pair()
        ens = tiny_ensemble(train)
        cfg = DistillConfig(total_epochs=epochs, batch_size=16, init_mode="random", seed=7)
        return distill(
            tiny_spec(), ens, train, val, cfg, run_dir=run_dir, resume_from=resume_from
        )

    def test_resume_is_bit_identical(self, tmp_path):
        full = self.run(tmp_path / "full")
        resumed = self.run(
            tmp_path / "part", resume_from=tmp_path / "full" / "checkpoints" / "epoch_0001.pt"
        )
        for a, b in zip(full.model.state_dict().values(), resumed.model.state_dict().values()):
            assert torch.equal(a, b)
        assert [m.comparable() for m in full.metrics] == [
            m.comparable() for m in resumed.metrics
        ]

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        self.run(tmp_path / "a", epochs=2)
        train, val = tiny_pair()
        ens = tiny_ensemble(train)
        other = DistillConfig(total_epochs=2, batch_size=16, init_mode="random", seed=8)
        with pytest.raises(ConfigurationError):
            distill(
                tiny_spec(), ens, train, val, other,
                resume_from=tmp_path / "a" / "checkpoints" / "epoch_0001.pt",
            )

    def test_bundle_contents(self, tmp_path):
        self.run(tmp_path / "r", epochs=2)
        bundle = CheckpointBundle.load(tmp_path / "r" / "checkpoints" / "latest.pt")
        assert bundle.kind == "distill"
        assert bundle.epochs_completed == 2
        assert bundle.spec() == tiny_spec()
        assert bundle.rng_state is not None
        assert bundle.optimizer_state is not None
        assert bundle.regularizer_state is not None
        assert len(bundle.records()) == 2
        model = bundle.build_model()
        assert isinstance(model, ed.DeskResNet)

    def test_latest_equals_last_epoch(self, tmp_path):
        self.run(tmp_path / "r", epochs=2)
        latest = CheckpointBundle.load(tmp_path / "r" / "checkpoints" / "latest.pt")
        last = CheckpointBundle.load(tmp_path / "r" / "checkpoints" / "epoch_0001.pt")
        for k, v in latest.model_state.items():
            assert torch.equal(v, last.model_state[k])

    def test_metrics_jsonl_one_object_per_line(self, tmp_path):
        res = self.run(tmp_path / "r", epochs=2)
        lines = (tmp_path / "r" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        parsed = [json.loads(line) for line in lines]
        assert [p["epoch"] for p in parsed] == [0, 1]
        assert parsed[-1]["val_top1"] == pytest.approx(res.metrics[-1].val_top1)


class TestLabelIsolation:
    def test_shuffled_labels_leave_soft_run_unchanged(self):
        train, val = tiny_pair(train_per_class=24)
        ens = tiny_ensemble(train)
        perm = torch.randperm(len(train), generator=torch.Generator().manual_seed(9))
        shuffled = train.with_labels(train.labels[perm])
        cfg = DistillConfig(
            total_epochs=2, batch_size=16, init_mode="random", seed=0, eval_train=False
        )
        a = distill(tiny_spec(), ens, train, val, cfg)
        b = distill(tiny_spec(), ens, shuffled, val, cfg)
        for pa, pb in zip(a.model.state_dict().values(), b.model.state_dict().values()):
            assert torch.equal(pa, pb)
        assert [m.comparable() for m in a.metrics] == [m.comparable() for m in b.metrics]

    def test_shuffled_labels_change_hard_run(self):
        train, val = tiny_pair(train_per_class=24)
        flipped = train.with_labels((train.labels + 1) % 4)
        cfg = DistillConfig(
            total_epochs=1, batch_size=16, init_mode="random", seed=0,
            use_hard_labels_in_distill=True, discriminator_enabled=False,
            eval_train=False,
        )
        a = distill(tiny_spec(), None, train, val, cfg)
        b = distill(tiny_spec(), None, flipped, val, cfg)
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.model.state_dict().values(), b.model.state_dict().values())
        )


def test_weight_percentile_row_monotone():
    model = build_model(ModelSpec.for_tier("teacher-medium", 4, 16), seed=0)
    layer, row = weight_percentile_row(model)
    assert layer.endswith(".weight")
    values = [row[f"p{lvl}"] for lvl in (10, 25, 50, 75, 90)]
    assert values == sorted(values)
    assert all(math.isfinite(v) for v in values)

"""Session-scoped training fixtures.

The desk runs (teachers, per-seed distillation arms, probes) are expensive,
so they are built once and shared by the unit tests and the acceptance
suite. Everything derives from the frozen constants in _desk.py.
"""

from __future__ import annotations

import pytest
import torch

import _desk as desk
from ensdistill.transfer import TransferConfig, transfer_run

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """One PASS/FAIL/SKIP line per criterion-marked test, capture-proof."""
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(
        report.outcome, report.outcome.upper()
    )
    detail = dict(report.user_properties).get("criterion_detail")
    line = f"{verdict} {marker.args[0]}" + (f" ({detail})" if detail else "")
    terminal = item.config.pluginmanager.get_plugin("terminalreporter")
    if terminal is not None:
        terminal.write_line("")
        terminal.write_line(line)


@pytest.fixture(scope="session")
def desk_data():
    return desk.make_data()


@pytest.fixture(scope="session")
def desk_teachers(desk_data):
    train, val = desk_data
    return desk.train_teachers(train, val)


@pytest.fixture(scope="session")
def desk_runs(desk_data, desk_teachers):
    """Per-seed dict: init accuracy plus the four distillation arms."""
    train, val = desk_data
    ensemble, _ = desk_teachers
    runs = {}
    for seed in desk.SEEDS:
        init_state, init_final = desk.student_init(train, val, seed)
        runs[seed] = {
            "init_val": init_final.val_top1,
            "soft": desk.soft_run(ensemble, train, val, seed, init_state),
            "hard": desk.hard_run(train, val, seed, init_state),
            "soft_random": desk.soft_run(ensemble, train, val, seed, None),
            "soft_nodisc": desk.soft_run(
                ensemble, train, val, seed, init_state, discriminator=False
            ),
        }
    return runs


@pytest.fixture(scope="session")
def transfer_dataset():
    return desk.make_transfer_data()


@pytest.fixture(scope="session")
def desk_probes(desk_runs, transfer_dataset):
    """Linear probes from the soft and hard checkpoints, per seed."""
    tr_train, tr_val = transfer_dataset
    probes = {}
    for seed, arms in desk_runs.items():
        cfg = TransferConfig(seed=seed, **desk.PROBE_CFG)
        probes[seed] = {
            name: transfer_run(desk.bundle_for(arms[name]), tr_train, tr_val, cfg)
            for name in ("soft", "hard")
        }
    return probes

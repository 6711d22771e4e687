"""Acceptance suite: every criterion at its stated tolerance, one line each."""
import time
from dataclasses import replace

import numpy as np
import pytest

from kdistill import checks
from kdistill.distill import loss_emb, loss_ss, uniform_layer_map
from kdistill.experiments import (
    ABLATION_GROUPS,
    WALL_CLOCK_COLUMNS,
    Cell,
    Setup,
    TeacherCache,
    ablation_grid,
    ablation_suite,
    run_cell,
    tiny_setup,
)
from kdistill.model import save_checkpoint
from kdistill.numerics import Tensor
from kdistill.tasks import generate_task
from kdistill.training import evaluate

SEEDS = range(5)


def test_1_oracle_equivalence(acceptance_report):
    t0 = time.perf_counter()
    results = checks.oracle_equivalence(num_instances=200, seed=1, tol=1e-10)
    elapsed = time.perf_counter() - t0
    worst = max(r.value for r in results)
    ok = all(r.passed for r in results) and len(results) == 6 and elapsed < 60
    acceptance_report(1, ok, f"six losses vs brute-force oracles on 200 instances, max |diff| {worst:.2e} "
                             f"(tol 1e-10), {elapsed:.1f}s (limit 60s)")
    assert ok, [r.line() for r in results]


def test_2_gradients(acceptance_report):
    t0 = time.perf_counter()
    results = checks.gradient_checks(seed=0, tol=1e-4, composite_tol=1e-3)
    elapsed = time.perf_counter() - t0
    single = max(r.value for r in results if "end-to-end" not in r.name)
    composite = max(r.value for r in results if "end-to-end" in r.name)
    ok = all(r.passed for r in results) and elapsed < 120
    acceptance_report(2, ok, f"finite differences: worst per-loss rel err {single:.1e} (tol 1e-4), "
                             f"end-to-end {composite:.1e} (tol 1e-3), {elapsed:.1f}s (limit 120s)")
    assert ok, [r.line() for r in results]


def test_3_zero_at_identity(acceptance_report):
    results = checks.identity_checks(seed=0, tol=1e-9)
    worst = max(r.value for r in results)
    ok = all(r.passed for r in results) and {"emb", "mha", "ffn", "ss", "sc", "kd"} <= {
        r.name.split("[")[1].split("]")[0] for r in results}
    acceptance_report(3, ok, f"all six losses at student == teacher, max |loss| {worst:.1e} (tol 1e-9)")
    assert ok, [r.line() for r in results]


@pytest.fixture(scope="module")
def desk():
    """Default noisy synthetic task, one teacher, shared by criteria 4 and 5."""
    setup = Setup()
    data = generate_task(setup.task)
    t0 = time.perf_counter()
    teacher = TeacherCache().get(setup, data)
    return {"setup": setup, "data": data, "teacher": teacher, "teacher_s": time.perf_counter() - t0,
            "runs": {}}


def _accuracy(desk, cell: Cell, seed: int) -> float:
    key = (cell.run_key(), seed)
    if key not in desk["runs"]:
        _, rec = run_cell(desk["setup"], cell, seed, desk["teacher"], desk["data"])
        desk["runs"][key] = rec.final_accuracy
    return desk["runs"][key]


def test_4_head_flexibility(desk, acceptance_report):
    t0 = time.perf_counter()
    acc = {h: [_accuracy(desk, Cell("heads", f"A_h={h}", h, h), s) for s in SEEDS] for h in (12, 6, 3)}
    elapsed = time.perf_counter() - t0 + desk["teacher_s"]
    mean = {h: float(np.mean(v)) for h, v in acc.items()}
    gap = mean[12] - mean[3]
    ok = all(len(v) == 5 for v in acc.values()) and gap <= 0.03 and elapsed < 900
    acceptance_report(4, ok, f"teacher A_h=12 -> student mean acc A_h=12 {mean[12]:.4f}, A_h=6 {mean[6]:.4f}, "
                             f"A_h=3 {mean[3]:.4f}; gap(12-3) {100 * gap:.2f} pts (limit 3), {elapsed:.0f}s")
    assert ok


def test_5_distillation_benefit(desk, acceptance_report):
    t0 = time.perf_counter()
    h = desk["setup"].student.num_heads
    distilled = [_accuracy(desk, Cell("heads", f"A_h={h}", h, h), s) for s in SEEDS]
    baseline = [_accuracy(desk, Cell("benefit", "baseline", h, h, procedure="baseline"), s) for s in SEEDS]
    elapsed = time.perf_counter() - t0
    diff = float(np.mean(distilled) - np.mean(baseline))
    teacher_acc = evaluate(desk["teacher"], desk["data"][1])
    ok = diff >= 0.02 and elapsed < 900
    acceptance_report(5, ok, f"two-stage distilled {np.mean(distilled):.4f} vs hard-label {np.mean(baseline):.4f} "
                             f"over 5 paired seeds: +{100 * diff:.2f} pts (need >= 2), teacher {teacher_acc:.4f}, "
                             f"noise {desk['setup'].task.noise_rate}, {elapsed:.0f}s")
    assert ok


def test_6_ablation_harness(acceptance_report):
    setup = tiny_setup()
    first = ablation_suite(setup, seeds=(0,))
    second = ablation_suite(setup, seeds=(0,))
    expected = {"heads": 3, "split_count": 6, "split_mode": 6, "sublayer": 3, "loss": 6, "stages": 2}
    counts = {g: sum(r["group"] == g for r in first) for g in ABLATION_GROUPS}
    strip = lambda rows: [{k: v for k, v in r.items() if k not in WALL_CLOCK_COLUMNS} for r in rows]  # noqa: E731
    deterministic = strip(first) == strip(second)
    complete = all(r["eval_accuracy"] is not None and r["config_hash"] for r in first)
    same_columns = len({tuple(r) for r in first}) == 1
    ok = counts == expected and len(first) == len(ablation_grid()) and deterministic and complete and same_columns
    acceptance_report(6, ok, f"{len(first)} rows {counts}; rerun identical: {deterministic}")
    assert ok


def test_7_invariance_and_layer_map(acceptance_report):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        b, n, d_t, d_s = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 9)), int(rng.integers(2, 9))
        q_t = np.linalg.qr(rng.normal(size=(d_t, d_t)))[0]
        q_s = np.linalg.qr(rng.normal(size=(d_s, d_s)))[0]
        mask = rng.random((b, n)) < 0.8
        mask[:, 0] = True
        e_t, e_s = rng.normal(size=(b, n, d_t)), rng.normal(size=(b, n, d_s))
        g_t, g_s = rng.normal(size=(n, d_t)), rng.normal(size=(n, d_s))
        base_e = loss_emb(Tensor(e_t), Tensor(e_s), mask).item()
        base_g = loss_ss(Tensor(g_t), Tensor(g_s)).item()
        worst = max(worst,
                    abs(loss_emb(Tensor(e_t @ q_t), Tensor(e_s @ q_s), mask).item() - base_e),
                    abs(loss_ss(Tensor(g_t @ q_t), Tensor(g_s @ q_s)).item() - base_g))
    pairs = uniform_layer_map(2, 4).pairs
    ok = worst <= 1e-10 and pairs == ((1, 2), (2, 4))
    acceptance_report(7, ok, f"rotation max |delta| {worst:.1e} (tol 1e-10); uniform_layer_map(2,4) = {list(pairs)}")
    assert ok


def test_8_determinism(tmp_path, acceptance_report):
    setup = replace(tiny_setup(), student_train=replace(tiny_setup().student_train, stage1_epochs=2, stage2_epochs=2))
    blobs, metrics = [], []
    for i in range(2):
        data = generate_task(setup.task)
        teacher = TeacherCache().get(setup, data)
        student, rec = run_cell(setup, Cell("det", "random", 6, 6, mode="random"), 11, teacher, data)
        save_checkpoint(student, tmp_path / f"s{i}.ckpt")
        save_checkpoint(teacher, tmp_path / f"t{i}.ckpt")
        blobs.append(((tmp_path / f"s{i}.ckpt").read_bytes(), (tmp_path / f"t{i}.ckpt").read_bytes()))
        metrics.append(rec.without_wall_clock())
    ok = blobs[0] == blobs[1] and metrics[0] == metrics[1] and len(metrics[0]) > 0
    acceptance_report(8, ok, f"two identical runs: checkpoints bitwise equal {blobs[0] == blobs[1]}, "
                             f"{len(metrics[0])} metric events equal {metrics[0] == metrics[1]}")
    assert ok

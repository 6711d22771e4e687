import json
import math
from dataclasses import replace

import numpy as np
import pytest

from kdistill.distill import DistillConfig, Projections
from kdistill.experiments import (
    ABLATION_GROUPS,
    Cell,
    TeacherCache,
    ablation_grid,
    benchmark_inference,
    run_cell,
    tiny_setup,
)
from kdistill.model import Model, ModelConfig, predict
from kdistill.tasks import SyntheticTaskSpec, generate_task
from kdistill.training import (
    EVENT_FIELDS,
    RunRecord,
    TrainConfig,
    TrainingDiverged,
    distill,
    distill_one_stage,
    evaluate,
    loss_report_at,
    train_baseline,
    train_supervised,
    train_teacher,
)

TASK = SyntheticTaskSpec(vocab_size=16, seq_len=8, num_train=150, num_eval=100, noise_rate=0.1)
TEACHER = ModelConfig(2, 24, 24, 12, 16, 8, 2)
STUDENT = ModelConfig(1, 24, 24, 3, 16, 8, 2)
TCFG = TrainConfig(stage1_epochs=2, stage2_epochs=1, batch_size=32, seed=3)


@pytest.fixture(scope="module")
def data():
    return generate_task(TASK)


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(TEACHER, TrainConfig(epochs=3, batch_size=32), *data)


@pytest.fixture(scope="module")
def run(teacher, data):
    snapshot = teacher.state()
    dcfg = DistillConfig.for_models(TEACHER, STUDENT)
    probe = data[1].batch(np.arange(32))
    student, record = distill(teacher, STUDENT, dcfg, TCFG, *data, probe=probe)
    return student, record, snapshot, dcfg


class TestEvaluate:
    def test_constant_predictor(self, data):
        m = Model.init(TEACHER, 0)
        m["classifier.weight"].data[:] = 0
        m["classifier.bias"].data[:] = [[1.0, 0.0]]
        acc = evaluate(m, data[1])
        assert acc == np.mean(data[1].labels == 0)
        assert abs(acc - 0.5) < 3 * math.sqrt(0.25 / len(data[1]))

    def test_ties_go_to_lowest_class(self, data):
        m = Model.init(TEACHER, 0)
        m["classifier.weight"].data[:] = 0
        assert np.all(predict(m, data[1].batch(np.arange(5))) == 0)

    @pytest.mark.parametrize("kind", ["sequence", "token"])
    def test_matches_recount(self, kind):
        spec = replace(TASK, kind=kind, num_classes=3)
        _, evals = generate_task(spec)
        m = Model.init(replace(TEACHER, task_kind=kind, num_classes=3), 1)
        correct = total = 0
        for i in range(len(evals)):
            b = evals.batch([i])
            pred = predict(m, b)[0]
            if kind == "sequence":
                correct += int(pred == b.labels[0])
                total += 1
            else:
                for t in range(b.seq_len):
                    if b.attention_mask[0, t]:
                        correct += int(pred[t] == b.labels[0, t])
                        total += 1
        assert evaluate(m, evals, batch_size=7) == correct / total

    def test_empty(self, data):
        empty = replace(data[1], token_ids=data[1].token_ids[:0], mask=data[1].mask[:0], labels=data[1].labels[:0])
        with pytest.raises(ValueError):
            evaluate(Model.init(TEACHER, 0), empty)


class TestTeacher:
    def test_zero_epochs_is_chance(self, data):
        m = train_teacher(TEACHER, TrainConfig(epochs=0), *data)
        assert Model.init(TEACHER, 0).equals(m.clone().freeze())
        assert abs(evaluate(m, data[1]) - 0.5) < 3 * math.sqrt(0.25 / len(data[1]))

    def test_seed_deterministic(self, data):
        a = train_teacher(TEACHER, TrainConfig(epochs=1, seed=5), *data)
        b = train_teacher(TEACHER, TrainConfig(epochs=1, seed=5), *data)
        assert a.equals(b)

    def test_frozen(self, teacher):
        assert not any(p.requires_grad for p in teacher.parameters())

    def test_early_stopping_restores_best(self, data):
        rec = RunRecord("t", "h")
        m, _ = train_supervised(TEACHER, TrainConfig(epochs=6, patience=1), *data, record=rec)
        accs = [e["eval_accuracy"] for e in rec.evals()]
        assert len(accs) <= 6
        assert evaluate(m, data[1]) == max(accs)


class TestDistill:
    def test_step_accounting(self, run, data):
        _, record, _, _ = run
        per_epoch = math.ceil(len(data[0]) / TCFG.batch_size)
        assert len(record.steps("stage1")) == TCFG.stage1_epochs * per_epoch
        assert len(record.steps("stage2")) == TCFG.stage2_epochs * per_epoch
        steps = [e["step"] for e in record.steps()]
        assert steps == list(range(1, len(steps) + 1))

    def test_teacher_bitwise_unchanged(self, run, teacher):
        _, _, snapshot, _ = run
        assert all(snapshot[n].tobytes() == t.data.tobytes() for n, t in teacher.named_parameters())

    def test_stage1_probe_decreases(self, run):
        probes = run[1].probes("stage1")
        assert [p["epoch"] for p in probes] == [0, 1, 2]
        assert probes[-1]["total"] < probes[0]["total"]

    def test_term_sums(self, run):
        for e in run[1].steps():
            terms = [v for k, v in e.items() if k.startswith("loss_") and v is not None]
            assert abs(sum(terms) - e["total"]) < 1e-9

    def test_fewer_heads_than_teacher(self, run):
        student, record, _, dcfg = run
        assert student.config.num_heads == 3 and dcfg.split.num_splits == 3
        assert record.final_accuracy is not None

    def test_deterministic(self, run, teacher, data):
        student, record, _, dcfg = run
        probe = data[1].batch(np.arange(32))
        again, rec2 = distill(teacher, STUDENT, dcfg, TCFG, *data, probe=probe)
        assert again.equals(student)
        assert rec2.without_wall_clock() == record.without_wall_clock()

    def test_stage2_trains_classifier_stage1_does_not(self, teacher, data):
        dcfg = DistillConfig.for_models(TEACHER, STUDENT)
        tcfg = replace(TCFG, stage1_epochs=1, stage2_epochs=0)
        student, _ = distill(teacher, STUDENT, dcfg, tcfg, *data)
        init = Model.init(STUDENT, TCFG.seed)
        assert np.array_equal(student["classifier.weight"].data, init["classifier.weight"].data)
        assert not np.array_equal(student["layers.1.wq"].data, init["layers.1.wq"].data)

    def test_divergence(self, teacher, data):
        broken = teacher.clone()
        broken["classifier.weight"].data[0, 0] = np.nan
        dcfg = DistillConfig.for_models(TEACHER, STUDENT, stage1_terms=("emb",))
        with pytest.raises(TrainingDiverged) as exc:
            distill(broken, STUDENT, dcfg, TCFG, *data)
        assert exc.value.last_good is not None

    def test_jsonl_schema(self, run, tmp_path):
        path = tmp_path / "m.jsonl"
        run[1].write_jsonl(path)
        lines = [json.loads(x) for x in path.read_text().splitlines()]
        assert len(lines) == len(run[1].events)
        assert all(tuple(x) == EVENT_FIELDS for x in lines)


class TestOneStage:
    def test_budget_parity(self, teacher, data):
        dcfg = DistillConfig.for_models(TEACHER, STUDENT)
        _, rec = distill_one_stage(teacher, STUDENT, dcfg, TCFG, *data)
        per_epoch = math.ceil(len(data[0]) / TCFG.batch_size)
        assert len(rec.steps("one_stage")) == (TCFG.stage1_epochs + TCFG.stage2_epochs) * per_epoch
        assert len(rec.evals()) == TCFG.stage1_epochs + TCFG.stage2_epochs

    def test_terms_match_two_stage(self, teacher, data):
        dcfg = DistillConfig.for_models(TEACHER, STUDENT)
        student, proj = Model.init(STUDENT, 0), Projections.init(24, 24, 0)
        b = data[0].batch(np.arange(16))
        one = loss_report_at(teacher, student, proj, dcfg, b, "one_stage").terms
        two = {**loss_report_at(teacher, student, proj, dcfg, b, "stage1").terms,
               **loss_report_at(teacher, student, proj, dcfg, b, "stage2").terms}
        assert one == two


def test_baseline_budget(data):
    _, rec = train_baseline(STUDENT, TCFG, *data)
    assert len(rec.evals()) == TCFG.stage1_epochs + TCFG.stage2_epochs


def test_noise_free_teacher_reaches_097():
    data = generate_task(SyntheticTaskSpec(num_train=2000, num_eval=1000))
    cfg = ModelConfig(4, 64, 128, 4, 32, 16, 2)
    teacher = train_teacher(cfg, TrainConfig(epochs=20, patience=3, batch_size=32), *data)
    assert evaluate(teacher, data[1]) >= 0.97


class TestAblationGrid:
    def test_cartesian_count(self):
        cells = ablation_grid()
        expected = {"heads": 3, "split_count": 6, "split_mode": 6, "sublayer": 3, "loss": 6, "stages": 2}
        assert {g: sum(c.group == g for c in cells) for g in ABLATION_GROUPS} == expected

    def test_no_kd_leave_one_out(self):
        names = [c.name for c in ablation_grid() if c.group == "loss"]
        assert names == ["full", "w/o emb", "w/o mha", "w/o ffn", "w/o ss", "w/o sc"]
        assert all("kd" in (c.stage2_terms or ("kd",)) for c in ablation_grid())

    def test_cell_runs_and_hash_differs(self):
        setup = tiny_setup()
        data = generate_task(setup.task)
        teacher = TeacherCache().get(setup, data)
        _, a = run_cell(setup, Cell("x", "a", 12, 12), 0, teacher, data)
        _, b = run_cell(setup, Cell("x", "b", 12, 12, mode="average"), 0, teacher, data)
        assert a.config_hash != b.config_hash

    def test_teacher_cache_persists(self, tmp_path):
        setup = tiny_setup()
        data = generate_task(setup.task)
        first = TeacherCache(tmp_path).get(setup, data)
        assert len(list(tmp_path.glob("teacher-*.ckpt"))) == 1
        again = TeacherCache(tmp_path).get(setup, data)
        assert again.equals(first)


def test_benchmark_records():
    m = Model.init(ModelConfig(2, 24, 48, 3, 16, 16, 2), 0)
    rows = benchmark_inference(m, (1, 64), repeats=30, warmup=5)
    assert [r["batch_size"] for r in rows] == [1, 64]
    assert all(r["repeats"] == 30 and r["warmup"] == 5 for r in rows)
    assert rows[1]["median_ms"] > rows[0]["median_ms"]

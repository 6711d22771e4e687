"""Desk-scale experiment grid: head counts, splits, sub-layer swaps, loss ablations."""
from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .distill import STAGE1_TERMS, DistillConfig, SplitSpec, uniform_layer_map
from .model import Batch, Model, ModelConfig, load_checkpoint, predict, save_checkpoint
from .tasks import Dataset, SyntheticTaskSpec, generate_task
from .training import (
    RunRecord,
    TrainConfig,
    config_hash,
    distill,
    distill_one_stage,
    evaluate,
    train_baseline,
    train_teacher,
)

log = logging.getLogger(__name__)

BENCH_BATCH_SIZES = (1, 16, 32, 64)
HEAD_COUNTS = (12, 6, 3)
SPLIT_SWEEP = {3: (3, 6, 12), 6: (6, 8, 12)}
MODE_HEADS = (3, 6)
ABLATION_GROUPS = ("heads", "split_count", "split_mode", "sublayer", "loss", "stages")
WALL_CLOCK_COLUMNS = ("wall_s",)


@dataclass
class Setup:
    """Everything a grid cell needs besides the cell's own overrides."""

    task: SyntheticTaskSpec = field(default_factory=lambda: SyntheticTaskSpec(
        "sequence", vocab_size=32, seq_len=16, num_classes=2, num_train=1000, num_eval=1000, noise_rate=0.2))
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(4, 48, 96, 12, 32, 16, 2))
    student: ModelConfig = field(default_factory=lambda: ModelConfig(2, 24, 48, 12, 32, 16, 2))
    teacher_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40, patience=6))
    student_train: TrainConfig = field(default_factory=lambda: TrainConfig(stage1_epochs=5, stage2_epochs=5))
    rho: float = 0.07
    tau: float = 1.0

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "teacher": self.teacher.to_dict(),
            "student": self.student.to_dict(),
            "teacher_train": asdict(self.teacher_train),
            "student_train": asdict(self.student_train),
            "rho": self.rho,
            "tau": self.tau,
        }


def tiny_setup() -> Setup:
    """A few-second budget for structural and determinism checks."""
    return Setup(
        task=SyntheticTaskSpec("sequence", vocab_size=16, seq_len=8, num_classes=2, num_train=64, num_eval=64, noise_rate=0.2),
        teacher=ModelConfig(2, 24, 24, 12, 16, 8, 2),
        student=ModelConfig(1, 24, 24, 12, 16, 8, 2),
        teacher_train=TrainConfig(epochs=1, batch_size=32),
        student_train=TrainConfig(stage1_epochs=1, stage2_epochs=1, batch_size=32),
    )


class TeacherCache:
    """Train each distinct teacher once; optionally persist as checkpoints."""

    def __init__(self, directory: Path | None = None):
        self.directory = Path(directory) if directory else None
        self._models: dict[str, Model] = {}

    def get(self, setup: Setup, data: tuple[Dataset, Dataset]) -> Model:
        key = config_hash([setup.task.to_dict(), setup.teacher.to_dict(), asdict(setup.teacher_train)])
        if key in self._models:
            return self._models[key]
        path = self.directory / f"teacher-{key}.ckpt" if self.directory else None
        if path is not None and path.exists():
            model = load_checkpoint(path, requires_grad=False)
        else:
            log.info("training teacher %s", key)
            model = train_teacher(setup.teacher, setup.teacher_train, *data)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, path)
        self._models[key] = model
        return model


@dataclass(frozen=True)
class Cell:
    group: str
    name: str
    heads: int
    num_splits: int
    mode: str = "concat"
    stage1_terms: tuple[str, ...] = STAGE1_TERMS
    stage2_terms: tuple[str, ...] | None = None
    mha_sublayer: str = "relation"
    ffn_sublayer: str = "feature"
    procedure: str = "two_stage"

    def run_key(self) -> tuple:
        """Cells sharing a key are the same experiment (group labels aside)."""
        return (self.heads, self.num_splits, self.mode, self.stage1_terms, self.stage2_terms,
                self.mha_sublayer, self.ffn_sublayer, self.procedure)


def ablation_grid(base_heads: int = 12, groups=ABLATION_GROUPS) -> list[Cell]:
    cells: list[Cell] = []
    if "heads" in groups:
        cells += [Cell("heads", f"A_h={h}", h, h) for h in HEAD_COUNTS]
    if "split_count" in groups:
        cells += [Cell("split_count", f"A_h={h},A_s={a}", h, a) for h, sweep in SPLIT_SWEEP.items() for a in sweep]
    if "split_mode" in groups:
        cells += [Cell("split_mode", f"A_h={h},{m}", h, h, m) for h in MODE_HEADS for m in ("concat", "average", "random")]
    if "sublayer" in groups:
        cells += [
            Cell("sublayer", "mha=relation,ffn=feature", base_heads, base_heads),
            Cell("sublayer", "feature on both", base_heads, base_heads, mha_sublayer="feature"),
            Cell("sublayer", "relation on both", base_heads, base_heads, ffn_sublayer="relation"),
        ]
    if "loss" in groups:
        cells.append(Cell("loss", "full", base_heads, base_heads))
        for term in ("emb", "mha", "ffn"):
            kept = tuple(t for t in STAGE1_TERMS if t != term)
            cells.append(Cell("loss", f"w/o {term}", base_heads, base_heads, stage1_terms=kept))
        for term in ("ss", "sc"):
            kept = tuple(t for t in ("ss", "sc", "kd") if t != term)
            cells.append(Cell("loss", f"w/o {term}", base_heads, base_heads, stage2_terms=kept))
    if "stages" in groups:
        cells += [
            Cell("stages", "two-stage", base_heads, base_heads),
            Cell("stages", "one-stage", base_heads, base_heads, procedure="one_stage"),
        ]
    return cells


def _student_config(setup: Setup, heads: int) -> ModelConfig:
    return replace(setup.student, num_heads=heads)


def _distill_config(setup: Setup, cell: Cell, student: ModelConfig) -> DistillConfig:
    cfg = DistillConfig(
        uniform_layer_map(student.num_layers, setup.teacher.num_layers),
        SplitSpec(cell.num_splits, cell.mode, rng_seed=0),
        rho=setup.rho,
        tau=setup.tau,
        stage1_terms=cell.stage1_terms,
        stage2_terms=cell.stage2_terms,
        task_kind=student.task_kind,
        mha_sublayer=cell.mha_sublayer,
        ffn_sublayer=cell.ffn_sublayer,
    )
    cfg.validate(setup.teacher, student)
    return cfg


def _final(record: RunRecord, stage: str, key: str = "total"):
    steps = record.steps(stage)
    return steps[-1][key] if steps else None


def run_cell(setup: Setup, cell: Cell, seed: int, teacher: Model, data: tuple[Dataset, Dataset]) -> tuple[Model, RunRecord]:
    student_cfg = _student_config(setup, cell.heads)
    tcfg = replace(setup.student_train, seed=seed)
    if cell.procedure == "baseline":
        return train_baseline(student_cfg, tcfg, *data)
    dcfg = _distill_config(setup, cell, student_cfg)
    run = distill if cell.procedure == "two_stage" else distill_one_stage
    return run(teacher, student_cfg, dcfg, tcfg, *data)


def summary_row(setup: Setup, cell: Cell, seed: int, record: RunRecord, wall_s: float) -> dict:
    row = {
        "group": cell.group,
        "cell": cell.name,
        "seed": seed,
        "procedure": cell.procedure,
        "student_heads": cell.heads,
        "num_splits": cell.num_splits,
        "split_mode": cell.mode,
        "stage1_terms": "+".join(cell.stage1_terms),
        "stage2_terms": "+".join(cell.stage2_terms or ("ss", "sc", "kd")),
        "mha_sublayer": cell.mha_sublayer,
        "ffn_sublayer": cell.ffn_sublayer,
        "student_params": record.param_counts.get("student", record.param_counts.get("baseline")),
        "teacher_params": record.param_counts.get("teacher"),
    }
    for stage in ("stage1", "stage2", "one_stage", "baseline"):
        row[f"final_{stage}_loss"] = _final(record, stage)
    row["eval_accuracy"] = record.final_accuracy
    row["config_hash"] = record.config_hash
    row["wall_s"] = round(wall_s, 3)
    return row


def ablation_suite(setup: Setup | None = None, seeds=(0,), groups=ABLATION_GROUPS,
                   teachers: TeacherCache | None = None, records: list | None = None) -> list[dict]:
    """Run every grid cell for every seed; one summary row per (cell, seed).

    Cells describing the same experiment are trained once and their result
    reused under each group label.
    """
    setup = setup or Setup()
    teachers = teachers or TeacherCache()
    data = generate_task(setup.task)
    teacher = teachers.get(setup, data)
    done: dict[tuple, tuple[RunRecord, float]] = {}
    rows = []
    for seed in seeds:
        for cell in ablation_grid(setup.student.num_heads, groups):
            key = (cell.run_key(), seed)
            if key not in done:
                t0 = time.perf_counter()
                _, record = run_cell(setup, cell, seed, teacher, data)
                done[key] = (record, time.perf_counter() - t0)
                if records is not None:
                    records.append(record)
                log.info("%s %s seed=%d acc=%.4f", cell.group, cell.name, seed, record.final_accuracy)
            record, wall = done[key]
            rows.append(summary_row(setup, cell, seed, record, wall))
    return rows


def write_tsv(rows: list[dict], path, exclude=()) -> None:
    if not rows:
        raise ValueError("no rows to write")
    columns = [c for c in rows[0] if c not in exclude]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in columns])


# -- inference timing ----------------------------------------------------------
def benchmark_inference(model: Model, batch_sizes=BENCH_BATCH_SIZES, repeats: int = 30, warmup: int = 5,
                        seq_len: int | None = None, seed: int = 0) -> list[dict]:
    """Median and standard deviation of per-batch forward wall time (ms)."""
    cfg = model.config
    n = seq_len or cfg.max_seq_len
    rng = np.random.default_rng(seed)
    rows = []
    for b in batch_sizes:
        ids = rng.integers(1, cfg.vocab_size, size=(b, n))
        ids[:, 0] = 1
        batch = Batch(ids, np.ones((b, n), bool))
        for _ in range(warmup):
            predict(model, batch)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            predict(model, batch)
            times.append((time.perf_counter() - t0) * 1e3)
        rows.append({
            "batch_size": b,
            "median_ms": statistics.median(times),
            "std_ms": statistics.stdev(times) if len(times) > 1 else 0.0,
            "repeats": repeats,
            "warmup": warmup,
        })
    return rows


# -- paired studies used by the acceptance suite --------------------------------
def head_count_study(setup: Setup, seeds, heads=HEAD_COUNTS, teachers: TeacherCache | None = None) -> dict[int, list[float]]:
    data = generate_task(setup.task)
    teacher = (teachers or TeacherCache()).get(setup, data)
    out: dict[int, list[float]] = {}
    for h in heads:
        cell = Cell("heads", f"A_h={h}", h, h)
        out[h] = [run_cell(setup, cell, s, teacher, data)[1].final_accuracy for s in seeds]
    return out


def benefit_study(setup: Setup, seeds, teachers: TeacherCache | None = None) -> dict[str, list[float]]:
    """Two-stage distilled vs hard-label student of identical architecture."""
    data = generate_task(setup.task)
    teacher = (teachers or TeacherCache()).get(setup, data)
    h = setup.student.num_heads
    out = {"teacher": [evaluate(teacher, data[1])], "distilled": [], "baseline": []}
    for s in seeds:
        out["distilled"].append(run_cell(setup, Cell("benefit", "distilled", h, h), s, teacher, data)[1].final_accuracy)
        out["baseline"].append(run_cell(setup, Cell("benefit", "baseline", h, h, procedure="baseline"), s, teacher, data)[1].final_accuracy)
    return out

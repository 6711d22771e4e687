"""Command-line experiment runner.

    kdistill --kind distill --set student.num_heads=3 --out runs/h3

Configuration is a flat mapping of dotted keys.  A JSON file given with
``--config`` may be flat or nested; ``--set key=value`` overrides it (values
are parsed as JSON, falling back to plain strings).  Unknown keys are errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import checks
from .distill import DistillConfig, SplitSpec, uniform_layer_map
from .experiments import (
    ABLATION_GROUPS,
    BENCH_BATCH_SIZES,
    WALL_CLOCK_COLUMNS,
    Setup,
    TeacherCache,
    ablation_suite,
    benchmark_inference,
    write_tsv,
)
from .model import ConfigError, Model, ModelConfig, load_checkpoint, save_checkpoint
from .tasks import SyntheticTaskSpec, generate_task
from .training import (
    RunRecord,
    TrainConfig,
    TrainingDiverged,
    config_hash,
    distill,
    distill_one_stage,
    evaluate,
    train_teacher,
)

KINDS = ("train-teacher", "distill", "distill-one-stage", "ablate", "benchmark", "losscheck")
OUT_ENV = "KDISTILL_OUT"
MODEL_KEYS = ("num_layers", "hidden_dim", "intermediate_dim", "num_heads", "init_std")

log = logging.getLogger("kdistill")


def default_config() -> dict:
    """Every addressable key with its default value."""
    base = Setup()
    cfg: dict = {"kind": "losscheck", "seed": 0, "out": None}
    cfg.update({f"task.{k}": v for k, v in base.task.to_dict().items()})
    for role, m in (("teacher", base.teacher), ("student", base.student)):
        cfg.update({f"{role}.{k}": getattr(m, k) for k in MODEL_KEYS})
    cfg["teacher.checkpoint"] = None
    cfg.update({f"teacher_train.{k}": v for k, v in asdict(base.teacher_train).items()})
    cfg.update({f"student_train.{k}": v for k, v in asdict(base.student_train).items() if k != "seed"})
    cfg.update({
        "distill.num_splits": None,
        "distill.split_mode": "concat",
        "distill.split_seed": 0,
        "distill.rho": base.rho,
        "distill.tau": base.tau,
        "distill.stage1_terms": ["emb", "mha", "ffn"],
        "distill.stage2_terms": None,
        "distill.normalize_sc": True,
        "distill.mha_sublayer": "relation",
        "distill.ffn_sublayer": "feature",
        "ablate.seeds": None,
        "ablate.groups": list(ABLATION_GROUPS),
        "benchmark.batch_sizes": list(BENCH_BATCH_SIZES),
        "benchmark.repeats": 30,
        "benchmark.warmup": 5,
        "losscheck.instances": 100,
    })
    return cfg


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(path=None, overrides=(), kind=None, out=None, seed=None) -> dict:
    """Merge defaults, file, ``key=value`` overrides and explicit flags."""
    cfg = default_config()
    layers = []
    if path is not None:
        with open(path) as f:
            loaded = json.load(f)
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        layers.append(flatten(loaded))
    sets = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        sets[key.strip()] = _parse_value(value)
    layers.append(sets)
    layers.append({k: v for k, v in (("kind", kind), ("out", out), ("seed", seed)) if v is not None})
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg.update(layer)
    if cfg["kind"] not in KINDS:
        raise ConfigError(f"kind: must be one of {KINDS}, got {cfg['kind']!r}")
    build(cfg)  # surface invariant violations before anything runs
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def _terms(value) -> tuple[str, ...] | None:
    if value is None:
        return None
    if isinstance(value, str):
        return tuple(t for t in value.replace(",", "+").split("+") if t)
    return tuple(value)


def _field_error(prefix: str, exc: Exception) -> ConfigError:
    return ConfigError(f"{prefix}: {exc}")


def build(cfg: dict) -> dict:
    """Typed components from a resolved flat config."""
    try:
        task = SyntheticTaskSpec(**_section(cfg, "task"))
    except (TypeError, ValueError) as e:
        raise _field_error("task", e) from None
    shared = dict(vocab_size=task.vocab_size, max_seq_len=task.seq_len, num_classes=task.num_classes, task_kind=task.kind)
    models = {}
    for role in ("teacher", "student"):
        sec = {k: v for k, v in _section(cfg, role).items() if k in MODEL_KEYS}
        try:
            models[role] = ModelConfig(**sec, **shared)
        except (TypeError, ValueError) as e:
            raise _field_error(role, e) from None
    trains = {}
    for role in ("teacher_train", "student_train"):
        sec = _section(cfg, role)
        if role == "student_train":
            sec["seed"] = cfg["seed"]
        try:
            trains[role] = TrainConfig(**sec)
        except (TypeError, ValueError) as e:
            raise _field_error(role, e) from None
    d = _section(cfg, "distill")
    student, teacher = models["student"], models["teacher"]
    try:
        num_splits = d["num_splits"] or student.num_heads
        split = SplitSpec(num_splits, d["split_mode"], d["split_seed"])
        split.check_model(student, "student")
        split.check_model(teacher, "teacher")
        dcfg = DistillConfig(
            uniform_layer_map(student.num_layers, teacher.num_layers), split,
            rho=d["rho"], tau=d["tau"], stage1_terms=_terms(d["stage1_terms"]), stage2_terms=_terms(d["stage2_terms"]),
            task_kind=task.kind, normalize_sc=bool(d["normalize_sc"]),
            mha_sublayer=d["mha_sublayer"], ffn_sublayer=d["ffn_sublayer"],
        )
    except (TypeError, ValueError) as e:
        raise _field_error("distill", e) from None
    setup = Setup(task, teacher, student, trains["teacher_train"], trains["student_train"], dcfg.rho, dcfg.tau)
    return {"setup": setup, "dcfg": dcfg}


# -- outputs -------------------------------------------------------------------
def emit_plot_data(records: list[RunRecord], directory) -> list[Path]:
    """Per run: one ``loss_<term>.tsv`` per term present and ``accuracy.tsv``.

    Loss files have columns ``step, value``; the accuracy file has
    ``epoch, value`` with epochs counted across stages.
    """
    if not records:
        raise ValueError("emit_plot_data: no records")
    written = []
    for rec in records:
        root = Path(directory) / rec.run_id
        root.mkdir(parents=True, exist_ok=True)
        steps = rec.steps()
        terms = [k for k in steps[0] if k.startswith("loss_") and any(e[k] is not None for e in steps)] if steps else []
        for term in terms:
            path = root / f"{term}.tsv"
            with open(path, "w") as f:
                f.write("step\tvalue\n")
                for e in steps:
                    if e[term] is not None:
                        f.write(f"{e['step']}\t{e[term]!r}\n")
            written.append(path)
        path = root / "accuracy.tsv"
        with open(path, "w") as f:
            f.write("epoch\tvalue\n")
            for i, e in enumerate(rec.evals(), 1):
                f.write(f"{i}\t{e['eval_accuracy']!r}\n")
        written.append(path)
    return written


def _write_records(records: list[RunRecord], out: Path) -> None:
    path = out / "metrics.jsonl"
    path.unlink(missing_ok=True)
    path.touch()
    for r in records:
        r.write_jsonl(path)
    if records:
        emit_plot_data(records, out / "plots")


def _split_wall_clock(rows: list[dict], out: Path, key_cols: tuple[str, ...]) -> None:
    write_tsv(rows, out / "summary.tsv", exclude=WALL_CLOCK_COLUMNS)
    timing = [{**{k: r[k] for k in key_cols}, **{k: r[k] for k in WALL_CLOCK_COLUMNS if k in r}} for r in rows]
    write_tsv(timing, out / "timing.tsv")


def _speed_ratio(teacher: Model, student: Model) -> float:
    t = benchmark_inference(teacher, (32,), repeats=10, warmup=2)[0]["median_ms"]
    s = benchmark_inference(student, (32,), repeats=10, warmup=2)[0]["median_ms"]
    return t / s


def _teacher(cfg: dict, setup: Setup, data, out: Path) -> tuple[Model, list[RunRecord]]:
    if cfg["teacher.checkpoint"]:
        teacher = load_checkpoint(cfg["teacher.checkpoint"], requires_grad=False)
        if teacher.config != setup.teacher:
            raise ConfigError(f"teacher.checkpoint config {teacher.config} differs from the configured teacher {setup.teacher}")
        return teacher, []
    rec = RunRecord(f"teacher-s{setup.teacher_train.seed}",
                    config_hash([setup.task.to_dict(), setup.teacher.to_dict(), asdict(setup.teacher_train)]))
    teacher = train_teacher(setup.teacher, setup.teacher_train, *data, record=rec)
    save_checkpoint(teacher, out / "teacher.ckpt")
    return teacher, [rec]


def run_train_teacher(cfg, parts, out: Path) -> int:
    setup = parts["setup"]
    data = generate_task(setup.task)
    teacher, recs = _teacher(cfg, setup, data, out)
    _write_records(recs, out)
    row = {"model": "teacher", "params": teacher.num_params, "eval_accuracy": evaluate(teacher, data[1]),
           "epochs_run": len(recs[0].evals()) if recs else 0, "config_hash": recs[0].config_hash if recs else ""}
    write_tsv([row], out / "summary.tsv")
    return 0


def run_distill(cfg, parts, out: Path, one_stage: bool) -> int:
    setup, dcfg = parts["setup"], parts["dcfg"]
    data = generate_task(setup.task)
    teacher, recs = _teacher(cfg, setup, data, out)
    fn = distill_one_stage if one_stage else distill
    try:
        student, rec = fn(teacher, setup.student, dcfg, setup.student_train, *data, probe=data[1].batch(range(min(64, len(data[1])))))
    except TrainingDiverged as e:
        if e.last_good is not None:
            ghost = Model.init(setup.student)
            ghost.load_state(e.last_good)
            save_checkpoint(ghost, out / "student.last_good.ckpt")
        raise
    recs.append(rec)
    save_checkpoint(student, out / "student.ckpt")
    _write_records(recs, out)
    row = {"run_id": rec.run_id, "procedure": "one_stage" if one_stage else "two_stage"}
    last = {}
    for e in rec.steps():
        for k, v in e.items():
            if k.startswith("loss_") and v is not None:
                last[k] = v
    row.update({f"final_{k}": v for k, v in sorted(last.items())})
    row.update({
        "teacher_accuracy": evaluate(teacher, data[1]),
        "student_accuracy": rec.final_accuracy,
        "teacher_params": teacher.num_params,
        "student_params": student.num_params,
        "compression": teacher.num_params / student.num_params,
        "config_hash": rec.config_hash,
        "speedup": _speed_ratio(teacher, student),
    })
    write_tsv([row], out / "summary.tsv", exclude=("speedup",))
    write_tsv([{"run_id": rec.run_id, "speedup": row["speedup"]}], out / "timing.tsv")
    return 0


def run_ablate(cfg, parts, out: Path) -> int:
    seeds = cfg["ablate.seeds"] or [cfg["seed"]]
    unknown = sorted(set(cfg["ablate.groups"]) - set(ABLATION_GROUPS))
    if unknown:
        raise ConfigError(f"ablate.groups: unknown group(s) {unknown}; choose from {ABLATION_GROUPS}")
    records: list[RunRecord] = []
    rows = ablation_suite(parts["setup"], seeds, tuple(cfg["ablate.groups"]), TeacherCache(out / "teachers"), records)
    _write_records(records, out)
    _split_wall_clock(rows, out, ("group", "cell", "seed"))
    return 0


def run_benchmark(cfg, parts, out: Path) -> int:
    setup = parts["setup"]
    models = {"teacher": Model.init(setup.teacher, 0), "student": Model.init(setup.student, 0)}
    rows = []
    for name, m in models.items():
        for r in benchmark_inference(m, tuple(cfg["benchmark.batch_sizes"]), cfg["benchmark.repeats"], cfg["benchmark.warmup"]):
            rows.append({"model": name, "num_heads": m.config.num_heads, "params": m.num_params, **r})
    by_b = {r["batch_size"]: r["median_ms"] for r in rows if r["model"] == "teacher"}
    for r in rows:
        r["speedup_vs_teacher"] = by_b[r["batch_size"]] / r["median_ms"]
    write_tsv(rows, out / "summary.tsv")
    return 0


def run_losscheck(cfg, parts, out: Path) -> int:
    results = checks.run_all(cfg["losscheck.instances"], cfg["seed"])
    for r in results:
        print(r.line())
    write_tsv([asdict(r) for r in results], out / "summary.tsv")
    return 0 if all(r.passed for r in results) else 1


def default_out(cfg: dict) -> Path:
    root = Path(os.environ.get(OUT_ENV, "runs"))
    key = {k: v for k, v in cfg.items() if k != "out"}
    return root / f"{cfg['kind']}-{config_hash(key)[:8]}"


def run(cfg: dict) -> int:
    parts = build(cfg)
    out = Path(cfg["out"]) if cfg["out"] else default_out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    resolved = dict(cfg, out=str(out))
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    kind = cfg["kind"]
    if kind == "train-teacher":
        return run_train_teacher(cfg, parts, out)
    if kind in ("distill", "distill-one-stage"):
        return run_distill(cfg, parts, out, kind == "distill-one-stage")
    if kind == "ablate":
        return run_ablate(cfg, parts, out)
    if kind == "benchmark":
        return run_benchmark(cfg, parts, out)
    return run_losscheck(cfg, parts, out)


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdistill", description="Two-stage multi-level distillation experiments.")
    p.add_argument("--config", type=Path, help="JSON config (flat dotted or nested keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one key; repeatable")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs, plus a config hash)")
    p.add_argument("--seed", type=int, help="student training seed")
    p.add_argument("--kind", choices=KINDS, help="experiment to run")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, args.overrides, args.kind, args.out, args.seed)
    except (ConfigError, OSError, json.JSONDecodeError) as e:
        print(f"kdistill: config error: {e}", file=sys.stderr)
        return 2
    if args.print_config:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    try:
        return run(cfg)
    except Exception as e:  # surfaced with context, nonzero exit
        print(f"kdistill: {cfg['kind']} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

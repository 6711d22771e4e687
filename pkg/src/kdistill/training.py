"""Supervised training, two-stage and one-stage distillation, evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .distill import DistillConfig, LossReport, Projections, one_stage_loss, stage1_loss, stage2_loss
from .model import Batch, ConfigError, Model, ModelConfig, count_params, encoder_forward, predict
from .numerics import Tensor, backward, log_softmax_rows, no_grad
from .tasks import Dataset

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")
EVENT_FIELDS = (
    "run_id", "config_hash", "event", "stage", "step", "epoch", "lr",
    "loss_emb", "loss_mha", "loss_ffn", "loss_ss", "loss_sc", "loss_kd", "loss_ce",
    "total", "eval_accuracy", "wall_ms",
)


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``last_good`` holds the latest finite student state."""

    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    grad_clip: float | None = 1.0
    patience: int | None = None

    def __post_init__(self):
        for f in ("stage1_epochs", "stage2_epochs", "epochs"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be >= 0, got {getattr(self, f)}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive or null, got {self.grad_clip}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError(f"patience must be >= 1 or null, got {self.patience}")


# -- optimizers ----------------------------------------------------------------
class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.eps = params, lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params, self.lr = params, lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


def make_optimizer(params: list[Tensor], cfg: TrainConfig):
    return Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else SGD(params, cfg.learning_rate)


def clip_grad_norm(params: list[Tensor], max_norm: float | None) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- run records ---------------------------------------------------------------
def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    events: list[dict] = field(default_factory=list)
    param_counts: dict[str, int] = field(default_factory=dict)
    step: int = 0

    def _event(self, **kw) -> dict:
        ev = dict.fromkeys(EVENT_FIELDS)
        ev.update(run_id=self.run_id, config_hash=self.config_hash, **kw)
        self.events.append(ev)
        return ev

    def log_step(self, stage: str, epoch: int, lr: float, terms: dict[str, float], total: float, wall_ms: float) -> None:
        self.step += 1
        self._event(event="step", stage=stage, step=self.step, epoch=epoch, lr=lr, total=total,
                    wall_ms=wall_ms, **{f"loss_{k}": v for k, v in terms.items()})

    def log_eval(self, stage: str, epoch: int, accuracy: float) -> None:
        self._event(event="eval", stage=stage, step=self.step, epoch=epoch, eval_accuracy=accuracy)

    def log_probe(self, stage: str, epoch: int, report: LossReport) -> None:
        self._event(event="probe", stage=stage, step=self.step, epoch=epoch, total=report.total,
                    **{f"loss_{k}": v for k, v in report.terms.items()})

    def probes(self, stage: str | None = None) -> list[dict]:
        return [e for e in self.events if e["event"] == "probe" and (stage is None or e["stage"] == stage)]

    def steps(self, stage: str | None = None) -> list[dict]:
        return [e for e in self.events if e["event"] == "step" and (stage is None or e["stage"] == stage)]

    def evals(self, stage: str | None = None) -> list[dict]:
        return [e for e in self.events if e["event"] == "eval" and (stage is None or e["stage"] == stage)]

    @property
    def final_accuracy(self) -> float | None:
        ev = self.evals()
        return ev[-1]["eval_accuracy"] if ev else None

    def without_wall_clock(self) -> list[dict]:
        return [{k: v for k, v in e.items() if k != "wall_ms"} for e in self.events]

    def write_jsonl(self, path) -> None:
        with open(path, "a") as f:
            for e in self.events:
                f.write(json.dumps(e, sort_keys=False) + "\n")


# -- evaluation ----------------------------------------------------------------
def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> float:
    """Accuracy of argmax predictions (ties to the lowest class index)."""
    if len(data) == 0:
        raise ValueError("evaluate: empty eval set")
    if model.config.task_kind != data.kind:
        raise ConfigError(f"model task kind {model.config.task_kind} does not match data kind {data.kind}")
    correct = total = 0
    for batch in data.batches(batch_size):
        pred = predict(model, batch)
        if data.kind == "sequence":
            correct += int((pred == batch.labels).sum())
            total += batch.size
        else:
            m = batch.attention_mask
            correct += int(((pred == batch.labels) & m).sum())
            total += int(m.sum())
    return correct / total


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood; token logits average over unmasked positions."""
    logp = log_softmax_rows(logits)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    if logits.ndim == 3:
        w = mask.astype(np.float64) if mask is not None else np.ones(labels.shape)
        onehot *= (w / w.sum())[..., None]
    else:
        onehot /= labels.shape[0]
    return (logp * onehot).sum() * -1.0


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _check_finite(value: float, what: str, last_good) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what}: non-finite loss {value}", last_good)


def _zero(params) -> None:
    for p in params:
        p.grad = None


# -- supervised training -------------------------------------------------------
def train_supervised(config: ModelConfig, tcfg: TrainConfig, train: Dataset, evals: Dataset,
                     epochs: int | None = None, record: RunRecord | None = None,
                     stage: str = "supervised") -> tuple[Model, RunRecord]:
    """Cross-entropy training on hard labels from a seeded initialization.

    With ``tcfg.patience`` set, stops once eval accuracy has not improved for
    that many epochs (or reaches 1.0) and returns the best weights seen.
    """
    epochs = tcfg.epochs if epochs is None else epochs
    model = Model.init(config, seed=tcfg.seed)
    record = record or RunRecord(f"{stage}-{tcfg.seed}", config_hash([config.to_dict(), asdict(tcfg)]))
    record.param_counts[stage] = model.num_params
    params = model.parameters()
    opt = make_optimizer(params, tcfg)
    shuffle = _rng(tcfg.seed, 1)
    best_acc, best_state, stale = -1.0, model.state(), 0
    for epoch in range(1, epochs + 1):
        for batch in train.batches(tcfg.batch_size, shuffle):
            t0 = time.perf_counter()
            out = encoder_forward(model, batch)
            loss = cross_entropy(out.logits, batch.labels, batch.attention_mask)
            _check_finite(loss.item(), stage, best_state)
            backward(loss)
            clip_grad_norm(params, tcfg.grad_clip)
            opt.step()
            _zero(params)
            record.log_step(stage, epoch, tcfg.learning_rate, {"ce": loss.item()}, loss.item(),
                            (time.perf_counter() - t0) * 1e3)
        acc = evaluate(model, evals)
        record.log_eval(stage, epoch, acc)
        if tcfg.patience is None:
            continue
        if acc > best_acc:
            best_acc, best_state, stale = acc, model.state(), 0
        else:
            stale += 1
        if acc >= 1.0 or stale >= tcfg.patience:
            break
    if tcfg.patience is not None and epochs > 0:
        model.load_state(best_state)
    return model, record


def train_teacher(config: ModelConfig, tcfg: TrainConfig, train: Dataset, evals: Dataset,
                  record: RunRecord | None = None) -> Model:
    """Fine-tune a teacher on hard labels and return it frozen."""
    model, _ = train_supervised(config, tcfg, train, evals, record=record, stage="teacher")
    return model.freeze()


# -- distillation --------------------------------------------------------------
def _teacher_outputs(teacher: Model, batch: Batch):
    with no_grad():
        return encoder_forward(teacher, batch)


def _projection_params(dcfg: DistillConfig, proj: Projections, stage: str) -> list[Tensor]:
    if stage == "stage2":
        return [proj.w_g] if "sc" in dcfg.stage2_terms else []
    out = []
    if "ffn" in dcfg.stage1_terms and dcfg.ffn_sublayer == "feature":
        out.append(proj.w_h)
    if "mha" in dcfg.stage1_terms and dcfg.mha_sublayer == "feature":
        out.append(proj.w_a)
    if stage == "one_stage" and "sc" in dcfg.stage2_terms:
        out.append(proj.w_g)
    return out


def _run_phase(stage: str, epochs: int, teacher: Model, student: Model, proj: Projections,
               dcfg: DistillConfig, tcfg: TrainConfig, train: Dataset, evals: Dataset,
               record: RunRecord, params: list[Tensor], shuffle: np.random.Generator,
               probe: Batch | None = None) -> None:
    opt = make_optimizer(params, tcfg)
    last_good = student.state()
    if probe is not None:
        record.log_probe(stage, 0, loss_report_at(teacher, student, proj, dcfg, probe, stage))
    for epoch in range(1, epochs + 1):
        for batch in train.batches(tcfg.batch_size, shuffle):
            t0 = time.perf_counter()
            t_out = _teacher_outputs(teacher, batch)
            s_out = encoder_forward(student, batch)
            for who, out in (("teacher", t_out), ("student", s_out)):
                if not np.isfinite(out.logits.data).all():
                    raise TrainingDiverged(f"{stage}: non-finite {who} outputs at step {record.step + 1}", last_good)
            if stage == "stage1":
                report = stage1_loss(t_out, s_out, dcfg, proj)
            elif stage == "stage2":
                report = stage2_loss(t_out, s_out, batch.labels, dcfg, proj)
            else:
                report = one_stage_loss(t_out, s_out, batch.labels, dcfg, proj)
            _check_finite(report.total, stage, last_good)
            backward(report.objective)
            clip_grad_norm(params, tcfg.grad_clip)
            opt.step()
            _zero(params)
            record.log_step(stage, epoch, tcfg.learning_rate, report.terms, report.total,
                            (time.perf_counter() - t0) * 1e3)
        last_good = student.state()
        record.log_eval(stage, epoch, evaluate(student, evals))
        if probe is not None:
            record.log_probe(stage, epoch, loss_report_at(teacher, student, proj, dcfg, probe, stage))


def _prepare(teacher: Model, student_config: ModelConfig, dcfg: DistillConfig, tcfg: TrainConfig, kind: str):
    dcfg.validate(teacher.config, student_config)
    teacher.freeze()
    student = Model.init(student_config, seed=tcfg.seed)
    proj = Projections.init(student_config.hidden_dim, teacher.config.hidden_dim, seed=tcfg.seed)
    h = config_hash([teacher.config.to_dict(), student_config.to_dict(), _dcfg_dict(dcfg), asdict(tcfg), kind])
    record = RunRecord(f"{kind}-{h[:8]}-s{tcfg.seed}", h)
    record.param_counts = {"teacher": teacher.num_params, "student": student.num_params}
    return student, proj, record


def _dcfg_dict(dcfg: DistillConfig) -> dict:
    d = asdict(dcfg)
    d["layer_map"] = [list(p) for p in dcfg.layer_map.pairs]
    return d


def distill(teacher: Model, student_config: ModelConfig, dcfg: DistillConfig, tcfg: TrainConfig,
            train: Dataset, evals: Dataset, probe: Batch | None = None) -> tuple[Model, RunRecord]:
    """Two-stage distillation.

    Stage 1 trains the student encoder and ``W_h`` on the stage-1 objective;
    stage 2 continues from those weights and trains every student parameter
    plus ``W_g`` on the stage-2 objective.  The teacher is never updated.
    With ``probe`` given, each objective is also evaluated on that fixed
    batch at the start of its stage and after every epoch.
    """
    student, proj, record = _prepare(teacher, student_config, dcfg, tcfg, "two_stage")
    shuffle = _rng(tcfg.seed, 2)
    s1 = student.encoder_parameters() + _projection_params(dcfg, proj, "stage1")
    _run_phase("stage1", tcfg.stage1_epochs, teacher, student, proj, dcfg, tcfg, train, evals, record, s1, shuffle, probe)
    s2 = student.parameters() + _projection_params(dcfg, proj, "stage2")
    _run_phase("stage2", tcfg.stage2_epochs, teacher, student, proj, dcfg, tcfg, train, evals, record, s2, shuffle, probe)
    return student, record


def distill_one_stage(teacher: Model, student_config: ModelConfig, dcfg: DistillConfig, tcfg: TrainConfig,
                      train: Dataset, evals: Dataset, probe: Batch | None = None) -> tuple[Model, RunRecord]:
    """Single phase on the sum of all enabled terms, for the combined epoch budget."""
    student, proj, record = _prepare(teacher, student_config, dcfg, tcfg, "one_stage")
    shuffle = _rng(tcfg.seed, 2)
    params = student.parameters() + _projection_params(dcfg, proj, "one_stage")
    epochs = tcfg.stage1_epochs + tcfg.stage2_epochs
    _run_phase("one_stage", epochs, teacher, student, proj, dcfg, tcfg, train, evals, record, params, shuffle, probe)
    return student, record


def train_baseline(student_config: ModelConfig, tcfg: TrainConfig, train: Dataset, evals: Dataset) -> tuple[Model, RunRecord]:
    """Hard-label-only student with the same epoch budget as two-stage distillation."""
    epochs = tcfg.stage1_epochs + tcfg.stage2_epochs
    plain = TrainConfig(**{**asdict(tcfg), "patience": None})
    return train_supervised(student_config, plain, train, evals, epochs=epochs, stage="baseline")


def loss_report_at(teacher: Model, student: Model, proj: Projections, dcfg: DistillConfig, batch: Batch,
                   stage: str) -> LossReport:
    """Evaluate one objective on fixed weights without recording a graph."""
    with no_grad():
        t_out, s_out = encoder_forward(teacher, batch), encoder_forward(student, batch)
        if stage == "stage1":
            return stage1_loss(t_out, s_out, dcfg, proj)
        if stage == "stage2":
            return stage2_loss(t_out, s_out, batch.labels, dcfg, proj)
        return one_stage_loss(t_out, s_out, batch.labels, dcfg, proj)


def param_summary(*configs: ModelConfig) -> list[int]:
    return [count_params(c) for c in configs]

"""Multi-level distillation losses, layer mapping and MHA-split grouping.

All losses take teacher and student :class:`EncoderOutputs` (or the pieces
of them they need) and return a 1x1 :class:`Tensor`.  Teacher inputs are
always detached first, so gradients reach only student tensors and the
learnable projections.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConfigError, EncoderOutputs, ModelConfig, _trunc_normal
from .numerics import (
    ShapeError,
    Tensor,
    concat,
    kl_rows,
    log_softmax_rows,
    softmax_rows,
    sqrt,
)

STAGE1_TERMS = ("emb", "mha", "ffn")
STAGE2_TERMS = ("ss", "sc", "kd")
ALL_TERMS = STAGE1_TERMS + STAGE2_TERMS
SPLIT_MODES = ("concat", "average", "random")
SUBLAYER_LOSSES = ("relation", "feature")

DEFAULT_RHO = 0.07
DEFAULT_TAU = 1.0
_NORM_EPS = 1e-24


# -- layer map -----------------------------------------------------------------
@dataclass(frozen=True)
class LayerMap:
    """Student layer ``n`` is supervised by teacher layer ``m`` for each pair."""

    pairs: tuple[tuple[int, int], ...]

    def validate(self, student_layers: int, teacher_layers: int) -> None:
        ns = [n for n, _ in self.pairs]
        ms = [m for _, m in self.pairs]
        if ns != list(range(1, student_layers + 1)):
            raise ConfigError(f"layer map must cover student layers 1..{student_layers}, got {ns}")
        if any(b <= a for a, b in zip(ms, ms[1:])) or not all(1 <= m <= teacher_layers for m in ms):
            raise ConfigError(f"teacher layers {ms} must be strictly increasing within [1, {teacher_layers}]")
        if ms[-1] != teacher_layers:
            raise ConfigError(f"last student layer must map to teacher layer {teacher_layers}, got {ms[-1]}")


def uniform_layer_map(student_layers: int, teacher_layers: int) -> LayerMap:
    if not 1 <= student_layers <= teacher_layers:
        raise ConfigError(f"need 1 <= N <= M, got N={student_layers}, M={teacher_layers}")
    if teacher_layers % student_layers:
        raise ConfigError(
            f"teacher layers M={teacher_layers} not divisible by student layers N={student_layers}"
        )
    step = teacher_layers // student_layers
    return LayerMap(tuple((n, n * step) for n in range(1, student_layers + 1)))


# -- MHA splits ----------------------------------------------------------------
@dataclass(frozen=True)
class SplitSpec:
    """How per-head outputs are grouped into ``num_splits`` MHA-splits.

    ``concat`` concatenates all heads of a layer and cuts the result into
    ``num_splits`` equal column chunks, so it only needs ``num_splits`` to
    divide the hidden width; with ``num_splits`` dividing the head count the
    chunks are exactly contiguous head groups.  ``average`` and ``random``
    work on whole heads and need ``num_splits`` to divide the head count.
    """

    num_splits: int
    mode: str = "concat"
    rng_seed: int = 0

    def __post_init__(self):
        if not isinstance(self.num_splits, (int, np.integer)) or self.num_splits < 1:
            raise ConfigError(f"num_splits must be an integer >= 1, got {self.num_splits!r}")
        if self.mode not in SPLIT_MODES:
            raise ConfigError(f"split mode must be one of {SPLIT_MODES}, got {self.mode!r}")

    def check_model(self, config: ModelConfig, role: str) -> None:
        a_s = self.num_splits
        if self.mode == "concat":
            if config.hidden_dim % a_s:
                raise ConfigError(
                    f"num_splits A_s={a_s} must divide the {role} hidden width {config.hidden_dim} "
                    f"({config.num_heads} heads x {config.head_dim})"
                )
        elif config.num_heads % a_s:
            raise ConfigError(
                f"num_splits A_s={a_s} must divide the {role} head count A_h={config.num_heads} in {self.mode} mode"
            )

    def validate(self, teacher: ModelConfig, student: ModelConfig) -> None:
        self.check_model(teacher, "teacher")
        self.check_model(student, "student")

    def random_choice(self, role: str, layer: int, split: int, group_size: int) -> int:
        """Fixed head pick for ``(role, layer, split)``; stable for a whole run."""
        tag = 0 if role == "teacher" else 1
        return int(np.random.default_rng([self.rng_seed, tag, layer, split]).integers(group_size))


def _chunk_columns(merged: Tensor, num_splits: int) -> list[Tensor]:
    width = merged.cols
    if width % num_splits:
        raise ConfigError(f"cannot cut width {width} into {num_splits} equal splits")
    ds = width // num_splits
    return [merged[..., a * ds:(a + 1) * ds] for a in range(num_splits)]


def mha_split(head_outputs: list[Tensor], spec: SplitSpec, role: str = "teacher", layer: int = 1) -> list[Tensor]:
    """Group one layer's head outputs into ``spec.num_splits`` tensors."""
    a_h, a_s = len(head_outputs), spec.num_splits
    if spec.mode == "concat":
        return _chunk_columns(concat(head_outputs, axis=-1), a_s)
    if a_h % a_s:
        raise ConfigError(f"{a_h} heads cannot be grouped into {a_s} splits")
    g = a_h // a_s
    groups = [head_outputs[a * g:(a + 1) * g] for a in range(a_s)]
    if spec.mode == "average":
        out = []
        for grp in groups:
            acc = grp[0]
            for t in grp[1:]:
                acc = acc + t
            out.append(acc * (1.0 / g))
        return out
    return [grp[spec.random_choice(role, layer, a, g)] for a, grp in enumerate(groups)]


def _layer_splits(out: EncoderOutputs, layer: int, spec: SplitSpec, role: str) -> list[Tensor]:
    if spec.mode == "concat":
        return _chunk_columns(out.attn_concat[layer - 1], spec.num_splits)
    return mha_split(out.head_outputs(layer), spec, role, layer)


# -- relation helpers ----------------------------------------------------------
def relation_matrix(x: Tensor, d: float | None = None, mask=None) -> Tensor:
    """``softmax(X X^T / sqrt(d))`` with masked key columns at -inf.

    ``d`` defaults to the column count of ``x``.
    """
    d = x.cols if d is None else d
    if not d > 0:
        raise ShapeError(f"relation_matrix: scale dim must be positive, got {d}")
    scores = (x @ x.T) * (1.0 / np.sqrt(d))
    key_mask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        key_mask = mask[..., None, :]
    return softmax_rows(scores, key_mask)


def _row_mean(values: Tensor, mask) -> Tensor:
    """Mean over unmasked rows per sample, then mean over the batch."""
    if mask is None:
        return values.mean()
    m = np.asarray(mask, dtype=np.float64)
    if values.shape != m.shape:
        raise ShapeError(f"row values {values.shape} do not match mask {m.shape}")
    if m.ndim == 1:
        return (values * (m / m.sum())).sum()
    weights = m / m.sum(axis=-1, keepdims=True) / m.shape[0]
    return (values * weights).sum()


def _relation_kl(x_t: Tensor, x_s: Tensor, mask, d_t=None, d_s=None) -> Tensor:
    r_t = relation_matrix(x_t, d_t, mask)
    r_s = relation_matrix(x_s, d_s, mask)
    return _row_mean(kl_rows(r_t, r_s), mask)


def _check_tokens(a: Tensor, b: Tensor) -> None:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"token-count mismatch: teacher {a.shape} vs student {b.shape}")


# -- the six losses ------------------------------------------------------------
def loss_emb(e_t: Tensor, e_s: Tensor, mask=None, d_t: float | None = None, d_s: float | None = None) -> Tensor:
    """Token-similarity KL between teacher and student embedding outputs.

    ``d_t``/``d_s`` are the similarity scale dims (default: hidden widths).
    """
    _check_tokens(e_t, e_s)
    return _relation_kl(e_t.detach(), e_s, mask, d_t, d_s)


def _split_relation_loss(t_splits: list[Tensor], s_splits: list[Tensor], mask) -> Tensor:
    if len(t_splits) != len(s_splits):
        raise ConfigError(f"teacher has {len(t_splits)} splits, student {len(s_splits)}")
    total = None
    for x_t, x_s in zip(t_splits, s_splits):
        term = _relation_kl(x_t.detach(), x_s, mask)
        total = term if total is None else total + term
    return total * (1.0 / len(t_splits))


def loss_mha(teacher_out: EncoderOutputs, student_out: EncoderOutputs, cfg: "DistillConfig", mask=None) -> Tensor:
    """Self-attention relation KL over MHA-splits, summed over mapped layers."""
    mask = student_out.mask if mask is None else mask
    cfg.split.validate(teacher_out.config, student_out.config)
    cfg.layer_map.validate(student_out.config.num_layers, teacher_out.config.num_layers)
    total = None
    for n, m in cfg.layer_map.pairs:
        t_splits = _layer_splits(teacher_out, m, cfg.split, "teacher")
        s_splits = _layer_splits(student_out, n, cfg.split, "student")
        term = _split_relation_loss(t_splits, s_splits, mask)
        total = term if total is None else total + term
    return total


def _masked_mse(pred: Tensor, target: Tensor, mask) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"projected student {pred.shape} does not match teacher {target.shape}")
    d = pred - target
    sq = (d * d).sum(axis=-1)
    return _row_mean(sq, mask) * (1.0 / target.cols)


def _feature_loss(pairs, t_tensors, s_tensors, w: Tensor, mask) -> Tensor:
    total = None
    for n, m in pairs:
        h_s, h_t = s_tensors[n - 1], t_tensors[m - 1].detach()
        if h_s.cols != w.rows or h_t.cols != w.cols:
            raise ShapeError(f"projection {w.shape} incompatible with student {h_s.shape} / teacher {h_t.shape}")
        term = _masked_mse(h_s @ w, h_t, mask)
        total = term if total is None else total + term
    return total


def loss_ffn(teacher_out: EncoderOutputs, student_out: EncoderOutputs, layer_map: LayerMap, w_h: Tensor, mask=None) -> Tensor:
    """Sum over mapped layers of MSE(H_n^S W_h, H_m^T), padding excluded."""
    mask = student_out.mask if mask is None else mask
    return _feature_loss(layer_map.pairs, teacher_out.hidden_states, student_out.hidden_states, w_h, mask)


def loss_ss(g_t: Tensor, g_s: Tensor, d_t: float | None = None, d_s: float | None = None) -> Tensor:
    """Sample-similarity KL over the batch's ``b x b`` relation matrices."""
    if g_t.rows != g_s.rows:
        raise ShapeError(f"batch mismatch: teacher {g_t.rows} vs student {g_s.rows}")
    return _relation_kl(g_t.detach(), g_s, None, d_t, d_s)


def loss_sc(g_t: Tensor, g_s: Tensor, labels, w_g: Tensor, rho: float = DEFAULT_RHO, normalize: bool = True) -> Tensor:
    """Supervised contrastive loss over stacked student/teacher views.

    Rows are ``[G_S W_g; G_T]``; each anchor's positives are the other rows
    sharing its label.  Anchors without positives are skipped.
    """
    if not rho > 0:
        raise ConfigError(f"rho must be positive, got {rho!r}")
    labels = np.asarray(labels).reshape(-1)
    b = g_t.rows
    if g_s.rows != b or labels.size != b:
        raise ShapeError(f"batch mismatch: teacher {g_t.rows}, student {g_s.rows}, labels {labels.size}")
    h = concat([g_s @ w_g, g_t.detach()], axis=0)
    if normalize:
        h = h / sqrt((h * h).sum(axis=-1, keepdims=True) + _NORM_EPS)
    sim = (h @ h.T) * (1.0 / rho)
    not_self = ~np.eye(2 * b, dtype=bool)
    logp = log_softmax_rows(sim, not_self)
    y = np.concatenate([labels, labels])
    pos = (y[:, None] == y[None, :]) & not_self
    counts = pos.sum(axis=1)
    valid = counts > 0
    if not valid.any():
        raise ConfigError("no anchor has a positive pair")
    weights = np.where(valid[:, None], pos / np.maximum(counts, 1)[:, None], 0.0) / valid.sum()
    return (logp * weights).sum() * -1.0


def loss_kd(z_t: Tensor, z_s: Tensor, tau: float = DEFAULT_TAU, task_kind: str = "sequence", mask=None) -> Tensor:
    """KL between temperature-softened teacher and student class distributions."""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau!r}")
    if z_t.shape != z_s.shape:
        raise ShapeError(f"logit shape mismatch: teacher {z_t.shape} vs student {z_s.shape}")
    p = softmax_rows(z_t.detach() * (1.0 / tau))
    q = softmax_rows(z_s * (1.0 / tau))
    kl = kl_rows(p, q)
    if task_kind == "token" and mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        return (kl * (m / m.sum())).sum()
    return kl.mean()


# -- configuration & stage objectives ------------------------------------------
@dataclass
class Projections:
    """Learnable student-to-teacher maps.

    ``w_h`` serves the FFN feature loss, ``w_g`` the contrastive loss and
    ``w_a`` the feature loss when it is placed on the MHA sub-layer.
    """

    w_h: Tensor
    w_g: Tensor
    w_a: Tensor

    @classmethod
    def init(cls, student_dim: int, teacher_dim: int, seed: int = 0, std: float = 0.02) -> "Projections":
        rng = np.random.default_rng([seed, 7])
        make = lambda: Tensor(_trunc_normal(rng, (student_dim, teacher_dim), std), requires_grad=True)  # noqa: E731
        return cls(make(), make(), make())

    @classmethod
    def identity(cls, dim: int) -> "Projections":
        return cls(*(Tensor(np.eye(dim), requires_grad=True) for _ in range(3)))

    def tensors(self) -> dict[str, Tensor]:
        return {"w_h": self.w_h, "w_g": self.w_g, "w_a": self.w_a}


@dataclass
class DistillConfig:
    layer_map: LayerMap
    split: SplitSpec
    rho: float = DEFAULT_RHO
    tau: float = DEFAULT_TAU
    stage1_terms: tuple[str, ...] = STAGE1_TERMS
    stage2_terms: tuple[str, ...] | None = None
    task_kind: str = "sequence"
    normalize_sc: bool = True
    mha_sublayer: str = "relation"
    ffn_sublayer: str = "feature"

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho!r}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau!r}")
        if self.stage2_terms is None:
            self.stage2_terms = STAGE2_TERMS if self.task_kind == "sequence" else ("kd",)
        self.stage1_terms = tuple(self.stage1_terms)
        self.stage2_terms = tuple(self.stage2_terms)
        for t in self.stage1_terms:
            if t not in STAGE1_TERMS:
                raise ConfigError(f"unknown stage-1 term {t!r}; choose from {STAGE1_TERMS}")
        for t in self.stage2_terms:
            if t not in STAGE2_TERMS:
                raise ConfigError(f"unknown stage-2 term {t!r}; choose from {STAGE2_TERMS}")
        if self.task_kind == "token" and {"ss", "sc"} & set(self.stage2_terms):
            raise ConfigError("token tasks use only the kd term in stage 2 (ss and sc need a sample label)")
        if self.mha_sublayer not in SUBLAYER_LOSSES or self.ffn_sublayer not in SUBLAYER_LOSSES:
            raise ConfigError(f"sub-layer losses must be in {SUBLAYER_LOSSES}")

    @classmethod
    def for_models(cls, teacher: ModelConfig, student: ModelConfig, num_splits: int | None = None, **kw) -> "DistillConfig":
        """Uniform layer map and ``A_s = A_h^S`` unless given."""
        split = kw.pop("split", None) or SplitSpec(num_splits or student.num_heads, kw.pop("mode", "concat"), kw.pop("rng_seed", 0))
        cfg = cls(uniform_layer_map(student.num_layers, teacher.num_layers), split, task_kind=student.task_kind, **kw)
        cfg.validate(teacher, student)
        return cfg

    def validate(self, teacher: ModelConfig, student: ModelConfig) -> None:
        if teacher.task_kind != student.task_kind or teacher.task_kind != self.task_kind:
            raise ConfigError(f"task kinds differ: teacher {teacher.task_kind}, student {student.task_kind}, distill {self.task_kind}")
        if teacher.num_classes != student.num_classes:
            raise ConfigError(f"class counts differ: teacher {teacher.num_classes}, student {student.num_classes}")
        self.layer_map.validate(student.num_layers, teacher.num_layers)
        self.split.validate(teacher, student)


@dataclass
class LossReport:
    """Per-term values of one objective evaluation.

    ``objective`` is the differentiable total; ``terms`` and ``total`` are
    plain floats for logging.  The ``mha`` and ``ffn`` entries name the
    sub-layer the term is applied to.
    """

    stage: str
    terms: dict[str, float]
    total: float
    objective: Tensor = field(repr=False)

    def to_record(self) -> dict[str, float]:
        rec = {f"loss_{k}": v for k, v in self.terms.items()}
        rec[f"total_{self.stage}"] = self.total
        return rec


def _mha_sublayer_term(t_out, s_out, cfg: DistillConfig, proj: Projections) -> Tensor:
    if cfg.mha_sublayer == "relation":
        return loss_mha(t_out, s_out, cfg)
    return _feature_loss(cfg.layer_map.pairs, t_out.attn_concat, s_out.attn_concat, proj.w_a, s_out.mask)


def _ffn_sublayer_term(t_out, s_out, cfg: DistillConfig, proj: Projections) -> Tensor:
    if cfg.ffn_sublayer == "feature":
        return loss_ffn(t_out, s_out, cfg.layer_map, proj.w_h, s_out.mask)
    total = None
    for n, m in cfg.layer_map.pairs:
        t_chunks = _chunk_columns(t_out.hidden_states[m - 1], cfg.split.num_splits)
        s_chunks = _chunk_columns(s_out.hidden_states[n - 1], cfg.split.num_splits)
        term = _split_relation_loss(t_chunks, s_chunks, s_out.mask)
        total = term if total is None else total + term
    return total


def compute_terms(t_out: EncoderOutputs, s_out: EncoderOutputs, cfg: DistillConfig, proj: Projections,
                  terms, labels=None) -> dict[str, Tensor]:
    """Evaluate the requested loss terms; returns name -> 1x1 tensor."""
    out: dict[str, Tensor] = {}
    mask = s_out.mask
    for name in terms:
        if name == "emb":
            out[name] = loss_emb(t_out.embeddings, s_out.embeddings, mask)
        elif name == "mha":
            out[name] = _mha_sublayer_term(t_out, s_out, cfg, proj)
        elif name == "ffn":
            out[name] = _ffn_sublayer_term(t_out, s_out, cfg, proj)
        elif name == "ss":
            out[name] = loss_ss(t_out.pooled, s_out.pooled)
        elif name == "sc":
            if labels is None:
                raise ConfigError("the sc term needs labels")
            out[name] = loss_sc(t_out.pooled, s_out.pooled, labels, proj.w_g, cfg.rho, cfg.normalize_sc)
        elif name == "kd":
            out[name] = loss_kd(t_out.logits, s_out.logits, cfg.tau, cfg.task_kind, mask)
        else:
            raise ConfigError(f"unknown loss term {name!r}")
    return out


def _report(stage: str, values: dict[str, Tensor]) -> LossReport:
    if not values:
        raise ConfigError(f"{stage}: no loss terms enabled")
    objective = None
    for v in values.values():
        objective = v if objective is None else objective + v
    return LossReport(stage, {k: v.item() for k, v in values.items()}, objective.item(), objective)


def stage1_loss(t_out: EncoderOutputs, s_out: EncoderOutputs, cfg: DistillConfig, proj: Projections) -> LossReport:
    """Embedding + MHA + FFN distillation (unweighted sum of enabled terms)."""
    return _report("stage1", compute_terms(t_out, s_out, cfg, proj, cfg.stage1_terms))


def stage2_loss(t_out: EncoderOutputs, s_out: EncoderOutputs, labels, cfg: DistillConfig, proj: Projections) -> LossReport:
    """Sample-similarity + contrastive + soft-label distillation."""
    return _report("stage2", compute_terms(t_out, s_out, cfg, proj, cfg.stage2_terms, labels))


def one_stage_loss(t_out: EncoderOutputs, s_out: EncoderOutputs, labels, cfg: DistillConfig, proj: Projections) -> LossReport:
    """Sum of every enabled term of both stages."""
    terms = tuple(cfg.stage1_terms) + tuple(cfg.stage2_terms)
    return _report("one_stage", compute_terms(t_out, s_out, cfg, proj, terms, labels))

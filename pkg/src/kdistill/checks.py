"""Standalone verification suites: oracle equivalence, gradients, identities.

Used by the ``losscheck`` experiment kind and by the acceptance tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracles
from .distill import (
    DistillConfig,
    LayerMap,
    Projections,
    SplitSpec,
    loss_emb,
    loss_ffn,
    loss_kd,
    loss_mha,
    loss_sc,
    loss_ss,
    stage1_loss,
    stage2_loss,
    uniform_layer_map,
)
from .model import Batch, EncoderOutputs, Model, ModelConfig, encoder_forward
from .numerics import Tensor, grad_check, no_grad


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} (tol {self.tolerance:g})"


def _fake_outputs(rng, b, n, layers, heads, dk, mask, classes=3, kind="sequence") -> EncoderOutputs:
    d = heads * dk
    cfg = ModelConfig(layers, d, 1, heads, 2, n, classes, kind)
    logits_shape = (b, classes) if kind == "sequence" else (b, n, classes)
    return EncoderOutputs(
        config=cfg,
        mask=mask,
        embeddings=Tensor(rng.normal(size=(b, n, d)), requires_grad=True),
        attn_concat=[Tensor(rng.normal(size=(b, n, d)), requires_grad=True) for _ in range(layers)],
        hidden_states=[Tensor(rng.normal(size=(b, n, d)), requires_grad=True) for _ in range(layers)],
        attn_hidden=[],
        pooled=Tensor(rng.normal(size=(b, d)), requires_grad=True),
        logits=Tensor(rng.normal(size=logits_shape) * 2, requires_grad=True),
    )


def _random_mask(rng, b, n) -> np.ndarray:
    mask = rng.random((b, n)) < 0.75
    mask[:, 0] = True
    return mask


def _heads(out: EncoderOutputs) -> list[list[np.ndarray]]:
    return [[h.data for h in out.head_outputs(l)] for l in range(1, out.config.num_layers + 1)]


def oracle_instance(rng) -> dict[str, tuple[float, float]]:
    """One random toy instance: ``{term: (implementation, oracle)}``."""
    b, n = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    a_s = int(rng.integers(1, 3))
    t_heads, s_heads = a_s * int(rng.integers(1, 3)), a_s * int(rng.integers(1, 3))
    t_dk = int(rng.integers(1, 8 // t_heads + 1))
    s_dk = int(rng.integers(1, 8 // s_heads + 1))
    n_layers = int(rng.integers(1, 3))
    m_layers = n_layers * int(rng.integers(1, 3))
    mask = _random_mask(rng, b, n)
    kind = "sequence" if rng.random() < 0.7 else "token"
    t = _fake_outputs(rng, b, n, m_layers, t_heads, t_dk, mask, kind=kind)
    s = _fake_outputs(rng, b, n, n_layers, s_heads, s_dk, mask, kind=kind)
    mode = ("concat", "average", "random")[int(rng.integers(0, 3))]
    cfg = DistillConfig(uniform_layer_map(n_layers, m_layers), SplitSpec(a_s, mode, int(rng.integers(0, 100))),
                        task_kind=kind)
    d_t, d_s = t.config.hidden_dim, s.config.hidden_dim
    w = Tensor(rng.normal(size=(d_s, d_t)), requires_grad=True)
    labels = rng.integers(0, 3, size=b)
    rho = float(rng.choice([0.07, 0.5, 1.0]))
    tau = float(rng.choice([1.0, 2.0, 0.5]))
    pairs = cfg.layer_map.pairs
    pick_t = lambda layer, a, g: cfg.split.random_choice("teacher", layer, a, g)  # noqa: E731
    pick_s = lambda layer, a, g: cfg.split.random_choice("student", layer, a, g)  # noqa: E731
    return {
        "emb": (loss_emb(t.embeddings, s.embeddings, mask).item(), oracles.emb(t.embeddings.data, s.embeddings.data, mask)),
        "mha": (loss_mha(t, s, cfg).item(),
                oracles.mha(_heads(t), _heads(s), pairs, a_s, mode, mask, pick_t, pick_s)),
        "ffn": (loss_ffn(t, s, cfg.layer_map, w, mask).item(),
                oracles.ffn([h.data for h in t.hidden_states], [h.data for h in s.hidden_states], pairs, w.data, mask)),
        "ss": (loss_ss(t.pooled, s.pooled).item(), oracles.ss(t.pooled.data, s.pooled.data)),
        "sc": (loss_sc(t.pooled, s.pooled, labels, w, rho).item(),
               oracles.sc(t.pooled.data, s.pooled.data, labels, w.data, rho)),
        "kd": (loss_kd(t.logits, s.logits, tau, kind, mask).item(),
               oracles.kd(t.logits.data, s.logits.data, tau, kind, mask)),
    }


def oracle_equivalence(num_instances: int = 100, seed: int = 0, tol: float = 1e-10) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(num_instances):
        for term, (impl, ref) in oracle_instance(rng).items():
            worst[term] = max(worst.get(term, 0.0), abs(impl - ref))
    return [CheckResult(f"oracle[{k}] max abs diff over {num_instances}", v, tol, v <= tol) for k, v in worst.items()]


# -- gradient checks on a small real model -------------------------------------
def gradcheck_setup(seed: int = 0):
    """Teacher (4 layers, d_h=12) and 2-layer d_h=8 student on one batch."""
    teacher_cfg = ModelConfig(4, 12, 16, 4, 10, 5, 3)
    student_cfg = ModelConfig(2, 8, 16, 2, 10, 5, 3)
    teacher = Model.init(teacher_cfg, seed).freeze()
    # Spread the weights so relations are far from uniform.
    for t in teacher.params.values():
        t.data = t.data * 20 if t.data.std() > 0 else t.data
    student = Model.init(student_cfg, seed + 1)
    for t in student.params.values():
        t.data = t.data * 20 if t.data.std() > 0 else t.data
    rng = np.random.default_rng(seed)
    ids = rng.integers(1, 10, size=(3, 5))
    mask = _random_mask(rng, 3, 5)
    batch = Batch(ids, mask, np.array([0, 1, 0]))
    cfg = DistillConfig.for_models(teacher_cfg, student_cfg, rho=0.5)
    proj = Projections.init(8, 12, seed, std=0.3)
    with no_grad():
        t_out = encoder_forward(teacher, batch)
    return teacher, student, batch, cfg, proj, t_out


def _max_grad_err(fn, tensors, h) -> float:
    worst = 0.0
    for t in tensors:
        worst = max(worst, grad_check(lambda _x: fn(), t, h))
    return worst


def gradient_checks(seed: int = 0, h: float = 1e-4, tol: float = 1e-4, composite_tol: float = 1e-3) -> list[CheckResult]:
    teacher, student, batch, cfg, proj, t_out = gradcheck_setup(seed)
    params = student.parameters()

    def s_out():
        return encoder_forward(student, batch)

    single = {
        "emb": lambda: loss_emb(t_out.embeddings, s_out().embeddings, batch.attention_mask),
        "mha": lambda: loss_mha(t_out, s_out(), cfg),
        "ffn": lambda: loss_ffn(t_out, s_out(), cfg.layer_map, proj.w_h),
        "ss": lambda: loss_ss(t_out.pooled, s_out().pooled),
        "sc": lambda: loss_sc(t_out.pooled, s_out().pooled, batch.labels, proj.w_g, cfg.rho),
        "kd": lambda: loss_kd(t_out.logits, s_out().logits, cfg.tau),
    }
    results = []
    for name, fn in single.items():
        err = _max_grad_err(fn, params, h)
        results.append(CheckResult(f"grad[{name}] vs student params", err, tol, err < tol))
    w_h_err = grad_check(lambda _x: single["ffn"](), proj.w_h, h)
    results.append(CheckResult("grad[ffn] vs W_h", w_h_err, tol, w_h_err < tol))
    w_g_err = grad_check(lambda _x: single["sc"](), proj.w_g, h)
    results.append(CheckResult("grad[sc] vs W_g", w_g_err, tol, w_g_err < tol))
    s1 = _max_grad_err(lambda: stage1_loss(t_out, s_out(), cfg, proj).objective, params + [proj.w_h], h)
    results.append(CheckResult("grad[stage1 objective] end-to-end", s1, composite_tol, s1 < composite_tol))
    s2 = _max_grad_err(lambda: stage2_loss(t_out, s_out(), batch.labels, cfg, proj).objective, params + [proj.w_g], h)
    results.append(CheckResult("grad[stage2 objective] end-to-end", s2, composite_tol, s2 < composite_tol))
    teacher_clean = all(t.grad is None or not np.any(t.grad) for t in teacher.params.values())
    results.append(CheckResult("teacher gradients absent", 0.0 if teacher_clean else 1.0, 0.0, teacher_clean))
    return results


# -- zero at identity ----------------------------------------------------------
def identity_checks(seed: int = 0, tol: float = 1e-9) -> list[CheckResult]:
    """Student == teacher, identity projections: every loss vanishes."""
    cfg_m = ModelConfig(2, 8, 16, 4, 10, 5, 3)
    model = Model.init(cfg_m, seed)
    for t in model.params.values():
        t.data = t.data * 20 if t.data.std() > 0 else t.data
    twin = model.clone().freeze()
    rng = np.random.default_rng(seed)
    results = []
    for b in (1, 3):
        batch = Batch(rng.integers(1, 10, size=(b, 5)), _random_mask(rng, b, 5), rng.integers(0, 3, size=b))
        t_out, s_out = encoder_forward(twin, batch), encoder_forward(model, batch)
        dcfg = DistillConfig(LayerMap(((1, 1), (2, 2))), SplitSpec(4))
        proj = Projections.identity(8)
        values = {
            "emb": loss_emb(t_out.embeddings, s_out.embeddings, batch.attention_mask).item(),
            "mha": loss_mha(t_out, s_out, dcfg).item(),
            "ffn": loss_ffn(t_out, s_out, dcfg.layer_map, proj.w_h).item(),
            "ss": loss_ss(t_out.pooled, s_out.pooled).item(),
            "kd": loss_kd(t_out.logits, s_out.logits).item(),
        }
        if b == 1:
            values["sc"] = loss_sc(t_out.pooled, s_out.pooled, batch.labels, proj.w_g).item()
        for k, v in values.items():
            results.append(CheckResult(f"zero-at-identity[{k}] b={b}", abs(v), tol, abs(v) <= tol))
    return results


def run_all(num_instances: int = 100, seed: int = 0) -> list[CheckResult]:
    return oracle_equivalence(num_instances, seed) + gradient_checks(seed) + identity_checks(seed)

"""Brute-force reference evaluations of the distillation losses.

Plain Python loops over nested lists with the ``math`` module only.  Nothing
here calls into :mod:`kdistill.numerics` or :mod:`kdistill.distill`; inputs
may be numpy arrays, which are converted to lists on entry.
"""
from __future__ import annotations

import math


def _lst(x):
    return x.tolist() if hasattr(x, "tolist") else x


def dot(u, v) -> float:
    return sum(a * b for a, b in zip(u, v))


def vecmat(u, w) -> list[float]:
    cols = len(w[0])
    return [sum(u[k] * w[k][j] for k in range(len(u))) for j in range(cols)]


def softmax(logits, keep=None) -> list[float]:
    keep = keep or [True] * len(logits)
    top = max(z for z, k in zip(logits, keep) if k)
    e = [math.exp(z - top) if k else 0.0 for z, k in zip(logits, keep)]
    s = sum(e)
    return [v / s for v in e]


def kl(p, q) -> float:
    return sum(pi * math.log(pi / max(qi, 1e-12)) for pi, qi in zip(p, q) if pi > 0)


def similarity(x, d, keep=None) -> list[list[float]]:
    """Row-softmax of pairwise dot products scaled by 1/sqrt(d)."""
    n = len(x)
    keep = keep or [True] * n
    return [softmax([dot(x[i], x[j]) / math.sqrt(d) for j in range(n)], keep) for i in range(n)]


def _masks(mask, b, n):
    if mask is None:
        return [[True] * n for _ in range(b)]
    return [[bool(v) for v in row] for row in _lst(mask)]


def _sample_relation_kl(xt, xs, keep, dt=None, ds=None) -> float:
    rt = similarity(xt, dt or len(xt[0]), keep)
    rs = similarity(xs, ds or len(xs[0]), keep)
    rows = [kl(rt[i], rs[i]) for i in range(len(xt)) if keep[i]]
    return sum(rows) / len(rows)


def emb(e_t, e_s, mask=None, d_t=None, d_s=None) -> float:
    """``e_t``/``e_s`` are ``b x |x| x d`` arrays."""
    e_t, e_s = _lst(e_t), _lst(e_s)
    masks = _masks(mask, len(e_t), len(e_t[0]))
    return sum(_sample_relation_kl(e_t[s], e_s[s], masks[s], d_t, d_s) for s in range(len(e_t))) / len(e_t)


def _cut(row, num_splits, a):
    w = len(row) // num_splits
    return row[a * w:(a + 1) * w]


def _group(heads, s, i, a, num_splits, mode, pick):
    """MHA-split ``a`` of token ``i`` in sample ``s``; ``heads[h][s][i]`` is a head vector."""
    if mode == "concat":
        full = [v for h in range(len(heads)) for v in heads[h][s][i]]
        return _cut(full, num_splits, a)
    g = len(heads) // num_splits
    members = list(range(a * g, (a + 1) * g))
    if mode == "average":
        dk = len(heads[0][s][i])
        return [sum(heads[h][s][i][k] for h in members) / g for k in range(dk)]
    return list(heads[members[pick(a, g)]][s][i])


def mha(t_heads, s_heads, pairs, num_splits, mode="concat", mask=None, t_pick=None, s_pick=None) -> float:
    """``t_heads[m-1][h]`` is a ``b x |x| x d_k`` array for teacher layer ``m``.

    ``t_pick(layer, split, group_size)`` gives the random-mode head choice.
    """
    t_heads = [[_lst(h) for h in layer] for layer in t_heads]
    s_heads = [[_lst(h) for h in layer] for layer in s_heads]
    b, n = len(t_heads[0][0]), len(t_heads[0][0][0])
    masks = _masks(mask, b, n)
    total = 0.0
    for ln, lm in pairs:
        th, sh = t_heads[lm - 1], s_heads[ln - 1]
        tp = (lambda a, g, lm=lm: t_pick(lm, a, g)) if t_pick else None
        sp = (lambda a, g, ln=ln: s_pick(ln, a, g)) if s_pick else None
        per_sample = []
        for s in range(b):
            acc = 0.0
            for a in range(num_splits):
                ot = [_group(th, s, i, a, num_splits, mode, tp) for i in range(n)]
                os_ = [_group(sh, s, i, a, num_splits, mode, sp) for i in range(n)]
                acc += _sample_relation_kl(ot, os_, masks[s])
            per_sample.append(acc / num_splits)
        total += sum(per_sample) / b
    return total


def ffn(t_hidden, s_hidden, pairs, w_h, mask=None) -> float:
    """``t_hidden[m-1]`` is a ``b x |x| x d_T`` array."""
    t_hidden = [_lst(h) for h in t_hidden]
    s_hidden = [_lst(h) for h in s_hidden]
    w = _lst(w_h)
    b, n = len(t_hidden[0]), len(t_hidden[0][0])
    masks = _masks(mask, b, n)
    total = 0.0
    for ln, lm in pairs:
        per_sample = []
        for s in range(b):
            sq, count = 0.0, 0
            for i in range(n):
                if not masks[s][i]:
                    continue
                proj = vecmat(s_hidden[ln - 1][s][i], w)
                target = t_hidden[lm - 1][s][i]
                sq += sum((p - t) ** 2 for p, t in zip(proj, target))
                count += len(target)
            per_sample.append(sq / count)
        total += sum(per_sample) / b
    return total


def ss(g_t, g_s, d_t=None, d_s=None) -> float:
    g_t, g_s = _lst(g_t), _lst(g_s)
    return _sample_relation_kl(g_t, g_s, [True] * len(g_t), d_t, d_s)


def sc(g_t, g_s, labels, w_g, rho=0.07, normalize=True) -> float:
    g_t, g_s, w = _lst(g_t), _lst(g_s), _lst(w_g)
    labels = _lst(labels)
    b = len(g_t)
    rows = [vecmat(g, w) for g in g_s] + [list(g) for g in g_t]
    if normalize:
        rows = [[v / math.sqrt(dot(r, r)) for v in r] for r in rows]
    y = list(labels) + list(labels)
    anchors = []
    for i in range(2 * b):
        others = [a for a in range(2 * b) if a != i]
        positives = [p for p in others if y[p] == y[i]]
        if not positives:
            continue
        denom = sum(math.exp(dot(rows[i], rows[a]) / rho) for a in others)
        terms = [-math.log(math.exp(dot(rows[i], rows[p]) / rho) / denom) for p in positives]
        anchors.append(sum(terms) / len(positives))
    return sum(anchors) / len(anchors)


def kd(z_t, z_s, tau=1.0, task_kind="sequence", mask=None) -> float:
    z_t, z_s = _lst(z_t), _lst(z_s)
    if task_kind == "sequence":
        vals = [kl(softmax([v / tau for v in zt]), softmax([v / tau for v in zs])) for zt, zs in zip(z_t, z_s)]
        return sum(vals) / len(vals)
    masks = _masks(mask, len(z_t), len(z_t[0]))
    vals = []
    for s in range(len(z_t)):
        for i in range(len(z_t[s])):
            if masks[s][i]:
                vals.append(kl(softmax([v / tau for v in z_t[s][i]]), softmax([v / tau for v in z_s[s][i]])))
    return sum(vals) / len(vals)

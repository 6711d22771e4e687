"""Synthetic planted-rule classification tasks.

Token ids: 0 is padding, 1 is ``[CLS]`` (always at position 0).  For the
sequence task, ids ``2 .. 2+C-1`` are class markers and the label is the
marker that occurs most often (ties are never generated).  For the token
task the label at position ``t`` is ``(tok[t] + tok[t-1]) mod C``, with
``tok[-1]`` taken as 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import Batch, ConfigError, TASK_KINDS

PAD_ID = 0
CLS_ID = 1
FIRST_MARKER = 2


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "sequence"
    vocab_size: int = 32
    seq_len: int = 16
    num_classes: int = 2
    num_train: int = 2000
    num_eval: int = 1000
    noise_rate: float = 0.0
    seed: int = 0
    min_len: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if self.seq_len < 3:
            raise ConfigError(f"seq_len must be >= 3, got {self.seq_len}")
        if not 2 <= self.resolved_min_len <= self.seq_len:
            raise ConfigError(f"min_len must lie in [2, seq_len={self.seq_len}], got {self.min_len}")
        if self.vocab_size < FIRST_MARKER + self.num_classes + (1 if self.kind == "sequence" else 0):
            raise ConfigError(f"vocab_size {self.vocab_size} too small for {self.num_classes} classes")
        if self.num_train < 1 or self.num_eval < 1:
            raise ConfigError("num_train and num_eval must be >= 1")

    @property
    def resolved_min_len(self) -> int:
        return self.seq_len // 2 + 1 if self.min_len is None else self.min_len

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    kind: str
    num_classes: int
    token_ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    clean_labels: np.ndarray

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def batch(self, idx) -> Batch:
        return Batch(self.token_ids[idx], self.mask[idx], self.labels[idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.batch(order[start:start + batch_size])

    def num_batches(self, batch_size: int) -> int:
        return -(-len(self) // batch_size)


def sequence_rule(token_ids: np.ndarray, mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Label = most frequent marker id among unmasked positions."""
    counts = np.stack(
        [((token_ids == FIRST_MARKER + c) & mask).sum(axis=-1) for c in range(num_classes)], axis=-1
    )
    return counts.argmax(axis=-1)


def token_rule(token_ids: np.ndarray, mask: np.ndarray, num_classes: int) -> np.ndarray:
    prev = np.concatenate([np.zeros_like(token_ids[..., :1]), token_ids[..., :-1]], axis=-1)
    return np.where(mask, (token_ids + prev) % num_classes, 0)


def rule_labels(kind: str, token_ids: np.ndarray, mask: np.ndarray, num_classes: int) -> np.ndarray:
    rule = sequence_rule if kind == "sequence" else token_rule
    return rule(token_ids, mask, num_classes)


def _sample_sequence(rng, spec: SyntheticTaskSpec) -> np.ndarray:
    c = spec.num_classes
    length = int(rng.integers(spec.resolved_min_len, spec.seq_len + 1))
    body = length - 1
    ids = np.full(spec.seq_len, PAD_ID, dtype=np.int64)
    ids[0] = CLS_ID
    if spec.kind == "sequence":
        k_max = max(1, body // 2)
        while True:
            k = int(rng.integers(1, k_max + 1))
            markers = rng.integers(0, c, size=k)
            counts = np.bincount(markers, minlength=c)
            if (counts == counts.max()).sum() == 1:
                break
        fillers = rng.integers(FIRST_MARKER + c, spec.vocab_size, size=body - k)
        toks = np.concatenate([FIRST_MARKER + markers, fillers])
        ids[1:length] = rng.permutation(toks)
    else:
        ids[1:length] = rng.integers(FIRST_MARKER, spec.vocab_size, size=body)
    return ids


def generate_task(spec: SyntheticTaskSpec) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint train/eval splits; noise only touches train labels."""
    rng = np.random.default_rng([spec.seed, 11])
    total = spec.num_train + spec.num_eval
    seen: set[bytes] = set()
    rows = []
    attempts = 0
    while len(rows) < total:
        attempts += 1
        if attempts > 50 * total:
            raise ConfigError("could not draw enough distinct sequences; enlarge vocab_size or seq_len")
        ids = _sample_sequence(rng, spec)
        key = ids.tobytes()
        if key in seen:
            continue
        seen.add(key)
        rows.append(ids)
    ids = np.stack(rows)
    mask = ids != PAD_ID
    clean = rule_labels(spec.kind, ids, mask, spec.num_classes)
    noisy = clean.copy()
    n_tr = spec.num_train
    if spec.noise_rate > 0:
        tr = noisy[:n_tr]
        flip = rng.random(tr.shape) < spec.noise_rate
        shift = rng.integers(1, spec.num_classes, size=tr.shape)
        tr[flip] = (tr[flip] + shift[flip]) % spec.num_classes
        if spec.kind == "token":
            tr[~mask[:n_tr]] = 0
    kind, c = spec.kind, spec.num_classes
    train = Dataset(kind, c, ids[:n_tr], mask[:n_tr], noisy[:n_tr], clean[:n_tr])
    evals = Dataset(kind, c, ids[n_tr:], mask[n_tr:], clean[n_tr:], clean[n_tr:])
    return train, evals

"""A small transformer encoder that exposes every intermediate distillation needs."""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .numerics import (
    Tensor,
    ShapeError,
    ValidationError,
    gelu,
    no_grad,
    softmax_rows,
    sqrt,
    take_rows,
)

TASK_KINDS = ("sequence", "token")
LN_EPS = 1e-12

CKPT_MAGIC = b"KDCKPT"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    intermediate_dim: int
    num_heads: int
    vocab_size: int
    max_seq_len: int
    num_classes: int
    task_kind: str = "sequence"
    init_std: float = 0.02

    def __post_init__(self):
        for f in ("num_layers", "hidden_dim", "intermediate_dim", "num_heads", "vocab_size", "max_seq_len", "num_classes"):
            v = getattr(self, f)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{f} must be an integer >= 1, got {v!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"num_heads ({self.num_heads}) must divide hidden_dim ({self.hidden_dim})"
            )
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if not self.init_std > 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            if k in ("task_kind",):
                out[k] = str(v)
            elif k == "init_std":
                out[k] = float(v)
            else:
                out[k] = int(v)
        return cls(**out)


@dataclass
class Batch:
    """Token ids ``(b, |x|)``, boolean mask ``(b, |x|)`` and labels.

    Labels are ``(b,)`` for sequence tasks and ``(b, |x|)`` for token tasks.
    """

    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.attention_mask = np.asarray(self.attention_mask, dtype=bool)
        if self.token_ids.ndim != 2 or self.token_ids.shape != self.attention_mask.shape:
            raise ShapeError(f"token_ids {self.token_ids.shape} and mask {self.attention_mask.shape} must be equal 2-D")
        if not self.attention_mask[:, 0].all():
            raise ValidationError("position 0 ([CLS]) must be unmasked in every sequence")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[1]


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(bad.sum())
        bad = np.abs(x) > 2.0
    return x * std


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Declared parameter shapes in canonical order."""
    d, f = config.hidden_dim, config.intermediate_dim
    shapes = {
        "token_embedding": (config.vocab_size, d),
        "position_embedding": (config.max_seq_len, d),
        "emb_ln.gamma": (1, d),
        "emb_ln.beta": (1, d),
    }
    for l in range(1, config.num_layers + 1):
        p = f"layers.{l}."
        shapes.update({
            p + "wq": (d, d),
            p + "wk": (d, d),
            p + "wv": (d, d),
            p + "wo": (d, d),
            p + "attn_ln.gamma": (1, d),
            p + "attn_ln.beta": (1, d),
            p + "ffn.w1": (d, f),
            p + "ffn.b1": (1, f),
            p + "ffn.w2": (f, d),
            p + "ffn.b2": (1, d),
            p + "ffn_ln.gamma": (1, d),
            p + "ffn_ln.beta": (1, d),
        })
    shapes["classifier.weight"] = (d, config.num_classes)
    shapes["classifier.bias"] = (1, config.num_classes)
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(r * c for r, c in param_shapes(config).values())


class Model:
    """Parameters of one encoder, keyed by dotted name."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ConfigError(f"parameter set mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".gamma"):
                data = np.ones(shape)
            elif name.endswith((".beta", ".b1", ".b2", ".bias")):
                data = np.zeros(shape)
            else:
                data = _trunc_normal(rng, shape, config.init_std)
            params[name] = Tensor(data, requires_grad=True)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self, prefix: str | tuple[str, ...] = "") -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    def named_parameters(self):
        return self.params.items()

    def encoder_parameters(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if not n.startswith("classifier.")]

    def freeze(self) -> "Model":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self) -> "Model":
        for t in self.params.values():
            t.requires_grad = True
        return self

    def clone(self) -> "Model":
        params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return Model(self.config, params)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            t.data = state[n].copy()

    def equals(self, other: "Model") -> bool:
        """Bitwise equality of config and every parameter."""
        if self.config != other.config or list(self.params) != list(other.params):
            return False
        return all(
            self.params[n].data.tobytes() == other.params[n].data.tobytes() for n in self.params
        )

    @property
    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())


@dataclass
class EncoderOutputs:
    """Forward-pass intermediates, batched along axis 0.

    ``embeddings`` is ``(b, |x|, d)``; ``attn_concat[l-1]`` holds the
    concatenation of the per-head outputs of layer ``l`` (before the output
    projection), ``attn_hidden[l-1]`` the MHA sub-layer output after residual
    and norm, and ``hidden_states[l-1]`` the layer output ``H_l``.
    """

    config: ModelConfig
    mask: np.ndarray
    embeddings: Tensor
    attn_concat: list[Tensor] = field(default_factory=list)
    attn_hidden: list[Tensor] = field(default_factory=list)
    hidden_states: list[Tensor] = field(default_factory=list)
    pooled: Tensor | None = None
    logits: Tensor | None = None

    def hidden(self, layer: int) -> Tensor:
        """``H_layer`` with 1-based layer index; 0 gives the embedding output."""
        return self.embeddings if layer == 0 else self.hidden_states[layer - 1]

    def head_outputs(self, layer: int) -> list[Tensor]:
        """Per-head outputs ``O_{layer,a}``, each ``(b, |x|, d_k)``."""
        merged = self.attn_concat[layer - 1]
        dk = self.config.head_dim
        return [merged[..., a * dk:(a + 1) * dk] for a in range(self.config.num_heads)]

    def all_head_outputs(self) -> list[list[Tensor]]:
        return [self.head_outputs(l) for l in range(1, len(self.attn_concat) + 1)]


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / sqrt(var + LN_EPS) * gamma + beta


def _check_batch(model: Model, batch: Batch) -> None:
    cfg = model.config
    if batch.seq_len > cfg.max_seq_len:
        raise ValidationError(f"sequence length {batch.seq_len} exceeds max_seq_len {cfg.max_seq_len}")
    if batch.token_ids.min() < 0 or batch.token_ids.max() >= cfg.vocab_size:
        raise ValidationError(f"token id out of range [0, {cfg.vocab_size})")


def embed(model: Model, batch: Batch) -> Tensor:
    """Token plus position embeddings, layer-normalized: ``(b, |x|, d)``."""
    _check_batch(model, batch)
    tok = take_rows(model["token_embedding"], batch.token_ids)
    pos = model["position_embedding"][: batch.seq_len]
    return layer_norm(tok + pos, model["emb_ln.gamma"], model["emb_ln.beta"])


def _key_mask(mask: np.ndarray) -> np.ndarray:
    # (b, |x|) -> broadcastable over (..., query, key)
    return mask[:, None, :] if mask.ndim == 2 else mask[None, :]


def attention_head(h_prev: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, mask=None) -> Tensor:
    """One head: ``softmax(Q K^T / sqrt(d_k)) V`` with masked key columns."""
    if wq.shape != wk.shape or wq.shape != wv.shape or h_prev.cols != wq.rows:
        raise ShapeError(f"attention_head: H {h_prev.shape} incompatible with projections {wq.shape}/{wk.shape}/{wv.shape}")
    q, k, v = h_prev @ wq, h_prev @ wk, h_prev @ wv
    scores = (q @ k.T) * (1.0 / np.sqrt(wq.cols))
    key_mask = None if mask is None else _key_mask(np.asarray(mask, dtype=bool))
    return softmax_rows(scores, key_mask) @ v


def _layer(model: Model, l: int, h_prev: Tensor, mask: np.ndarray):
    cfg = model.config
    if not 1 <= l <= cfg.num_layers:
        raise IndexError(f"layer index {l} outside [1, {cfg.num_layers}]")
    p = f"layers.{l}."
    b, n, d = h_prev.shape
    a, dk = cfg.num_heads, cfg.head_dim

    def heads(w):
        return (h_prev @ model[p + w]).reshape(b, n, a, dk).permute(0, 2, 1, 3)

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = (q @ k.T) * (1.0 / np.sqrt(dk))
    probs = softmax_rows(scores, mask[:, None, None, :])
    merged = (probs @ v).permute(0, 2, 1, 3).reshape(b, n, d)
    attn_hidden = layer_norm(h_prev + merged @ model[p + "wo"], model[p + "attn_ln.gamma"], model[p + "attn_ln.beta"])
    inner = gelu(attn_hidden @ model[p + "ffn.w1"] + model[p + "ffn.b1"])
    ffn_out = inner @ model[p + "ffn.w2"] + model[p + "ffn.b2"]
    hidden = layer_norm(attn_hidden + ffn_out, model[p + "ffn_ln.gamma"], model[p + "ffn_ln.beta"])
    return merged, attn_hidden, hidden


def layer_forward(model: Model, l: int, h_prev: Tensor, mask: np.ndarray) -> tuple[list[Tensor], Tensor]:
    """Run layer ``l`` (1-based) and return ``(head_outputs, H_l)``."""
    merged, _, hidden = _layer(model, l, h_prev, np.asarray(mask, dtype=bool))
    dk = model.config.head_dim
    return [merged[..., i * dk:(i + 1) * dk] for i in range(model.config.num_heads)], hidden


def encoder_forward(model: Model, batch: Batch) -> EncoderOutputs:
    cfg = model.config
    mask = batch.attention_mask
    h = embed(model, batch)
    out = EncoderOutputs(config=cfg, mask=mask, embeddings=h)
    for l in range(1, cfg.num_layers + 1):
        merged, attn_hidden, h = _layer(model, l, h, mask)
        out.attn_concat.append(merged)
        out.attn_hidden.append(attn_hidden)
        out.hidden_states.append(h)
    w, bias = model["classifier.weight"], model["classifier.bias"]
    out.pooled = h[:, 0, :]
    if cfg.task_kind == "sequence":
        out.logits = out.pooled @ w + bias
    else:
        out.logits = h @ w + bias
    return out


def predict(model: Model, batch: Batch) -> np.ndarray:
    """Argmax labels; ties go to the lowest class index."""
    with no_grad():
        logits = encoder_forward(model, batch).logits.data
    return logits.argmax(axis=-1)


# -- checkpoints ---------------------------------------------------------------
def save_checkpoint(model: Model, path) -> None:
    """Write ``model`` to ``path``.

    Layout: ``KDCKPT <version>\\n``, ``config <n>\\n`` and ``n`` lines of
    ``key=value``, ``tensors <k>\\n``, then per tensor a little-endian record
    ``u32 name_len, name (utf-8), u32 ndim, u64 dims..., f64 data...``.
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + b" %d\n" % CKPT_VERSION)
    cfg = model.config.to_dict()
    buf.write(b"config %d\n" % len(cfg))
    for k, v in cfg.items():
        buf.write(f"{k}={v!r}\n".encode() if isinstance(v, float) else f"{k}={v}\n".encode())
    buf.write(b"tensors %d\n" % len(model.params))
    for name, t in model.params.items():
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, requires_grad: bool = True) -> Model:
    data = Path(path).read_bytes()
    f = io.BytesIO(data)

    def line() -> str:
        raw = f.readline()
        if not raw.endswith(b"\n"):
            raise ValueError(f"{path}: truncated checkpoint header")
        return raw[:-1].decode()

    def read(n: int) -> bytes:
        chunk = f.read(n)
        if len(chunk) != n:
            raise ValueError(f"{path}: truncated checkpoint body")
        return chunk

    magic, _, version = line().partition(" ")
    if magic.encode() != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if int(version) != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    tag, _, count = line().partition(" ")
    if tag != "config":
        raise ValueError(f"{path}: expected config section")
    cfg = {}
    for _ in range(int(count)):
        k, _, v = line().partition("=")
        cfg[k] = v
    config = ModelConfig.from_dict(cfg)
    tag, _, count = line().partition(" ")
    if tag != "tensors":
        raise ValueError(f"{path}: expected tensors section")
    params = {}
    for _ in range(int(count)):
        (nlen,) = struct.unpack("<I", read(4))
        name = read(nlen).decode()
        (ndim,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{ndim}Q", read(8 * ndim))
        size = int(np.prod(shape))
        arr = np.frombuffer(read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(arr, requires_grad=requires_grad)
    return Model(config, params)

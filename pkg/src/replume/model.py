"""BERT-style encoder with a [CLS] classification head and an MLM head.

Blocks are post-layer-norm (original BERT ordering)::

    x = LN(x + Attn(x));  x = LN(x + FFN(x))

Parameters live in a plain ``dict[str, Tensor]`` whose keys and shapes are
fully determined by :func:`param_shapes`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import IdError, PositionError, ShapeError
from .tensor import Tensor
from .tokenizer import DEFAULT_MAX_LEN, EncodedSequence

NUM_CLASSES = 3
MASK_BIAS = -1e9

PRESETS: dict[str, dict[str, int]] = {
    "mini-base": {"hidden_dim": 64, "num_layers": 2, "num_heads": 4},
    "mini-large": {"hidden_dim": 128, "num_layers": 4, "num_heads": 4},
    "mini-multilingual": {"hidden_dim": 64, "num_layers": 2, "num_heads": 4},
}


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 0  # 0 -> 4 * hidden_dim
    max_len: int = DEFAULT_MAX_LEN
    num_classes: int = NUM_CLASSES
    dropout_rate: float = 0.1
    preset_name: str = "mini-base"

    def __post_init__(self):
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.max_len < 3:
            raise ValueError("max_len must be >= 3")
        if self.vocab_size < 6:
            raise ValueError("vocab_size must cover the specials plus at least one token")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**d)


def preset_config(name: str, vocab_size: int, **overrides) -> EncoderConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return EncoderConfig(vocab_size=vocab_size, preset_name=name, **{**PRESETS[name], **overrides})


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.word": (v, d),
        "embeddings.position": (config.max_len, d),
        "embeddings.segment": (2, d),
        "embeddings.norm.gain": (d,),
        "embeddings.norm.bias": (d,),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "attn_norm.gain"] = (d,)
        shapes[p + "attn_norm.bias"] = (d,)
        shapes[p + "ffn.in.weight"] = (d, f)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (f, d)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "ffn_norm.gain"] = (d,)
        shapes[p + "ffn_norm.bias"] = (d,)
    shapes["classifier.weight"] = (config.num_classes, d)
    shapes["classifier.bias"] = (config.num_classes,)
    shapes["mlm.weight"] = (v, d)
    shapes["mlm.bias"] = (v,)
    return shapes


Params = dict[str, Tensor]


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_params(config: EncoderConfig, rng: np.random.Generator | int = 0) -> Params:
    """Truncated-normal(0.02) weights, zero biases, unit layer-norm gains."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape, np.float32)
        elif name.endswith(".bias"):
            data = np.zeros(shape, np.float32)
        else:
            data = _truncated_normal(rng, shape, 0.02)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def check_params(params: Mapping[str, Tensor], config: EncoderConfig) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeError(f"parameter names differ from config (missing={missing}, extra={extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: shape {params[name].shape}, config expects {shape}")


def copy_params(params: Mapping[str, Tensor], dtype=None) -> Params:
    return {
        k: Tensor(v.data.astype(dtype or v.dtype, copy=True), requires_grad=True, name=k)
        for k, v in params.items()
    }


# --------------------------------------------------------------------------
# Batching
# --------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray  # (b, t) int64
    attention_mask: np.ndarray  # (b, t) 0/1
    segment_ids: np.ndarray  # (b, t)

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def make_batch(seqs: EncodedSequence | Sequence[EncodedSequence], trim: bool = False) -> Batch:
    """Stack sequences; ``trim`` drops trailing columns that are padding in every row."""
    if isinstance(seqs, EncodedSequence):
        seqs = [seqs]
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.attention_mask for s in seqs], dtype=np.int64)
    seg = np.array([s.segment_ids for s in seqs], dtype=np.int64)
    if trim:
        width = int(mask.sum(axis=1).max())
        ids, mask, seg = ids[:, :width], mask[:, :width], seg[:, :width]
    return Batch(ids, mask, seg)


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------


def embed(batch: Batch, params: Params, config: EncoderConfig, train: bool = False, rng=None) -> Tensor:
    """Word + position + segment embeddings, then layer norm and dropout."""
    if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= config.vocab_size):
        raise IdError(f"token id outside [0, {config.vocab_size})")
    t = batch.ids.shape[1]
    if t > config.max_len:
        raise ShapeError(f"sequence length {t} exceeds max_len {config.max_len}")
    x = T.take(params["embeddings.word"], batch.ids)
    x = x + T.getitem(params["embeddings.position"], slice(0, t))
    x = x + T.take(params["embeddings.segment"], batch.segment_ids)
    x = T.layer_norm(x, params["embeddings.norm.gain"], params["embeddings.norm.bias"])
    return T.dropout(x, config.dropout_rate, rng, train)


def _linear(x: Tensor, params: Params, name: str) -> Tensor:
    return x @ params[name + ".weight"] + params[name + ".bias"]


def attention_bias(attention_mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(b, t) 0/1 mask -> (b, 1, 1, t) additive bias."""
    m = np.asarray(attention_mask)
    return ((1 - m) * MASK_BIAS).astype(dtype)[:, None, None, :]


def multi_head_attention(
    x: Tensor,
    attention_mask: np.ndarray,
    params: Params,
    prefix: str,
    num_heads: int,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng=None,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over ``x`` of shape (b, t, d)."""
    b, t, d = x.shape
    hd = d // num_heads

    def heads(y: Tensor) -> Tensor:
        return T.transpose(T.reshape(y, (b, t, num_heads, hd)), (0, 2, 1, 3))

    q = heads(_linear(x, params, prefix + "query"))
    k = heads(_linear(x, params, prefix + "key"))
    v = heads(_linear(x, params, prefix + "value"))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    scores = scores + Tensor(attention_bias(attention_mask, scores.dtype))
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(T.dropout(weights, dropout_rate, rng, train), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = _linear(ctx, params, prefix + "output")
    return (out, weights) if return_weights else out


def encoder_forward(batch: Batch, params: Params, config: EncoderConfig, train: bool = False, rng=None) -> Tensor:
    """Hidden states (b, t, d); row ``i`` of each sequence is its T_i."""
    x = embed(batch, params, config, train, rng)
    p = config.dropout_rate
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        a = multi_head_attention(x, batch.attention_mask, params, pre + "attn.", config.num_heads, p, train, rng)
        a = T.dropout(a, p, rng, train)
        x = T.layer_norm(x + a, params[pre + "attn_norm.gain"], params[pre + "attn_norm.bias"])
        h = T.gelu(_linear(x, params, pre + "ffn.in"))
        h = T.dropout(_linear(h, params, pre + "ffn.out"), p, rng, train)
        x = T.layer_norm(x + h, params[pre + "ffn_norm.gain"], params[pre + "ffn_norm.bias"])
    return x


def classifier_logits(batch: Batch, params: Params, config: EncoderConfig, train: bool = False, rng=None) -> Tensor:
    """Logits ``V_cls h + b`` from the [CLS] hidden state, shape (b, K)."""
    hidden = encoder_forward(batch, params, config, train, rng)
    h = T.getitem(hidden, (slice(None), 0, slice(None)))
    return h @ T.transpose(params["classifier.weight"]) + params["classifier.bias"]


def classify(seqs, params: Params, config: EncoderConfig) -> np.ndarray:
    """Class probabilities; a single sequence gives shape (K,), a list (n, K)."""
    single = isinstance(seqs, EncodedSequence)
    probs = T.softmax(classifier_logits(make_batch(seqs), params, config)).data
    return probs[0] if single else probs


def classify_many(seqs: Sequence[EncodedSequence], params: Params, config: EncoderConfig, batch_size: int = 64) -> np.ndarray:
    """Batched inference with per-batch padding trimmed."""
    out = []
    for i in range(0, len(seqs), batch_size):
        batch = make_batch(seqs[i : i + batch_size], trim=True)
        out.append(T.softmax(classifier_logits(batch, params, config)).data)
    if not out:
        return np.zeros((0, config.num_classes), np.float32)
    return np.concatenate(out, axis=0)


def mlm_logits(
    batch: Batch,
    positions: Sequence[tuple[int, int]],
    params: Params,
    config: EncoderConfig,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Vocabulary logits at ``(row, position)`` pairs, shape (n, vocab)."""
    if len(positions) == 0:
        raise PositionError("no masked positions given")
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    b, t = batch.ids.shape
    if np.any(pos[:, 1] < 0) or np.any(pos[:, 1] >= t) or np.any(batch.attention_mask[pos[:, 0], pos[:, 1]] == 0):
        raise PositionError("masked position falls in padding")
    hidden = encoder_forward(batch, params, config, train, rng)
    flat = T.reshape(hidden, (b * t, config.hidden_dim))
    picked = T.take(flat, pos[:, 0] * t + pos[:, 1])
    return picked @ T.transpose(params["mlm.weight"]) + params["mlm.bias"]


def mlm_forward(seq: EncodedSequence, masked_positions: Sequence[int], params: Params, config: EncoderConfig) -> np.ndarray:
    """Per-position vocabulary logits for one sequence (eval mode)."""
    batch = make_batch(seq)
    return mlm_logits(batch, [(0, int(p)) for p in masked_positions], params, config).data


@dataclass
class ModelCheckpoint:
    config: EncoderConfig
    params: Params
    vocab: object | None = None  # tokenizer.Vocabulary
    meta: dict = field(default_factory=dict)

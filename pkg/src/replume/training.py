"""AdamW, linear decay schedule, class weighting, MLM pretraining and fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import DegenerateDataError, LabelError, NumericError, PlanError, ReplumeError
from .metrics import CLASSES
from .model import (
    EncoderConfig,
    ModelCheckpoint,
    Params,
    classifier_logits,
    copy_params,
    init_params,
    make_batch,
    mlm_logits,
)
from .text import CleanText, clean_text
from .tokenizer import MASK_ID, NUM_SPECIALS, EncodedSequence, Vocabulary, encode

log = logging.getLogger(__name__)

EPOCH_GRID = (5, 10, 15, 20, 25)
BATCH_GRID = (4, 8, 16, 32, 64)
LR_RANGE = (1e-7, 1e-3)


# --------------------------------------------------------------------------
# Optimiser and schedule
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, T.Tensor], grads: Mapping[str, np.ndarray | None], state: OptimizerState, lr: float) -> OptimizerState:
    """One decoupled-weight-decay Adam update, in place.

    Parameters whose gradient is ``None`` are left untouched (no decay either).
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps) + lr * state.weight_decay * p.data
        p.data -= update.astype(p.dtype, copy=False)
    return state


def linear_schedule(base_lr: float, step: int, total_steps: int) -> float:
    """Linear decay to zero with no warm-up."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    return base_lr * max(0.0, 1.0 - step / total_steps)


def compute_class_weights(label_counts: Mapping[str, int]) -> dict[str, float]:
    """``w_c = N / (K * n_c)``: rarer classes get proportionally larger weight."""
    if not label_counts:
        raise DegenerateDataError("no classes to weight")
    for label, n in label_counts.items():
        if n <= 0:
            raise DegenerateDataError(f"class {label!r} has no samples; drop or merge it first")
    total = sum(label_counts.values())
    k = len(label_counts)
    return {label: total / (k * n) for label, n in label_counts.items()}


# --------------------------------------------------------------------------
# Plans
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 20
    batch_size: int = 32
    base_lr: float = 1e-3
    seed: int = 0
    class_weighting: bool = True
    output_activation: str = "softmax"  # or "log_softmax"
    weight_decay: float = 0.01
    allow_off_grid: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.base_lr < 0:
            raise PlanError(f"invalid plan values: {self}")
        if self.output_activation not in ("softmax", "log_softmax"):
            raise PlanError(f"output_activation must be softmax or log_softmax, got {self.output_activation!r}")
        if not self.allow_off_grid:
            problems = []
            if self.epochs != 0 and self.epochs not in EPOCH_GRID:
                problems.append(f"epochs {self.epochs} not in {EPOCH_GRID}")
            if self.batch_size not in BATCH_GRID:
                problems.append(f"batch_size {self.batch_size} not in {BATCH_GRID}")
            if not LR_RANGE[0] <= self.base_lr <= LR_RANGE[1]:
                problems.append(f"lr {self.base_lr:g} outside [{LR_RANGE[0]:g}, {LR_RANGE[1]:g}]")
            if problems:
                raise PlanError("off-grid plan (pass allow_off_grid to override): " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _grads(params: Params) -> dict[str, np.ndarray | None]:
    return {k: p.grad for k, p in params.items()}


def _zero(params: Params) -> None:
    for p in params.values():
        p.grad = None


# --------------------------------------------------------------------------
# Masked language modelling
# --------------------------------------------------------------------------


class SkipSample(ReplumeError):
    """Raised by :func:`mask_for_mlm` when a sequence has nothing to mask."""


@dataclass(frozen=True)
class MaskedSample:
    sequence: EncodedSequence
    positions: tuple[int, ...]
    original_ids: tuple[int, ...]


def mask_for_mlm(seq: EncodedSequence, rng: np.random.Generator, vocab_size: int, rate: float = 0.15) -> MaskedSample:
    """Select ``round(rate * maskable)`` (at least one) content positions.

    Of the selected positions 80% become ``[MASK]``, 10% a random non-special
    token and 10% stay unchanged.
    """
    maskable = [i for i, (tok, m) in enumerate(zip(seq.ids, seq.attention_mask)) if m and tok >= NUM_SPECIALS]
    if not maskable:
        raise SkipSample("sequence has no maskable tokens")
    n = max(1, math.floor(rate * len(maskable) + 0.5))
    chosen = sorted(int(i) for i in rng.choice(maskable, size=n, replace=False))
    ids = list(seq.ids)
    for pos in chosen:
        u = rng.random()
        if u < 0.8:
            ids[pos] = MASK_ID
        elif u < 0.9:
            ids[pos] = int(rng.integers(NUM_SPECIALS, vocab_size))
    corrupted = EncodedSequence(tuple(ids), seq.attention_mask, seq.segment_ids)
    return MaskedSample(corrupted, tuple(chosen), tuple(seq.ids[p] for p in chosen))


def _as_text(item) -> str:
    if isinstance(item, CleanText):
        return item.text
    if hasattr(item, "text"):
        return clean_text(item.text).text
    return clean_text(str(item)).text


def pretrain_mlm(
    corpus: Iterable,
    config: EncoderConfig,
    plan: TrainPlan,
    vocab: Vocabulary,
    params: Params | None = None,
    mask_rate: float = 0.15,
) -> tuple[ModelCheckpoint, list[float]]:
    """Masked-LM pretraining; returns the checkpoint and per-epoch mean loss."""
    seqs = [encode(_as_text(x), vocab, config.max_len) for x in corpus]
    if not seqs:
        raise DegenerateDataError("pretraining corpus is empty")
    init_rng, order_rng, noise_rng = _streams(plan.seed, 3)
    params = copy_params(params) if params is not None else init_params(config, init_rng)
    history: list[float] = []
    if plan.epochs == 0:
        return ModelCheckpoint(config, params, vocab), history

    state = OptimizerState(weight_decay=plan.weight_decay)
    per_epoch = math.ceil(len(seqs) / plan.batch_size)
    total = plan.epochs * per_epoch
    step = 0
    for epoch in range(plan.epochs):
        order = order_rng.permutation(len(seqs))
        losses = []
        for start in range(0, len(seqs), plan.batch_size):
            rows, positions, targets = [], [], []
            for idx in order[start : start + plan.batch_size]:
                try:
                    sample = mask_for_mlm(seqs[idx], noise_rng, config.vocab_size, mask_rate)
                except SkipSample:
                    continue
                r = len(rows)
                rows.append(sample.sequence)
                positions.extend((r, p) for p in sample.positions)
                targets.extend(sample.original_ids)
            lr = linear_schedule(plan.base_lr, step, total)
            step += 1
            if not rows:
                continue
            batch = make_batch(rows, trim=True)
            with T.Tape() as tape:
                logits = mlm_logits(batch, positions, params, config, train=True, rng=noise_rng)
                loss = T.weighted_cross_entropy(logits, targets)
            try:
                tape.backward(loss)
                adamw_step(params, _grads(params), state, lr)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {step}: {exc}") from exc
            _zero(params)
            losses.append(loss.item())
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.info("mlm epoch %d loss %.4f", epoch + 1, history[-1])
    return ModelCheckpoint(config, params, vocab, meta={"objective": "mlm"}), history


# --------------------------------------------------------------------------
# Fine-tuning
# --------------------------------------------------------------------------


def encode_records(records: Sequence, vocab: Vocabulary, max_len: int) -> list[EncodedSequence]:
    return [encode(clean_text(r.text), vocab, max_len) for r in records]


def label_ids(records: Sequence) -> np.ndarray:
    out = np.empty(len(records), np.int64)
    for i, r in enumerate(records):
        if r.label not in CLASSES:
            raise LabelError(f"record {getattr(r, 'tweet_id', i)!r} has label {r.label!r}; expected one of {CLASSES}")
        out[i] = CLASSES.index(r.label)
    return out


def class_weight_vector(labels: np.ndarray) -> np.ndarray:
    counts = {c: int((labels == i).sum()) for i, c in enumerate(CLASSES) if (labels == i).any()}
    w = compute_class_weights(counts)
    # absent classes never enter the loss; 1.0 is a placeholder
    return np.array([w.get(c, 1.0) for c in CLASSES], np.float64)


def batch_loss(logits: T.Tensor, targets, weights, output_activation: str) -> T.Tensor:
    if output_activation == "log_softmax":
        return T.weighted_nll(T.log_softmax(logits), targets, weights)
    return T.weighted_cross_entropy(logits, targets, weights)


def fine_tune(
    train_set: Sequence,
    checkpoint: ModelCheckpoint,
    plan: TrainPlan,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ModelCheckpoint, list[dict]]:
    """Supervised training of every encoder parameter plus the classifier."""
    if checkpoint.vocab is None:
        raise ValueError("checkpoint carries no vocabulary")
    config = checkpoint.config
    labels = label_ids(train_set)
    if len(labels) == 0:
        raise DegenerateDataError("fine-tuning set is empty")
    params = copy_params(checkpoint.params)
    history: list[dict] = []
    if plan.epochs == 0:
        return ModelCheckpoint(config, params, checkpoint.vocab, dict(checkpoint.meta)), history

    seqs = encode_records(train_set, checkpoint.vocab, config.max_len)
    weights = class_weight_vector(labels) if plan.class_weighting else None
    order_rng, dropout_rng = _streams(plan.seed, 2)
    state = OptimizerState(weight_decay=plan.weight_decay)
    per_epoch = math.ceil(len(seqs) / plan.batch_size)
    total = plan.epochs * per_epoch
    step = 0
    for epoch in range(plan.epochs):
        order = order_rng.permutation(len(seqs))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(seqs), plan.batch_size):
            idx = order[start : start + plan.batch_size]
            batch = make_batch([seqs[i] for i in idx], trim=True)
            targets = labels[idx]
            with T.Tape() as tape:
                logits = classifier_logits(batch, params, config, train=True, rng=dropout_rng)
                loss = batch_loss(logits, targets, weights, plan.output_activation)
            try:
                tape.backward(loss)
                adamw_step(params, _grads(params), state, linear_schedule(plan.base_lr, step, total))
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {step}: {exc}") from exc
            _zero(params)
            step += 1
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == targets).sum())
        entry = {"epoch": epoch + 1, "loss": loss_sum / len(seqs), "train_accuracy": correct / len(seqs)}
        history.append(entry)
        log.info("fine-tune epoch %d loss %.4f acc %.3f", entry["epoch"], entry["loss"], entry["train_accuracy"])
        if on_epoch:
            on_epoch(entry)
    meta = dict(checkpoint.meta, objective="classification", plan=plan.to_dict())
    return ModelCheckpoint(config, params, checkpoint.vocab, meta), history

"""Language routing: which model slot trains on and predicts each record.

Mode 1: one multilingual model for everything.
Mode 2: English -> mini-large, Spanish -> mini-multilingual.
Mode 3: English -> mini-base, Spanish -> mini-multilingual.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, DataError
from .metrics import CLASSES
from .model import ModelCheckpoint, classify_many, init_params, preset_config
from .text import LANGUAGES, default_stopwords, identify_language
from .tokenizer import Vocabulary
from .training import TrainPlan, encode_records, fine_tune

log = logging.getLogger(__name__)

MODE_PRESETS: dict[int, dict[str, str]] = {
    1: {"EN": "mini-multilingual", "ES": "mini-multilingual"},
    2: {"EN": "mini-large", "ES": "mini-multilingual"},
    3: {"EN": "mini-base", "ES": "mini-multilingual"},
}


@dataclass
class Slot:
    preset: str
    checkpoint: str | None = None


@dataclass
class ModeSpec:
    mode_id: int
    slots: dict[str, Slot]  # language -> slot; languages sharing a preset share the Slot

    @classmethod
    def for_mode(cls, mode_id: int) -> "ModeSpec":
        if mode_id not in MODE_PRESETS:
            raise ConfigurationError(f"mode must be one of {sorted(MODE_PRESETS)}, got {mode_id}")
        shared: dict[str, Slot] = {}
        slots = {lang: shared.setdefault(p, Slot(p)) for lang, p in MODE_PRESETS[mode_id].items()}
        return cls(mode_id, slots)

    def slot_for(self, language: str) -> Slot:
        try:
            return self.slots[language]
        except KeyError:
            raise ConfigurationError(f"mode {self.mode_id} has no slot for language {language!r}") from None

    @property
    def slot_names(self) -> list[str]:
        return sorted({s.preset for s in self.slots.values()})

    def validate(self) -> None:
        expected = MODE_PRESETS.get(self.mode_id)
        if expected is None:
            raise ConfigurationError(f"unknown mode {self.mode_id}")
        actual = {lang: s.preset for lang, s in self.slots.items()}
        if actual != expected:
            raise ConfigurationError(f"mode {self.mode_id} slots {actual} differ from definition {expected}")

    def to_dict(self) -> dict:
        return {
            "mode_id": self.mode_id,
            "slots": {lang: {"preset": s.preset, "checkpoint": s.checkpoint} for lang, s in sorted(self.slots.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> "ModeSpec":
        shared: dict[str, Slot] = {}
        slots = {}
        for lang, s in d["slots"].items():
            ckpt = s.get("checkpoint")
            if ckpt and base_dir is not None and not Path(ckpt).is_absolute():
                ckpt = str(base_dir / ckpt)
            slot = shared.setdefault(s["preset"], Slot(s["preset"], ckpt))
            slots[lang] = slot
        spec = cls(int(d["mode_id"]), slots)
        spec.validate()
        return spec

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModeSpec":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), base_dir=path.parent)


def partition_by_language(records: Sequence, stopword_lists=None) -> dict[str, list]:
    """Split records by resolved language; every language key is present."""
    lists = stopword_lists if stopword_lists is not None else default_stopwords()
    parts: dict[str, list] = {lang: [] for lang in LANGUAGES}
    for r in records:
        parts[identify_language(r, lists).value].append(r)
    return parts


def _slot_seed(seed: int, slot_name: str) -> int:
    return int(np.random.SeedSequence([seed, *slot_name.encode()]).generate_state(1)[0])


def train_mode(
    mode: ModeSpec,
    train_set: Sequence,
    plan: TrainPlan,
    vocab: Vocabulary,
    out_dir: str | Path,
    max_len: int = 64,
    pretrained: Mapping[str, ModelCheckpoint] | None = None,
    audit: list | None = None,
    config_overrides: Mapping | None = None,
) -> tuple[ModeSpec, dict[str, list[dict]]]:
    """Fine-tune each slot on the records routed to it and save its checkpoint.

    ``pretrained`` optionally maps slot preset -> starting checkpoint.
    ``audit`` receives ``(tweet_id, language, slot)`` for every training record.
    """
    mode.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parts = partition_by_language(train_set)
    routed: dict[str, list] = {name: [] for name in mode.slot_names}
    for lang in LANGUAGES:
        slot = mode.slot_for(lang)
        for r in parts[lang]:
            routed[slot.preset].append(r)
            if audit is not None:
                audit.append((r.tweet_id, lang, slot.preset))

    histories: dict[str, list[dict]] = {}
    trained = ModeSpec(mode.mode_id, {})
    shared: dict[str, Slot] = {}
    for name in mode.slot_names:
        records = routed[name]
        if not records:
            raise DataError(f"slot {name!r} of mode {mode.mode_id} has no training records")
        seed = _slot_seed(plan.seed, name)
        if pretrained and name in pretrained:
            start = pretrained[name]
            if start.vocab != vocab:
                raise ConfigurationError(f"pretrained checkpoint for {name!r} uses a different vocabulary")
        else:
            config = preset_config(name, len(vocab), max_len=max_len, **(config_overrides or {}))
            start = ModelCheckpoint(config, init_params(config, seed), vocab)
        slot_plan = TrainPlan(**{**plan.to_dict(), "seed": seed, "allow_off_grid": True})
        log.info("mode %d: training slot %s on %d records", mode.mode_id, name, len(records))
        ckpt, histories[name] = fine_tune(records, start, slot_plan)
        path = out_dir / f"{name}.ckpt"
        save_checkpoint(ckpt.params, ckpt.config, path, vocab=vocab, meta={"slot": name, "mode_id": mode.mode_id})
        shared[name] = Slot(name, str(path))
    for lang, slot in mode.slots.items():
        trained.slots[lang] = shared[slot.preset]
    return trained, histories


@dataclass
class Prediction:
    label: str
    probabilities: np.ndarray
    slot: str
    language: str


@dataclass
class Router:
    """Loaded, immutable view of a trained mode for prediction."""

    mode: ModeSpec
    audit: list = field(default_factory=list)
    _models: dict[str, ModelCheckpoint] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.mode.validate()
        for name in self.mode.slot_names:
            slot = next(s for s in self.mode.slots.values() if s.preset == name)
            if not slot.checkpoint:
                raise ConfigurationError(f"slot {name!r} has no checkpoint")
            if not Path(slot.checkpoint).is_file():
                raise ConfigurationError(f"checkpoint for slot {name!r} not found: {slot.checkpoint}")
            ckpt = load_checkpoint(slot.checkpoint)
            if ckpt.vocab is None:
                raise ConfigurationError(f"checkpoint {slot.checkpoint} carries no vocabulary")
            self._models[name] = ckpt

    def predict_many(self, records: Sequence, batch_size: int = 64) -> list[Prediction]:
        langs = [identify_language(r).value for r in records]
        slots = [self.mode.slot_for(lang).preset for lang in langs]
        out: list[Prediction | None] = [None] * len(records)
        for name, ckpt in self._models.items():
            idx = [i for i, s in enumerate(slots) if s == name]
            if not idx:
                continue
            seqs = encode_records([records[i] for i in idx], ckpt.vocab, ckpt.config.max_len)
            probs = classify_many(seqs, ckpt.params, ckpt.config, batch_size)
            for i, p in zip(idx, probs):
                # np.argmax keeps the first maximum: POSITIVE < NEUTRAL < NEGATIVE
                out[i] = Prediction(CLASSES[int(np.argmax(p))], p, name, langs[i])
        for r, pred in zip(records, out):
            self.audit.append((getattr(r, "tweet_id", None), pred.language, pred.slot))
        return out

    def predict(self, record) -> Prediction:
        return self.predict_many([record])[0]


def route(mode: ModeSpec, record) -> str:
    """Slot preset that ``record`` is routed to under ``mode``."""
    return mode.slot_for(identify_language(record).value).preset

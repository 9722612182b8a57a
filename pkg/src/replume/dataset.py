"""RepLab-shaped TSV loading plus a seeded synthetic bilingual generator."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, ParseError
from .metrics import CLASSES

LABELS = (*CLASSES, "UNRELATED")
DOMAINS = ("automotive", "banking", "universities", "celebrities")
COLUMNS = ("tweet_id", "entity_id", "domain", "language", "label", "text")

ENTITIES = {
    "automotive": ["BMW", "Audi", "Volvo", "Toyota", "Volkswagen", "Honda", "Nissan", "Fiat", "Suzuki",
                   "Mazda", "Chrysler", "Subaru", "Ferrari", "Bentley", "Porsche", "Yamaha", "KIA",
                   "Ford", "Jaguar", "Lexus"],
    "banking": ["RBS", "Barclays", "HSBC", "BankofAmerica", "WellsFargo", "PNC", "CapitalOne",
                "Santander", "Bankia", "BBVA", "GoldmanSachs"],
    "universities": ["Harvard", "Stanford", "Berkeley", "MIT", "Princeton", "Columbia", "Yale",
                     "JohnsHopkins", "NYU", "Oxford"],
    "celebrities": ["Adele", "AliciaKeys", "TheBeatles", "LedZeppelin", "Aerosmith", "BonJovi", "U2",
                    "ACDC", "TheWanted", "Maroon5", "Coldplay", "LadyGaga", "Madonna", "JenniferLopez",
                    "JustinBieber", "Shakira", "PSY", "TheScript", "WhitneyHouston", "BritneySpears"],
}

_EMOJI = ["😀", "😂", "🙌", "👍", "🔥", "😡", "😢", "🚗", "🎵", "❤️"]
_PUNCT = ["!", "!!!", ".", "...", "?", ",", ":)"]


@dataclass(frozen=True)
class TweetRecord:
    tweet_id: str
    entity_id: str
    domain: str
    language: str | None
    text: str
    label: str


@dataclass
class DatasetSplit:
    train: list[TweetRecord]
    test: list[TweetRecord]
    distribution: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# TSV
# --------------------------------------------------------------------------


def _check_text(text: str) -> None:
    if any(c in text for c in "\t\r\n"):
        raise InputError("tweet text may not contain tabs or line breaks")


def write_tsv(records: Iterable[TweetRecord], path: str | Path) -> None:
    lines = ["\t".join(COLUMNS)]
    for r in records:
        _check_text(r.text)
        lines.append("\t".join([r.tweet_id, r.entity_id, r.domain, r.language or "", r.label, r.text]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")


def load_tsv(path: str | Path) -> list[TweetRecord]:
    """Parse a header-bearing TSV. Text is the last column; a row with extra
    tab-separated fields is rejected rather than split."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("missing header row", line=1)
    header = lines[0].rstrip("\r").split("\t")
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise ParseError(f"missing column(s): {', '.join(missing)}", line=1)
    if header[-1] != "text":
        raise ParseError("'text' must be the last column", line=1)
    col = {name: header.index(name) for name in COLUMNS}

    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.rstrip("\r").split("\t")
        if len(fields) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(fields)}", line=lineno)
        row = {name: fields[i] for name, i in col.items()}
        label = row["label"].strip().upper()
        if label not in LABELS:
            raise ParseError(f"bad label {row['label']!r}", line=lineno)
        if row["tweet_id"] in seen:
            raise ParseError(f"duplicate tweet_id {row['tweet_id']!r}", line=lineno)
        seen.add(row["tweet_id"])
        records.append(
            TweetRecord(
                tweet_id=row["tweet_id"],
                entity_id=row["entity_id"],
                domain=row["domain"],
                language=row["language"].strip().upper() or None,
                text=row["text"],
                label=label,
            )
        )
    return records


def filter_unrelated(records: Iterable[TweetRecord]) -> list[TweetRecord]:
    return [r for r in records if r.label != "UNRELATED"]


def distribution_report(records: Sequence[TweetRecord]) -> dict:
    """Exact counts per label, language and domain, plus label fractions."""
    if not records:
        raise InputError("distribution_report needs at least one record")
    n = len(records)
    by_label = Counter(r.label for r in records)
    by_lang = Counter(r.language or "UNTAGGED" for r in records)
    by_domain = Counter(r.domain for r in records)
    cross: dict[str, dict[str, dict[str, int]]] = {}
    for r in records:
        lang = cross.setdefault(r.language or "UNTAGGED", {})
        dom = lang.setdefault(r.domain, {})
        dom[r.label] = dom.get(r.label, 0) + 1
    return {
        "total": n,
        "label_counts": dict(sorted(by_label.items())),
        "label_fractions": {k: v / n for k, v in sorted(by_label.items())},
        "language_counts": dict(sorted(by_lang.items())),
        "domain_counts": dict(sorted(by_domain.items())),
        "by_language_domain_label": cross,
    }


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _default_lexicon_text() -> str:
    return (resources.files("replume") / "data" / "lexicon.json").read_text(encoding="utf-8")


def load_lexicon(path: str | Path | None = None) -> dict[str, dict[str, list[str]]]:
    """Per-language word lists: one list per polarity class, ``NOISE``, and ``CUES`` by class."""
    text = _default_lexicon_text() if path is None else Path(path).read_text(encoding="utf-8")
    return json.loads(text)


def _largest_remainder(total: int, fractions: Mapping[str, float]) -> dict[str, int]:
    s = sum(fractions.values())
    raw = {k: total * v / s for k, v in fractions.items()}
    out = {k: int(np.floor(v)) for k, v in raw.items()}
    short = total - sum(out.values())
    for k in sorted(raw, key=lambda k: (-(raw[k] - out[k]), list(raw).index(k)))[:short]:
        out[k] += 1
    return out


@dataclass
class SynthSpec:
    """Record counts per language and class, plus text-shape knobs.

    A tweet carries ``signal_words`` planted class words with probability
    ``signal_rate``, otherwise none. Every tweet also gets ``cue_words`` weak
    cues: each is drawn from the cue list of its own class with probability
    ``cue_purity`` and from another class's list otherwise. The rest is
    ``noise_words`` (min, max) shared filler words.
    """

    counts: dict[str, dict[str, int]]
    signal_words: int = 1
    signal_rate: float = 0.95
    cue_words: int = 2
    cue_purity: float = 0.6
    noise_words: tuple[int, int] = (6, 12)
    url_rate: float = 0.3
    emoji_rate: float = 0.3
    untagged_rate: float = 0.0

    @classmethod
    def from_totals(
        cls,
        total: int,
        class_fractions: Mapping[str, float] | None = None,
        language_fractions: Mapping[str, float] | None = None,
        **kw,
    ) -> "SynthSpec":
        class_fractions = class_fractions or {"POSITIVE": 0.57, "NEUTRAL": 0.29, "NEGATIVE": 0.14}
        language_fractions = language_fractions or {"EN": 0.8, "ES": 0.2}
        per_class = _largest_remainder(total, class_fractions)
        counts: dict[str, dict[str, int]] = {lang: {} for lang in language_fractions}
        for label, n in per_class.items():
            for lang, m in _largest_remainder(n, language_fractions).items():
                counts[lang][label] = m
        return cls(counts=counts, **kw)

    @property
    def total(self) -> int:
        return sum(sum(v.values()) for v in self.counts.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_words"] = list(self.noise_words)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        d = dict(d)
        if "noise_words" in d:
            d["noise_words"] = tuple(d["noise_words"])
        if "counts" not in d:
            return cls.from_totals(**d)
        return cls(**d)


def _make_text(rng: np.random.Generator, lang_lex: Mapping[str, list[str]], label: str, entity: str, spec: SynthSpec) -> str:
    n_noise = int(rng.integers(spec.noise_words[0], spec.noise_words[1] + 1))
    words = list(rng.choice(lang_lex["NOISE"], size=n_noise))
    cues = lang_lex.get("CUES")
    if cues:
        others = [c for c in CLASSES if c != label]
        for _ in range(spec.cue_words):
            source = label if rng.random() < spec.cue_purity else others[int(rng.integers(0, len(others)))]
            words.insert(int(rng.integers(0, len(words) + 1)), str(rng.choice(cues[source])))
    if rng.random() < spec.signal_rate:
        for _ in range(spec.signal_words):
            signal = str(rng.choice(lang_lex[label]))
            words.insert(int(rng.integers(0, len(words) + 1)), signal)
    mention = ("@", "#", "")[int(rng.integers(0, 3))] + entity
    words.insert(int(rng.integers(0, len(words) + 1)), mention)
    if rng.random() < 0.5:
        i = int(rng.integers(0, len(words)))
        words[i] = words[i] + str(rng.choice(_PUNCT))
    if rng.random() < 0.2:
        words[0] = words[0].capitalize()
    if rng.random() < spec.emoji_rate:
        words.append(str(rng.choice(_EMOJI)))
    if rng.random() < spec.url_rate:
        slug = "".join(rng.choice(list("abcdefghijkmnopqrstuvwxyzABCDEFGHJKLMNPQRSTUVWXYZ23456789"), size=8))
        words.append(f"http://t.co/{slug}")
    return " ".join(words)


def synth_generate(spec: SynthSpec, seed: int = 0, lexicon: Mapping | None = None) -> DatasetSplit:
    """Deterministic synthetic corpus with planted class words.

    Records are grouped by (language, class) stratum and every third record
    of the concatenated strata goes to train, giving a ~1/3 : 2/3 split with
    each stratum represented in both halves.
    """
    lexicon = lexicon or load_lexicon()
    rng = np.random.default_rng(seed)
    domains = list(DOMAINS)
    records: list[TweetRecord] = []
    serial = 0
    for lang in sorted(spec.counts):
        for label in CLASSES:
            n = spec.counts[lang].get(label, 0)
            for _ in range(n):
                domain = domains[int(rng.integers(0, len(domains)))]
                entity = ENTITIES[domain][int(rng.integers(0, len(ENTITIES[domain])))]
                text = _make_text(rng, lexicon[lang], label, entity, spec)
                tagged = rng.random() >= spec.untagged_rate
                serial += 1
                records.append(
                    TweetRecord(
                        tweet_id=f"s{seed}-{serial:07d}",
                        entity_id=entity,
                        domain=domain,
                        language=lang if tagged else None,
                        text=text,
                        label=label,
                    )
                )
    order = rng.permutation(len(records))
    strata: dict[tuple[str, str], list[TweetRecord]] = {}
    for i in order:
        r = records[i]
        strata.setdefault((r.language or "", r.label), []).append(r)
    train, test, j = [], [], 0
    for key in sorted(strata):
        for r in strata[key]:
            (train if j % 3 == 0 else test).append(r)
            j += 1
    train.sort(key=lambda r: r.tweet_id)
    test.sort(key=lambda r: r.tweet_id)
    train = [train[i] for i in rng.permutation(len(train))]
    test = [test[i] for i in rng.permutation(len(test))]
    dist = {"train": distribution_report(train) if train else {}, "test": distribution_report(test) if test else {}}
    return DatasetSplit(train=train, test=test, distribution=dist)


def planted_signals(record: TweetRecord, lexicon: Mapping | None = None) -> dict[str, list[str]]:
    """Class words (by class) found in the cleaned text of a synthetic record."""
    from .text import clean_text

    lexicon = lexicon or load_lexicon()
    words = set(clean_text(record.text).text.split())
    found: dict[str, list[str]] = {}
    for lang_lex in lexicon.values():
        for label in CLASSES:
            hits = sorted(words & set(lang_lex[label]))
            if hits:
                found.setdefault(label, []).extend(hits)
    return found

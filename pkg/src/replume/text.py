"""Tweet cleaning and language resolution.

Cleaning applies fixed rules in this order:

1. NFC normalisation (so decomposed accents recombine into letters)
2. URL removal (``http(s)://``, ``www.`` and bare ``t.co/`` tokens)
3. emoji and other symbol codepoints -> space
4. punctuation -> space (``@`` and ``#`` go here; the word after them stays)
5. case fold
6. anything still not a letter, digit or whitespace -> space
7. whitespace collapse and trim
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import LanguageError

LANGUAGES = ("EN", "ES")

_URL_RE = re.compile(r"(?:https?://|www\.|\bt\.co/)\S*", re.IGNORECASE)


@dataclass(frozen=True)
class CleanText:
    text: str
    source_id: str | None = None


@dataclass(frozen=True)
class LanguageTag:
    value: str
    origin: str  # "dataset" | "heuristic" | "default"


def _is_emoji_like(ch: str) -> bool:
    cat = unicodedata.category(ch)
    if cat[0] == "S":
        return True
    # variation selectors, ZWJ and tag characters glue emoji sequences together
    cp = ord(ch)
    return 0xFE00 <= cp <= 0xFE0F or cp == 0x200D or 0xE0020 <= cp <= 0xE007F


def clean_text(raw: str, source_id: str | None = None) -> CleanText:
    s = unicodedata.normalize("NFC", raw)
    s = _URL_RE.sub(" ", s)
    s = "".join(" " if _is_emoji_like(c) else c for c in s)
    s = "".join(" " if unicodedata.category(c)[0] == "P" else c for c in s)
    s = unicodedata.normalize("NFC", s.casefold())
    s = "".join(c if c.isalnum() or c.isspace() else " " for c in s)
    return CleanText(" ".join(s.split()), source_id)


def load_stopwords(path: str | Path) -> frozenset[str]:
    """Read a one-word-per-line UTF-8 list; blank lines and ``#`` comments are skipped."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(clean_text(line).text)
    return frozenset(words)


@lru_cache(maxsize=None)
def default_stopwords() -> dict[str, frozenset[str]]:
    base = resources.files("replume") / "data"
    return {lang: load_stopwords(base / f"stopwords_{lang.lower()}.txt") for lang in LANGUAGES}


def normalize_language(tag: str) -> str:
    value = tag.strip().upper()
    if value not in LANGUAGES:
        raise LanguageError(f"unsupported language tag {tag!r}; expected one of {LANGUAGES}")
    return value


def identify_language(record, stopword_lists: Mapping[str, frozenset[str]] | None = None) -> LanguageTag:
    """Resolve the language of a record.

    A dataset tag always wins and the text is never inspected. Otherwise the
    language with the most stopword hits on the cleaned text is chosen; ties
    (including zero hits) fall back to English.
    """
    tag = getattr(record, "language", None)
    if tag:
        return LanguageTag(normalize_language(tag), "dataset")

    lists = stopword_lists if stopword_lists is not None else default_stopwords()
    words = clean_text(record.text).text.split()
    hits = {lang: sum(w in lists.get(lang, ()) for w in words) for lang in LANGUAGES}
    best = max(hits.values())
    winners = [lang for lang, n in hits.items() if n == best]
    if best == 0 or len(winners) > 1:
        return LanguageTag("EN", "default")
    return LanguageTag(winners[0], "heuristic")

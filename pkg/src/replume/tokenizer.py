"""WordPiece vocabulary induction, encoding and decoding."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import IdError, InputError, ParseError
from .text import CleanText

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIALS = len(SPECIALS)
CONT = "##"
DEFAULT_MAX_LEN = 64


class Vocabulary:
    """Immutable token <-> id mapping with the five specials at ids 0-4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIALS]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    @classmethod
    def from_learned(cls, learned: Iterable[str]) -> "Vocabulary":
        return cls([*SPECIALS, *learned])

    @property
    def id_to_token(self) -> tuple[str, ...]:
        return self._tokens

    @property
    def token_to_id(self) -> dict[str, int]:
        return dict(self._ids)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(self._tokens)

    def get(self, token: str) -> int | None:
        return self._ids.get(token)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise IdError(f"token id {idx} outside vocabulary of size {len(self)}")
        return self._tokens[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:NUM_SPECIALS]) != SPECIALS:
            raise ParseError(f"first {NUM_SPECIALS} lines must be {SPECIALS}", line=1)
        return cls(lines)


@dataclass(frozen=True)
class EncodedSequence:
    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    segment_ids: tuple[int, ...]

    @property
    def length(self) -> int:
        """Number of non-padding positions."""
        return sum(self.attention_mask)

    @property
    def non_pad_ids(self) -> tuple[int, ...]:
        return self.ids[: self.length]


def _text_of(item) -> str:
    return item.text if isinstance(item, CleanText) else str(item)


def _merge(left: str, right: str) -> str:
    return left + right[len(CONT):]


def build_vocab(corpus: Iterable[CleanText | str], target_size: int, min_frequency: int = 2) -> Vocabulary:
    """Induce a WordPiece vocabulary by greedy pair merging.

    Words are split into a leading character and ``##``-prefixed continuation
    characters; the whole character alphabet is always kept so every corpus
    word stays encodable. Then the most frequent adjacent pair (ties broken by
    the lexicographically smallest ``(left, right)``) is merged, repeatedly,
    until specials plus learned merges reach ``target_size`` or no pair occurs
    at least ``min_frequency`` times.
    """
    if target_size <= NUM_SPECIALS:
        raise InputError(f"target_size must exceed {NUM_SPECIALS}")
    word_freq: Counter[str] = Counter()
    for item in corpus:
        word_freq.update(_text_of(item).split())
    if not word_freq:
        raise InputError("cannot build a vocabulary from an empty corpus")

    words = sorted(word_freq)
    splits = {w: [w[0], *(CONT + c for c in w[1:])] for w in words}
    alphabet: Counter[str] = Counter()
    for w in words:
        for piece in splits[w]:
            alphabet[piece] += word_freq[w]
    learned = sorted(alphabet, key=lambda p: (-alphabet[p], p))
    seen = set(learned)
    merges = 0
    budget = target_size - NUM_SPECIALS

    while merges < budget:
        pairs: Counter[tuple[str, str]] = Counter()
        for w in words:
            parts = splits[w]
            for pair in zip(parts, parts[1:]):
                pairs[pair] += word_freq[w]
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        if pairs[best] < min_frequency:
            break
        new = _merge(*best)
        for w in words:
            parts = splits[w]
            if len(parts) < 2:
                continue
            out, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and (parts[i], parts[i + 1]) == best:
                    out.append(new)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            splits[w] = out
        if new not in seen:
            seen.add(new)
            learned.append(new)
            merges += 1
    return Vocabulary.from_learned(learned)


def wordpiece(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first split of one word; ``[UNK]`` if any part fails."""
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end] if start == 0 else CONT + word[start:end]
            found = vocab.get(piece)
            if found is not None:
                break
            end -= 1
        if found is None:
            return [UNK_ID]
        pieces.append(found)
        start = end
    return pieces


def encode(text: CleanText | str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> EncodedSequence:
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    pieces: list[int] = []
    for word in _text_of(text).split():
        pieces.extend(wordpiece(word, vocab))
    pieces = pieces[: max_len - 2]
    ids = [CLS_ID, *pieces, SEP_ID]
    n = len(ids)
    pad = max_len - n
    return EncodedSequence(
        ids=tuple(ids + [PAD_ID] * pad),
        attention_mask=tuple([1] * n + [0] * pad),
        segment_ids=(0,) * max_len,
    )


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for idx in ids:
        tok = vocab.token(int(idx))
        if tok in (PAD, CLS, SEP):
            continue
        if tok.startswith(CONT) and words:
            words[-1] += tok[len(CONT):]
        else:
            words.append(tok)
    return " ".join(words)

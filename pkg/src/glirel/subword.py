"""Deterministic subword vocabulary with character fallback.

The scheme ("word-char-v1") keeps whole words seen often enough in the
build corpus as single pieces and decomposes everything else into
character pieces, falling back to the unknown piece for characters never
seen. This guarantees every element maps to at least one piece and that
segmentation is a pure function of the vocabulary, which is stored inside
checkpoints.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .prompt import REL_TOKEN, SEP_TOKEN

SCHEME_ID = "word-char-v1"

PAD_PIECE = "<pad>"
UNK_PIECE = "<unk>"

_SPECIAL_PIECES = (PAD_PIECE, UNK_PIECE, REL_TOKEN, SEP_TOKEN)


@dataclass
class SubwordVocab:
    """Immutable piece inventory; index 0 is padding, index 1 unknown."""

    pieces: list[str]

    def __post_init__(self) -> None:
        self._piece_to_id = {piece: i for i, piece in enumerate(self.pieces)}
        if tuple(self.pieces[: len(_SPECIAL_PIECES)]) != _SPECIAL_PIECES:
            raise ValueError("vocabulary must start with the special pieces")

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def piece_id(self, piece: str) -> int:
        return self._piece_to_id.get(piece, self.unk_id)

    def encode_word(self, word: str) -> list[int]:
        """Piece ids for a single whitespace-free word; never empty."""
        if word in self._piece_to_id:
            return [self._piece_to_id[word]]
        if not word:
            return [self.unk_id]
        return [self._piece_to_id.get(ch, self.unk_id) for ch in word]

    def encode_element(self, element: str) -> list[int]:
        """Piece ids for one sequence element.

        Special tokens are atomic; multi-word elements (label strings)
        concatenate their words' pieces.
        """
        if element in self._piece_to_id:
            return [self._piece_to_id[element]]
        words = element.split()
        if not words:
            return [self.unk_id]
        ids: list[int] = []
        for word in words:
            ids.extend(self.encode_word(word))
        return ids

    def to_dict(self) -> dict:
        return {"scheme": SCHEME_ID, "pieces": list(self.pieces)}

    @classmethod
    def from_dict(cls, payload: dict) -> "SubwordVocab":
        if payload.get("scheme") != SCHEME_ID:
            raise ValueError(f"unsupported subword scheme: {payload.get('scheme')!r}")
        return cls(pieces=list(payload["pieces"]))


def build_vocab(
    token_sources: Iterable[Sequence[str]],
    label_sources: Iterable[str] = (),
    min_word_count: int = 1,
    max_word_types: int = 50_000,
) -> SubwordVocab:
    """Build a vocabulary from corpus tokens and label strings.

    Words occurring at least ``min_word_count`` times become whole pieces
    (most frequent first, ties by string order, capped at
    ``max_word_types``); all characters observed anywhere become fallback
    pieces.
    """
    word_counts: Counter[str] = Counter()
    chars: set[str] = set()
    for tokens in token_sources:
        for token in tokens:
            word_counts[token] += 1
            chars.update(token)
    for label in label_sources:
        for word in label.split():
            word_counts[word] += 1
            chars.update(word)

    kept_words = [
        w
        for w, c in sorted(word_counts.items(), key=lambda item: (-item[1], item[0]))
        if c >= min_word_count
    ][:max_word_types]

    pieces = list(_SPECIAL_PIECES)
    seen = set(pieces)
    for ch in sorted(chars):
        if ch not in seen:
            pieces.append(ch)
            seen.add(ch)
    for word in kept_words:
        if word not in seen:
            pieces.append(word)
            seen.add(word)
    return SubwordVocab(pieces=pieces)

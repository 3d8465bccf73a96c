"""Label, entity, and entity-pair representations.

Three two-layer feed-forward heads project the encoder outputs into one
shared scoring space: pooled label vectors pass through a D->D head,
entity vectors are built from the concatenated first/last word vectors of
each span (2D->D), and ordered pair vectors from the concatenated head
and tail entity vectors (2D->D). Self-pairs are excluded everywhere; pair
enumeration optionally restricts to spans within a token-distance window.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import EntitySpan
from .errors import ConfigError, InvalidInputError

_ACTIVATIONS = {
    "gelu": nn.GELU,
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "identity": nn.Identity,
}


def make_activation(name: str) -> nn.Module:
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        raise ConfigError(
            f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}"
        ) from None


class TwoLayerFFN(nn.Module):
    """Linear -> activation -> Linear; the only FFN shape used by the heads."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, activation: str = "gelu"):
        super().__init__()
        self.first = nn.Linear(in_dim, hidden_dim)
        self.activation = make_activation(activation)
        self.second = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.second(self.activation(self.first(x)))


@dataclass(frozen=True)
class PairIndexSet:
    """Ordered (head, tail) index pairs, head != tail, no duplicates."""

    pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def index_tensor(self) -> torch.Tensor:
        if not self.pairs:
            return torch.zeros((0, 2), dtype=torch.long)
        return torch.tensor(self.pairs, dtype=torch.long)


def enumerate_pairs(
    num_entities: int,
    spans: list[EntitySpan] | None = None,
    window: int | float | None = None,
) -> PairIndexSet:
    """All ordered entity pairs, lexicographic, self-pairs excluded.

    With a ``window``, only pairs whose token gap |tail.start - head.end|
    is at most ``window`` are kept; ``None`` or infinity disables the
    filter.
    """
    if num_entities < 0:
        raise InvalidInputError("entity count must be non-negative")
    unbounded = window is None or window == float("inf")
    if not unbounded and spans is None:
        raise InvalidInputError("windowed enumeration requires entity spans")
    pairs = []
    for u in range(num_entities):
        for v in range(num_entities):
            if u == v:
                continue
            if not unbounded and abs(spans[v].start - spans[u].end) > window:
                continue
            pairs.append((u, v))
    return PairIndexSet(pairs=tuple(pairs))


class LabelHead(nn.Module):
    """Projects pooled label vectors into the scoring space (D -> D)."""

    def __init__(self, hidden_dim: int, activation: str = "gelu"):
        super().__init__()
        self.ffn = TwoLayerFFN(hidden_dim, hidden_dim, hidden_dim, activation)

    def forward(self, label_vectors: torch.Tensor) -> torch.Tensor:
        return self.ffn(label_vectors)


class EntityHead(nn.Module):
    """Builds span vectors from concatenated start/end word vectors."""

    def __init__(self, hidden_dim: int, activation: str = "gelu"):
        super().__init__()
        self.ffn = TwoLayerFFN(2 * hidden_dim, hidden_dim, hidden_dim, activation)

    def forward(self, word_vectors: torch.Tensor, spans: list[EntitySpan]) -> torch.Tensor:
        n, d = word_vectors.shape
        if not spans:
            return word_vectors.new_zeros((0, d))
        for k, span in enumerate(spans):
            if span.end >= n:
                raise InvalidInputError(
                    f"entity {k} span ({span.start}, {span.end}) out of range for {n} words"
                )
        starts = torch.tensor([s.start for s in spans], dtype=torch.long, device=word_vectors.device)
        ends = torch.tensor([s.end for s in spans], dtype=torch.long, device=word_vectors.device)
        concat = torch.cat([word_vectors[starts], word_vectors[ends]], dim=-1)
        return self.ffn(concat)


class PairHead(nn.Module):
    """Builds ordered-pair vectors from concatenated entity vectors."""

    def __init__(self, hidden_dim: int, activation: str = "gelu"):
        super().__init__()
        self.ffn = TwoLayerFFN(2 * hidden_dim, hidden_dim, hidden_dim, activation)

    def forward(self, entity_vectors: torch.Tensor, pairs: PairIndexSet) -> torch.Tensor:
        d = entity_vectors.shape[-1]
        if len(pairs) == 0:
            return entity_vectors.new_zeros((0, d))
        idx = pairs.index_tensor().to(entity_vectors.device)
        concat = torch.cat([entity_vectors[idx[:, 0]], entity_vectors[idx[:, 1]]], dim=-1)
        return self.ffn(concat)

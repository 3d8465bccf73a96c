"""Refinement of pair and label representations.

Each refinement layer conditions one set of vectors on the other through
residual cross-attention, then residual self-attention within the set,
then a (non-residual) two-layer feed-forward transform:

    x' = x + CrossAtt(x, other)
    x'' = x' + SelfAtt(x'')
    out = FFN(x'')

Either side can be refined independently; a disabled side passes through
untouched, and zero layers makes the whole block the identity. At most
two layers are allowed. No positional encoding is applied: pairs and
labels are sets, so the block is equivariant to row permutations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError
from .representation import TwoLayerFFN

MAX_REFINE_LAYERS = 2


@dataclass
class RefineConfig:
    refine_pairs: bool = False
    refine_labels: bool = False
    num_layers: int = 0
    num_heads: int = 4

    def __post_init__(self) -> None:
        if not (0 <= self.num_layers <= MAX_REFINE_LAYERS):
            raise ConfigError(
                f"num_layers must be 0..{MAX_REFINE_LAYERS}, got {self.num_layers}"
            )
        if self.num_heads < 1:
            raise ConfigError("num_heads must be positive")

    @property
    def enabled(self) -> bool:
        return self.num_layers > 0 and (self.refine_pairs or self.refine_labels)

    def to_dict(self) -> dict:
        return {
            "refine_pairs": self.refine_pairs,
            "refine_labels": self.refine_labels,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RefineConfig":
        return cls(**payload)


class Attention(nn.Module):
    """Multi-head attention from a query set onto a key/value set."""

    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        if hidden_dim % num_heads != 0:
            raise ConfigError(
                f"hidden_dim {hidden_dim} not divisible by num_heads {num_heads}"
            )
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.query = nn.Linear(hidden_dim, hidden_dim)
        self.key = nn.Linear(hidden_dim, hidden_dim)
        self.value = nn.Linear(hidden_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, hidden_dim)

    def forward(self, queries: torch.Tensor, keys_values: torch.Tensor) -> torch.Tensor:
        # queries: [Q, D]; keys_values: [K, D]
        nq, d = queries.shape
        nk = keys_values.shape[0]
        q = self.query(queries).view(nq, self.num_heads, self.head_dim).transpose(0, 1)
        k = self.key(keys_values).view(nk, self.num_heads, self.head_dim).transpose(0, 1)
        v = self.value(keys_values).view(nk, self.num_heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(0, 1).reshape(nq, d)
        return self.out(mixed)


class _SideModules(nn.Module):
    """Cross-attention, self-attention, and FFN for one refined side."""

    def __init__(self, hidden_dim: int, num_heads: int, activation: str):
        super().__init__()
        self.cross = Attention(hidden_dim, num_heads)
        self.self_attn = Attention(hidden_dim, num_heads)
        self.ffn = TwoLayerFFN(hidden_dim, hidden_dim, hidden_dim, activation)

    def forward(self, x: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
        # Attention over an empty key set is undefined; contribute nothing.
        if other.shape[0] > 0 and x.shape[0] > 0:
            x = x + self.cross(x, other)
        if x.shape[0] > 0:
            x = x + self.self_attn(x, x)
        return self.ffn(x)


class RefinementLayer(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int, activation: str):
        super().__init__()
        self.pair_side = _SideModules(hidden_dim, num_heads, activation)
        self.label_side = _SideModules(hidden_dim, num_heads, activation)

    def forward(
        self,
        pair_vecs: torch.Tensor,
        label_vecs: torch.Tensor,
        refine_pairs: bool,
        refine_labels: bool,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        # Both sides read the layer's inputs, then update in parallel.
        new_pairs = pair_vecs
        new_labels = label_vecs
        if refine_pairs:
            new_pairs = self.pair_side(pair_vecs, label_vecs)
        if refine_labels:
            new_labels = self.label_side(label_vecs, pair_vecs)
        return new_pairs, new_labels


class RefinementStack(nn.Module):
    """Zero to two refinement layers applied in sequence.

    With ``num_layers == 0`` the stack owns no parameters and `refine`
    returns its inputs unchanged.
    """

    def __init__(self, hidden_dim: int, config: RefineConfig, activation: str = "gelu"):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            RefinementLayer(hidden_dim, config.num_heads, activation)
            for _ in range(config.num_layers)
        )

    def forward(
        self, pair_vecs: torch.Tensor, label_vecs: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.config
        if not cfg.enabled:
            return pair_vecs, label_vecs
        for layer in self.layers:
            pair_vecs, label_vecs = layer(
                pair_vecs, label_vecs, cfg.refine_pairs, cfg.refine_labels
            )
        return pair_vecs, label_vecs


def refine(
    pair_vecs: torch.Tensor,
    label_vecs: torch.Tensor,
    stack: RefinementStack,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Functional entry point; see RefinementStack."""
    return stack(pair_vecs, label_vecs)

"""Bidirectional transformer encoder with first-piece pooling.

A compact pre-norm transformer trained from scratch: learned token and
absolute position embeddings, multi-head self-attention, and a closing
layer norm. Each sequence element (label string, special token, or text
token) is represented by the encoder output at its first subword piece.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, InvalidInputError
from .prompt import AssembledSequence
from .subword import SCHEME_ID, SubwordVocab


@dataclass
class EncoderConfig:
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 0
    max_positions: int = 512
    dropout: float = 0.0
    subword_scheme: str = SCHEME_ID

    def __post_init__(self) -> None:
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.max_positions < 1:
            raise ConfigError("max_positions must be positive")

    def to_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "dropout": self.dropout,
            "subword_scheme": self.subword_scheme,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EncoderConfig":
        return cls(**payload)


@dataclass
class EncodedSequence:
    """Per-element vectors split by role.

    ``label_vectors`` has one row per candidate label (M x D),
    ``word_vectors`` one row per text token (N x D). Vectors for [REL] and
    [SEP] are retained for completeness but unused downstream.
    """

    label_vectors: torch.Tensor
    word_vectors: torch.Tensor
    special_vectors: torch.Tensor


def tokenize_elements(
    seq: AssembledSequence, vocab: SubwordVocab
) -> tuple[list[int], list[int]]:
    """Flatten a sequence into piece ids plus first-piece index per element.

    Every element yields at least one piece, so the first-piece indices
    are strictly increasing. Unknown characters map to the unknown piece.
    """
    ids: list[int] = []
    first_piece_index: list[int] = []
    for element in seq.elements:
        first_piece_index.append(len(ids))
        ids.extend(vocab.encode_element(element))
    return ids, first_piece_index


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, hidden_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden_dim // num_heads
        self.query = nn.Linear(hidden_dim, hidden_dim)
        self.key = nn.Linear(hidden_dim, hidden_dim)
        self.value = nn.Linear(hidden_dim, hidden_dim)
        self.out = nn.Linear(hidden_dim, hidden_dim)
        # Symmetric query/key init gives every head a same-token matching
        # bias from step 0 (q.k = ||Wx||^2 for identical inputs), standing
        # in for the matching ability a pretrained encoder would bring.
        # The parameters remain independent after initialization.
        with torch.no_grad():
            self.key.weight.copy_(self.query.weight)
            self.key.bias.zero_()
            self.query.bias.zero_()

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
        # x: [B, S, D]; key_valid: [B, S] bool, True where the key is real.
        b, s, d = x.shape
        q = self.query(x).view(b, s, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.key(x).view(b, s, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.value(x).view(b, s, self.num_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_valid is not None:
            mask = key_valid[:, None, None, :]
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(mixed)


class EncoderLayer(nn.Module):
    """Pre-norm block: attention and feed-forward, each residual."""

    def __init__(self, hidden_dim: int, num_heads: int, ffn_dim: int, dropout: float = 0.0):
        super().__init__()
        self.attn_norm = nn.LayerNorm(hidden_dim)
        self.attn = MultiHeadSelfAttention(hidden_dim, num_heads)
        self.ffn_norm = nn.LayerNorm(hidden_dim)
        self.ffn = nn.Sequential(
            nn.Linear(hidden_dim, ffn_dim),
            nn.GELU(),
            nn.Linear(ffn_dim, hidden_dim),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.attn_norm(x), key_valid))
        x = x + self.dropout(self.ffn(self.ffn_norm(x)))
        return x


class TransformerEncoder(nn.Module):
    """Joint encoder over assembled label+text sequences.

    ``forward_calls`` counts full batched forward passes; the scoring head
    never adds passes of its own, so inference over a dataset costs
    exactly ceil(instances / batch_size) encoder forwards.
    """

    def __init__(self, config: EncoderConfig, vocab: SubwordVocab):
        super().__init__()
        if config.vocab_size == 0:
            config.vocab_size = len(vocab)
        if config.vocab_size != len(vocab):
            raise ConfigError(
                f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}"
            )
        self.config = config
        self.vocab = vocab
        self.token_embedding = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.position_embedding = nn.Embedding(config.max_positions, config.hidden_dim)
        self.layers = nn.ModuleList(
            EncoderLayer(config.hidden_dim, config.num_heads, config.ffn_dim, config.dropout)
            for _ in range(config.num_layers)
        )
        self.final_norm = nn.LayerNorm(config.hidden_dim)
        self.embed_dropout = nn.Dropout(config.dropout)
        self.forward_calls = 0

    def reset_forward_count(self) -> None:
        self.forward_calls = 0

    def forward(self, piece_ids: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        # piece_ids: [B, S] int64; valid: [B, S] bool, True for real pieces.
        self.forward_calls += 1
        b, s = piece_ids.shape
        if s > self.config.max_positions:
            raise InvalidInputError(
                f"sequence of {s} pieces exceeds max_positions {self.config.max_positions}"
            )
        positions = torch.arange(s, device=piece_ids.device)
        x = self.token_embedding(piece_ids) + self.position_embedding(positions)[None, :, :]
        x = self.embed_dropout(x)
        for layer in self.layers:
            x = layer(x, valid)
        return self.final_norm(x)

    def encode_batch(self, seqs: list[AssembledSequence]) -> list[EncodedSequence]:
        """Encode several sequences in one padded forward pass."""
        tokenized = [tokenize_elements(seq, self.vocab) for seq in seqs]
        lengths = [len(ids) for ids, _ in tokenized]
        longest = max(lengths)
        if longest > self.config.max_positions:
            raise InvalidInputError(
                f"sequence of {longest} pieces exceeds max_positions "
                f"{self.config.max_positions}; truncate before encoding"
            )
        device = self.token_embedding.weight.device
        batch = torch.full((len(seqs), longest), self.vocab.pad_id, dtype=torch.long, device=device)
        valid = torch.zeros((len(seqs), longest), dtype=torch.bool, device=device)
        for i, (ids, _) in enumerate(tokenized):
            batch[i, : len(ids)] = torch.tensor(ids, dtype=torch.long, device=device)
            valid[i, : len(ids)] = True

        hidden = self(batch, valid)

        encoded: list[EncodedSequence] = []
        for i, (seq, (_, first_idx)) in enumerate(zip(seqs, tokenized)):
            pooled = hidden[i, torch.tensor(first_idx, dtype=torch.long, device=device), :]
            label_rows = torch.tensor(seq.label_element_indices, dtype=torch.long, device=device)
            special_rows = [
                j
                for j in range(seq.text_offset)
                if j not in set(seq.label_element_indices)
            ]
            encoded.append(
                EncodedSequence(
                    label_vectors=pooled[label_rows],
                    word_vectors=pooled[seq.text_offset :],
                    special_vectors=pooled[
                        torch.tensor(special_rows, dtype=torch.long, device=device)
                    ]
                    if special_rows
                    else pooled[:0],
                )
            )
        return encoded

    def encode(self, seq: AssembledSequence) -> EncodedSequence:
        """Encode one sequence (single-element batch)."""
        return self.encode_batch([seq])[0]

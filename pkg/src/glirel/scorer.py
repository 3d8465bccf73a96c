"""Sigmoid pair-label scoring, BCE loss, and decoding.

Every ordered entity pair is scored against every candidate label with a
sigmoid over the dot product of their representations, so each cell is an
independent probability. Decoding keeps, per pair, the best label above a
threshold (or all of them in multi-label mode); pairs with nothing above
the threshold decode to no relation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError
from .representation import PairIndexSet

#: Textual verdict for a pair expressing no relation (used by annotation
#: tooling; decoded predictions represent it as an empty candidate list).
NO_RELATION_LABEL = "NO RELATION"


@dataclass
class PairScoreMatrix:
    """Probabilities for every (pair, label) cell, with raw logits kept
    alongside for numerically stable loss computation."""

    scores: torch.Tensor
    logits: torch.Tensor
    pairs: PairIndexSet
    labels: list[str]

    def __post_init__(self) -> None:
        if self.scores.shape != (len(self.pairs), len(self.labels)):
            raise InvalidInputError(
                f"score matrix shape {tuple(self.scores.shape)} does not match "
                f"{len(self.pairs)} pairs x {len(self.labels)} labels"
            )


@dataclass(frozen=True)
class RelationPrediction:
    """A decoded directed relation between two entity mentions."""

    head: int
    tail: int
    label: str
    score: float


@dataclass
class PredictionSet:
    """Decoded verdicts, one entry per scored pair.

    ``entries[i]`` lists the accepted (label, probability) candidates for
    ``pairs[i]``; an empty list means no relation. Default decoding keeps
    at most one candidate.
    """

    pairs: PairIndexSet
    entries: list[list[tuple[str, float]]] = field(default_factory=list)

    def relations(self) -> list[RelationPrediction]:
        out = []
        for (head, tail), cands in zip(self.pairs, self.entries):
            for label, score in cands:
                out.append(RelationPrediction(head, tail, label, score))
        return out

    def triples(self) -> set[tuple[int, int, str]]:
        return {(r.head, r.tail, r.label) for r in self.relations()}

    def to_record(self, doc_id: str | None = None) -> dict:
        return {
            "doc_id": doc_id,
            "predictions": [
                {"head": r.head, "tail": r.tail, "label": r.label, "score": r.score}
                for r in self.relations()
            ],
        }


def score(
    pair_vecs: torch.Tensor,
    label_vecs: torch.Tensor,
    pairs: PairIndexSet,
    labels: list[str],
) -> PairScoreMatrix:
    """Sigmoid dot-product score for every pair-label combination."""
    if pair_vecs.shape[0] != len(pairs):
        raise InvalidInputError(
            f"{pair_vecs.shape[0]} pair vectors for {len(pairs)} pairs"
        )
    if label_vecs.shape[0] != len(labels):
        raise InvalidInputError(
            f"{label_vecs.shape[0]} label vectors for {len(labels)} labels"
        )
    if len(pairs) == 0 or len(labels) == 0:
        logits = pair_vecs.new_zeros((len(pairs), len(labels)))
    else:
        if pair_vecs.shape[1] != label_vecs.shape[1]:
            raise InvalidInputError(
                f"pair dim {pair_vecs.shape[1]} != label dim {label_vecs.shape[1]}"
            )
        logits = pair_vecs @ label_vecs.T
    return PairScoreMatrix(
        scores=torch.sigmoid(logits), logits=logits, pairs=pairs, labels=list(labels)
    )


def bce_loss(matrix: PairScoreMatrix, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over all cells, computed from logits.

    An empty matrix contributes zero loss. Raises on shape mismatch.
    """
    if tuple(targets.shape) != tuple(matrix.logits.shape):
        raise InvalidInputError(
            f"target shape {tuple(targets.shape)} != score shape {tuple(matrix.logits.shape)}"
        )
    if matrix.logits.numel() == 0:
        return matrix.logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(
        matrix.logits, targets.to(matrix.logits.dtype), reduction="mean"
    )


def bce_loss_sum(matrix: PairScoreMatrix, targets: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Cell-summed BCE plus cell count, for pooling across a batch."""
    if tuple(targets.shape) != tuple(matrix.logits.shape):
        raise InvalidInputError(
            f"target shape {tuple(targets.shape)} != score shape {tuple(matrix.logits.shape)}"
        )
    if matrix.logits.numel() == 0:
        return matrix.logits.sum() * 0.0, 0
    total = F.binary_cross_entropy_with_logits(
        matrix.logits, targets.to(matrix.logits.dtype), reduction="sum"
    )
    return total, matrix.logits.numel()


def decode(
    matrix: PairScoreMatrix,
    threshold: float = 0.5,
    multi_label: bool = False,
    force_choice: bool = False,
) -> PredictionSet:
    """Turn a score matrix into per-pair verdicts.

    Default: the highest-scoring label if it reaches ``threshold``, ties
    broken toward the lowest label index, otherwise no relation.
    ``multi_label`` keeps every label at or above the threshold;
    ``force_choice`` always emits the argmax label.
    """
    if not (0.0 < threshold < 1.0):
        raise InvalidInputError(f"threshold must be in (0, 1), got {threshold}")
    probs = matrix.scores.detach().cpu().numpy()
    entries: list[list[tuple[str, float]]] = []
    for row in probs:
        if row.size == 0:
            entries.append([])
            continue
        if multi_label and not force_choice:
            kept = [
                (matrix.labels[t], float(p))
                for t, p in enumerate(row)
                if p >= threshold
            ]
            entries.append(kept)
            continue
        best = int(np.argmax(row))  # first maximum wins ties
        if force_choice or row[best] >= threshold:
            entries.append([(matrix.labels[best], float(row[best]))])
        else:
            entries.append([])
    return PredictionSet(pairs=matrix.pairs, entries=entries)

"""The assembled relation classifier and its checkpoint format.

One forward pass scores every ordered entity pair of every batched
instance against that instance's candidate labels: assemble the joint
sequence, encode it, pool label/word vectors, build entity and pair
representations, optionally refine, and take sigmoid dot products.

Checkpoints are a JSON header (format version, model config, vocabulary,
tensor directory) followed by the raw little-endian tensor payload, so a
file is self-describing without pickled code.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import InputInstance
from .encoder import EncoderConfig, TransformerEncoder, tokenize_elements
from .errors import ConfigError, InvalidInputError
from .prompt import AssembledSequence, assemble, truncate, truncated_view
from .refinement import RefineConfig, RefinementStack
from .representation import (
    EntityHead,
    LabelHead,
    PairHead,
    PairIndexSet,
    enumerate_pairs,
)
from .scorer import PairScoreMatrix, PredictionSet, decode, score
from .subword import SubwordVocab

CHECKPOINT_FORMAT = "glirel-checkpoint"
CHECKPOINT_VERSION = 1

_DTYPE_NAMES = {
    torch.float32: "f32",
    torch.float64: "f64",
    torch.int64: "i64",
}
_NAMES_DTYPE = {v: k for k, v in _DTYPE_NAMES.items()}
_NUMPY_DTYPES = {"f32": np.float32, "f64": np.float64, "i64": np.int64}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = dataclass_field(default_factory=EncoderConfig)
    refine: RefineConfig = dataclass_field(default_factory=RefineConfig)
    activation: str = "gelu"

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "refine": self.refine.to_dict(),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig.from_dict(payload["encoder"]),
            refine=RefineConfig.from_dict(payload["refine"]),
            activation=payload.get("activation", "gelu"),
        )


@dataclass
class InstanceOutput:
    """Scores for one instance, in the coordinates of its truncated view.

    ``entity_ids[k]`` maps view entity ``k`` back to the instance's
    original mention index; ``dropped_entities`` lists mentions lost to
    truncation.
    """

    matrix: PairScoreMatrix
    view: InputInstance
    entity_ids: list[int]
    dropped_entities: list[int]
    labels: list[str]

    def predictions(
        self,
        threshold: float = 0.5,
        multi_label: bool = False,
        force_choice: bool = False,
    ) -> PredictionSet:
        """Decode and re-express pairs in original mention indices."""
        decoded = decode(self.matrix, threshold, multi_label, force_choice)
        remapped = PairIndexSet(
            pairs=tuple(
                (self.entity_ids[u], self.entity_ids[v]) for u, v in decoded.pairs
            )
        )
        return PredictionSet(pairs=remapped, entries=decoded.entries)


class RelationClassifier(nn.Module):
    def __init__(self, config: ModelConfig, vocab: SubwordVocab):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(config.encoder, vocab)
        dim = config.encoder.hidden_dim
        self.label_head = LabelHead(dim, config.activation)
        self.entity_head = EntityHead(dim, config.activation)
        self.pair_head = PairHead(dim, config.activation)
        self.refinement = RefinementStack(dim, config.refine, config.activation)

    @property
    def vocab(self) -> SubwordVocab:
        return self.encoder.vocab

    def encoder_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters())

    def head_parameters(self) -> list[nn.Parameter]:
        params = []
        for module in (self.label_head, self.entity_head, self.pair_head, self.refinement):
            params.extend(module.parameters())
        return params

    def _prepare(
        self, instance: InputInstance, labels: list[str]
    ) -> tuple[AssembledSequence, list[int]]:
        """Assemble and shrink until the piece count fits the encoder."""
        max_pieces = self.config.encoder.max_positions
        full = assemble(labels, instance)
        budget = min(len(full.elements), max_pieces)
        seq, dropped = truncate(full, budget)
        ids, _ = tokenize_elements(seq, self.vocab)
        while len(ids) > max_pieces:
            budget -= len(ids) - max_pieces
            if budget < seq.text_offset:
                raise ConfigError(
                    f"label prompt alone needs more than {max_pieces} subword pieces"
                )
            seq, dropped = truncate(full, budget)
            ids, _ = tokenize_elements(seq, self.vocab)
        return seq, dropped

    def score_batch(
        self,
        instances: list[InputInstance],
        labels_per_instance: list[list[str]],
        pair_window: int | None = None,
    ) -> list[InstanceOutput]:
        """Score all pairs of all instances with one encoder forward."""
        if len(instances) != len(labels_per_instance):
            raise InvalidInputError(
                f"{len(instances)} instances but {len(labels_per_instance)} label lists"
            )
        if not instances:
            return []
        prepared = [
            self._prepare(inst, labels)
            for inst, labels in zip(instances, labels_per_instance)
        ]
        encoded = self.encoder.encode_batch([seq for seq, _ in prepared])

        outputs: list[InstanceOutput] = []
        for instance, (seq, dropped), enc in zip(instances, prepared, encoded):
            view, entity_ids = truncated_view(instance, seq)
            pairs = enumerate_pairs(len(view.entities), view.entities, pair_window)
            label_vecs = self.label_head(enc.label_vectors)
            entity_vecs = self.entity_head(enc.word_vectors, view.entities)
            pair_vecs = self.pair_head(entity_vecs, pairs)
            pair_vecs, label_vecs = self.refinement(pair_vecs, label_vecs)
            matrix = score(pair_vecs, label_vecs, pairs, seq.labels)
            outputs.append(
                InstanceOutput(
                    matrix=matrix,
                    view=view,
                    entity_ids=entity_ids,
                    dropped_entities=dropped,
                    labels=seq.labels,
                )
            )
        return outputs

    @torch.no_grad()
    def predict(
        self,
        instances: list[InputInstance],
        labels: list[str],
        batch_size: int = 8,
        threshold: float = 0.5,
        multi_label: bool = False,
        force_choice: bool = False,
        pair_window: int | None = None,
    ) -> list[PredictionSet]:
        """Decode predictions for a dataset, batching encoder passes."""
        if batch_size < 1:
            raise InvalidInputError("batch_size must be positive")
        was_training = self.training
        self.eval()
        try:
            results: list[PredictionSet] = []
            for start in range(0, len(instances), batch_size):
                chunk = instances[start : start + batch_size]
                outputs = self.score_batch(chunk, [labels] * len(chunk), pair_window)
                results.extend(
                    out.predictions(threshold, multi_label, force_choice)
                    for out in outputs
                )
            return results
        finally:
            if was_training:
                self.train()


def save_checkpoint(
    model: RelationClassifier, path: str | Path, extra: dict | None = None
) -> None:
    """Write config, vocabulary, and parameters as JSON header + payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    directory = []
    offset = 0
    blobs: list[bytes] = []
    for name, tensor in state.items():
        dtype = _DTYPE_NAMES.get(tensor.dtype)
        if dtype is None:
            raise ConfigError(f"cannot serialize tensor {name} of dtype {tensor.dtype}")
        blob = tensor.detach().cpu().contiguous().numpy().tobytes()
        directory.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "vocab": model.vocab.to_dict(),
        "tensors": directory,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[RelationClassifier, dict]:
    """Rebuild a model from a checkpoint file; returns (model, extra)."""
    path = Path(path)
    with path.open("rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise InvalidInputError(f"{path} is not a model checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise InvalidInputError(
                f"unsupported checkpoint version {header.get('version')!r}"
            )
        payload = fh.read()

    vocab = SubwordVocab.from_dict(header["vocab"])
    config = ModelConfig.from_dict(header["model_config"])
    model = RelationClassifier(config, vocab)
    state = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=_NUMPY_DTYPES[entry["dtype"]]).copy()
        state[entry["name"]] = torch.from_numpy(array).reshape(entry["shape"])
    model.load_state_dict(state)
    return model, header.get("extra", {})

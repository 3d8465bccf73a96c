"""Shared fixtures and toy-data builders."""
from __future__ import annotations

import random

import pytest
import torch

from glirel.data import EntitySpan, InputInstance, Relation
from glirel.encoder import EncoderConfig
from glirel.model import ModelConfig, RelationClassifier
from glirel.refinement import RefineConfig
from glirel.subword import build_vocab


def tiny_model_config(
    hidden_dim: int = 32,
    num_layers: int = 1,
    num_heads: int = 2,
    ffn_dim: int = 64,
    max_positions: int = 128,
    refine: RefineConfig | None = None,
    activation: str = "gelu",
) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(
            hidden_dim=hidden_dim,
            num_layers=num_layers,
            num_heads=num_heads,
            ffn_dim=ffn_dim,
            max_positions=max_positions,
        ),
        refine=refine or RefineConfig(),
        activation=activation,
    )


def simple_instance(num_tokens: int = 6, num_entities: int = 2) -> InputInstance:
    tokens = [f"tok{i}" for i in range(num_tokens)]
    entities = [EntitySpan(i, i) for i in range(num_entities)]
    relations = [Relation(0, 1, "rel a")] if num_entities >= 2 else []
    return InputInstance(tokens=tokens, entities=entities, relations=relations)


def make_model(
    instances: list[InputInstance],
    labels: list[str],
    config: ModelConfig | None = None,
    seed: int = 0,
) -> RelationClassifier:
    vocab = build_vocab([inst.tokens for inst in instances], labels)
    torch.manual_seed(seed)
    return RelationClassifier(config or tiny_model_config(), vocab)


def random_corpus(
    num_instances: int,
    labels: list[str],
    rng: random.Random,
    max_tokens: int = 12,
    max_entities: int = 4,
) -> list[InputInstance]:
    """Random instances over a fixed word inventory, for split/metric tests."""
    words = [f"w{i}" for i in range(30)]
    out = []
    for i in range(num_instances):
        n = rng.randint(4, max_tokens)
        tokens = [rng.choice(words) for _ in range(n)]
        num_entities = rng.randint(2, min(max_entities, n))
        positions = rng.sample(range(n), num_entities)
        entities = [EntitySpan(p, p) for p in sorted(positions)]
        relations = []
        num_relations = rng.randint(0, 2)
        for _ in range(num_relations):
            head, tail = rng.sample(range(num_entities), 2)
            relations.append(Relation(head, tail, rng.choice(labels)))
        seen = {(r.head, r.tail, r.label) for r in relations}
        relations = [Relation(h, t, l) for h, t, l in sorted(seen)]
        out.append(
            InputInstance(tokens=tokens, entities=entities, relations=relations, doc_id=f"r{i}")
        )
    return out


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)

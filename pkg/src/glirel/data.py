"""Core dataset types and JSONL input/output.

The on-disk dataset format is JSONL with one instance per line:

    {"tokens": ["Apple", "was", "founded", "by", "Steve", "Jobs"],
     "entities": [[0, 0], [4, 5]],
     "relations": [{"head": 1, "tail": 0, "label": "founded"}],
     "doc_id": "optional-string",
     "clusters": [[0, 2], [1]]}          # optional, document-level corpora

Entity spans are inclusive token index pairs. Relations reference entity
list positions. ``clusters`` partitions entity mentions when gold
coreference is available.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import InvalidInputError


@dataclass(frozen=True)
class EntitySpan:
    """Inclusive token span ``[start, end]`` within an instance's tokens."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if not (0 <= self.start <= self.end):
            raise InvalidInputError(
                f"entity span must satisfy 0 <= start <= end, got ({self.start}, {self.end})"
            )

    def width(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class Relation:
    """A directed, labeled edge between two entity mentions."""

    head: int
    tail: int
    label: str

    def __post_init__(self) -> None:
        if self.head == self.tail:
            raise InvalidInputError(f"relation head and tail must differ, got {self.head}")


@dataclass
class InputInstance:
    """One training/inference unit: tokens, entity mentions, gold relations.

    ``clusters``, when present, partitions mention indices into coreference
    clusters (document-level corpora only).
    """

    tokens: list[str]
    entities: list[EntitySpan] = field(default_factory=list)
    relations: list[Relation] = field(default_factory=list)
    doc_id: str | None = None
    clusters: list[list[int]] | None = None

    def __post_init__(self) -> None:
        n = len(self.tokens)
        for k, span in enumerate(self.entities):
            if span.end >= n:
                raise InvalidInputError(
                    f"entity {k} span ({span.start}, {span.end}) out of range for {n} tokens"
                )
        num_entities = len(self.entities)
        for rel in self.relations:
            if not (0 <= rel.head < num_entities and 0 <= rel.tail < num_entities):
                raise InvalidInputError(
                    f"relation ({rel.head}, {rel.tail}, {rel.label!r}) references "
                    f"invalid entity index; instance has {num_entities} entities"
                )
        if self.clusters is not None:
            seen: set[int] = set()
            for cluster in self.clusters:
                for m in cluster:
                    if not (0 <= m < num_entities):
                        raise InvalidInputError(f"cluster mention index {m} out of range")
                    if m in seen:
                        raise InvalidInputError(f"mention {m} appears in more than one cluster")
                    seen.add(m)

    def gold_labels(self) -> set[str]:
        return {rel.label for rel in self.relations}

    def gold_triples(self) -> set[tuple[int, int, str]]:
        return {(rel.head, rel.tail, rel.label) for rel in self.relations}

    def to_dict(self) -> dict:
        record: dict = {
            "tokens": list(self.tokens),
            "entities": [[s.start, s.end] for s in self.entities],
            "relations": [
                {"head": r.head, "tail": r.tail, "label": r.label} for r in self.relations
            ],
        }
        if self.doc_id is not None:
            record["doc_id"] = self.doc_id
        if self.clusters is not None:
            record["clusters"] = [list(c) for c in self.clusters]
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "InputInstance":
        try:
            tokens = list(record["tokens"])
            entities = [EntitySpan(int(s), int(e)) for s, e in record.get("entities", [])]
            relations = [
                Relation(int(r["head"]), int(r["tail"]), str(r["label"]))
                for r in record.get("relations", [])
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed instance record: {exc}") from exc
        clusters = record.get("clusters")
        if clusters is not None:
            clusters = [[int(m) for m in cluster] for cluster in clusters]
        return cls(
            tokens=tokens,
            entities=entities,
            relations=relations,
            doc_id=record.get("doc_id"),
            clusters=clusters,
        )


def load_jsonl(path: str | Path) -> list[InputInstance]:
    """Load a dataset file, validating every record."""
    instances = []
    for lineno, record in enumerate(_iter_json_lines(path), start=1):
        try:
            instances.append(InputInstance.from_dict(record))
        except InvalidInputError as exc:
            raise InvalidInputError(f"{path}:{lineno}: {exc}") from exc
    return instances


def save_jsonl(instances: Iterable[InputInstance], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(json.dumps(instance.to_dict(), ensure_ascii=False) + "\n")


def validate_jsonl(path: str | Path) -> tuple[int, list[str]]:
    """Validate a dataset file; returns (valid_count, error_messages)."""
    count = 0
    problems: list[str] = []
    for lineno, record in enumerate(_iter_json_lines(path, collect=problems), start=1):
        try:
            InputInstance.from_dict(record)
            count += 1
        except InvalidInputError as exc:
            problems.append(f"line {lineno}: {exc}")
    return count, problems


def _iter_json_lines(path: str | Path, collect: list[str] | None = None) -> Iterator[dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                if collect is not None:
                    collect.append(f"line {lineno}: invalid JSON: {exc}")
                    continue
                raise InvalidInputError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                if collect is not None:
                    collect.append(f"line {lineno}: record is not a JSON object")
                    continue
                raise InvalidInputError(f"{path}:{lineno}: record is not a JSON object")
            yield record


def collect_label_pool(instances: Sequence[InputInstance]) -> set[str]:
    """All distinct relation labels in a dataset (the negative-sampling pool)."""
    pool: set[str] = set()
    for instance in instances:
        pool |= instance.gold_labels()
    return pool

"""Coreference-as-relation and document-level aggregation.

Mention pairs predicted with the SELF label are treated as undirected
coreference edges; connected components over them partition mentions
into clusters. Remaining mention-level relations are then projected to
cluster level, dropping intra-cluster edges and merging duplicates by
maximum score. Long documents are scored through overlapping token
windows whose predictions are merged back into document coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .data import EntitySpan, InputInstance, Relation
from .errors import InvalidInputError
from .model import RelationClassifier
from .prompt import SELF_LABEL
from .scorer import PredictionSet, RelationPrediction

DEFAULT_WINDOW = 256
DEFAULT_STRIDE = 128


def as_relations(
    predictions: PredictionSet | Iterable[RelationPrediction],
) -> list[RelationPrediction]:
    if isinstance(predictions, PredictionSet):
        return predictions.relations()
    return list(predictions)


@dataclass
class CorefClusterSet:
    """A partition of mention indices with its inverse lookup."""

    clusters: list[list[int]]
    mention_to_cluster: dict[int, int]

    @classmethod
    def from_partition(cls, clusters: Iterable[Iterable[int]]) -> "CorefClusterSet":
        normalized = [sorted(set(c)) for c in clusters if c]
        normalized.sort(key=lambda c: c[0])
        lookup: dict[int, int] = {}
        for idx, cluster in enumerate(normalized):
            for mention in cluster:
                if mention in lookup:
                    raise InvalidInputError(f"mention {mention} in more than one cluster")
                lookup[mention] = idx
        return cls(clusters=normalized, mention_to_cluster=lookup)


def cluster_self_edges(
    predictions: PredictionSet | Iterable[RelationPrediction],
    num_mentions: int,
) -> CorefClusterSet:
    """Connected components over SELF edges, taken as undirected.

    Mentions untouched by any SELF edge become singleton clusters.
    """
    parent = list(range(num_mentions))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for rel in as_relations(predictions):
        if rel.label == SELF_LABEL:
            if not (0 <= rel.head < num_mentions and 0 <= rel.tail < num_mentions):
                raise InvalidInputError(
                    f"SELF edge ({rel.head}, {rel.tail}) outside {num_mentions} mentions"
                )
            union(rel.head, rel.tail)

    groups: dict[int, list[int]] = {}
    for mention in range(num_mentions):
        groups.setdefault(find(mention), []).append(mention)
    return CorefClusterSet.from_partition(groups.values())


def gold_cluster_set(instance: InputInstance) -> CorefClusterSet:
    """Gold clusters padded with singletons for unlisted mentions."""
    listed: set[int] = set()
    clusters: list[list[int]] = []
    for cluster in instance.clusters or []:
        clusters.append(list(cluster))
        listed.update(cluster)
    for mention in range(len(instance.entities)):
        if mention not in listed:
            clusters.append([mention])
    return CorefClusterSet.from_partition(clusters)


@dataclass(frozen=True)
class ClusterRelation:
    head_cluster: int
    tail_cluster: int
    label: str
    score: float


@dataclass
class DocPrediction:
    """Cluster-level relations; SELF edges and intra-cluster relations are
    consumed by clustering and never appear here."""

    clusters: CorefClusterSet
    relations: list[ClusterRelation]

    def triples(self) -> set[tuple[int, int, str]]:
        return {(r.head_cluster, r.tail_cluster, r.label) for r in self.relations}


def aggregate(
    clusters: CorefClusterSet,
    predictions: PredictionSet | Iterable[RelationPrediction],
) -> DocPrediction:
    """Project mention-level relations onto clusters.

    Non-SELF edges map through the mention-to-cluster lookup; edges inside
    one cluster are dropped; duplicate cluster triples keep the maximum
    score. Aggregating an already aggregated result is a fixpoint.
    """
    best: dict[tuple[int, int, str], float] = {}
    for rel in as_relations(predictions):
        if rel.label == SELF_LABEL:
            continue
        if rel.head not in clusters.mention_to_cluster or rel.tail not in clusters.mention_to_cluster:
            raise InvalidInputError(
                f"relation mentions ({rel.head}, {rel.tail}) not covered by clusters"
            )
        hc = clusters.mention_to_cluster[rel.head]
        tc = clusters.mention_to_cluster[rel.tail]
        if hc == tc:
            continue
        key = (hc, tc, rel.label)
        if rel.score > best.get(key, float("-inf")):
            best[key] = rel.score
    relations = [
        ClusterRelation(hc, tc, label, score)
        for (hc, tc, label), score in sorted(best.items())
    ]
    return DocPrediction(clusters=clusters, relations=relations)


@dataclass
class WindowedDocument:
    windows: list[InputInstance]
    mention_maps: list[list[int]]
    offsets: list[int]


def window_document(
    doc: InputInstance, window_tokens: int, stride: int
) -> WindowedDocument:
    """Slice a document into overlapping token windows.

    Windows start at multiples of ``stride``; a terminal window is added
    so the document tail is always covered. Entities appear only in
    windows that fully contain them, re-based to window coordinates, with
    the mapping back to document mention indices retained. Relations
    survive into a window when both endpoints do.
    """
    if not (window_tokens >= stride > 0):
        raise InvalidInputError(
            f"need window >= stride > 0, got window={window_tokens} stride={stride}"
        )
    n = len(doc.tokens)
    offsets = [0]
    while offsets[-1] + window_tokens < n:
        offsets.append(offsets[-1] + stride)
    terminal = max(0, n - window_tokens)
    if offsets[-1] < terminal:
        offsets.append(terminal)

    windows: list[InputInstance] = []
    mention_maps: list[list[int]] = []
    for offset in offsets:
        end = min(offset + window_tokens, n)
        mention_map: list[int] = []
        spans: list[EntitySpan] = []
        for idx, span in enumerate(doc.entities):
            if span.start >= offset and span.end < end:
                mention_map.append(idx)
                spans.append(EntitySpan(span.start - offset, span.end - offset))
        doc_to_window = {doc_idx: w for w, doc_idx in enumerate(mention_map)}
        relations = [
            Relation(doc_to_window[rel.head], doc_to_window[rel.tail], rel.label)
            for rel in doc.relations
            if rel.head in doc_to_window and rel.tail in doc_to_window
        ]
        windows.append(
            InputInstance(
                tokens=doc.tokens[offset:end],
                entities=spans,
                relations=relations,
                doc_id=doc.doc_id,
            )
        )
        mention_maps.append(mention_map)
    return WindowedDocument(windows=windows, mention_maps=mention_maps, offsets=offsets)


def merge_window_predictions(
    window_predictions: Sequence[PredictionSet | Iterable[RelationPrediction]],
    mention_maps: Sequence[list[int]],
) -> list[RelationPrediction]:
    """Union per-window predictions in document mention coordinates,
    keeping the maximum score for duplicated triples."""
    if len(window_predictions) != len(mention_maps):
        raise InvalidInputError(
            f"{len(window_predictions)} prediction sets for {len(mention_maps)} windows"
        )
    best: dict[tuple[int, int, str], float] = {}
    for preds, mention_map in zip(window_predictions, mention_maps):
        for rel in as_relations(preds):
            head = mention_map[rel.head]
            tail = mention_map[rel.tail]
            key = (head, tail, rel.label)
            if rel.score > best.get(key, float("-inf")):
                best[key] = rel.score
    return [
        RelationPrediction(head, tail, label, score)
        for (head, tail, label), score in sorted(best.items())
    ]


def predict_document(
    model: RelationClassifier,
    doc: InputInstance,
    labels: Sequence[str],
    threshold: float = 0.5,
    window: int | None = None,
    stride: int | None = None,
    batch_size: int = 8,
    use_gold_clusters: bool = False,
    force_choice: bool = False,
    pair_window: int | None = None,
) -> DocPrediction:
    """Full document pipeline: (windowed) scoring, merging, clustering,
    cluster-level aggregation.

    With ``use_gold_clusters`` the instance's annotated clusters drive the
    aggregation; otherwise predicted SELF edges do (include SELF among
    ``labels`` for that to happen).
    """
    if window is None:
        preds = model.predict(
            [doc],
            list(labels),
            batch_size=batch_size,
            threshold=threshold,
            force_choice=force_choice,
            pair_window=pair_window,
        )[0]
        merged = as_relations(preds)
    else:
        windowed = window_document(doc, window, stride if stride is not None else max(1, window // 2))
        window_preds = model.predict(
            windowed.windows,
            list(labels),
            batch_size=batch_size,
            threshold=threshold,
            force_choice=force_choice,
            pair_window=pair_window,
        )
        merged = merge_window_predictions(window_preds, windowed.mention_maps)

    if use_gold_clusters:
        clusters = gold_cluster_set(doc)
    else:
        clusters = cluster_self_edges(merged, len(doc.entities))
    return aggregate(clusters, merged)

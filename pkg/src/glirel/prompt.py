"""Joint label+text input assembly.

The model consumes one flat sequence of *elements*: candidate relation
labels separated by ``[REL]``, a closing ``[SEP]``, then the text tokens.
An element is either a label string (possibly multi-word), a special
token, or a single text token. For M labels and N tokens the layout is

    t_0 [REL] t_1 [REL] ... t_{M-1} [SEP] x_0 ... x_{N-1}

which is 2M prompt elements followed by N text elements (M - 1 separators
plus one terminator). Entity spans are re-based from token coordinates to
element coordinates by adding the text offset 2M.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .data import EntitySpan, InputInstance
from .errors import ConfigError, InvalidInputError

REL_TOKEN = "[REL]"
SEP_TOKEN = "[SEP]"

#: Relation label marking two mentions as coreferent (document-level mode).
SELF_LABEL = "SELF"


@dataclass
class AssembledSequence:
    """The element sequence plus index maps back into it.

    ``entity_ids[k]`` is the index of ``entity_element_spans[k]`` in the
    source instance's entity list; truncation can make this a strict
    subset of the original roster.
    """

    elements: list[str]
    labels: list[str]
    label_element_indices: list[int]
    text_offset: int
    entity_element_spans: list[EntitySpan]
    entity_ids: list[int]

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    @property
    def num_text_tokens(self) -> int:
        return len(self.elements) - self.text_offset

    def entity_token_spans(self) -> list[EntitySpan]:
        """Surviving entity spans in token coordinates."""
        off = self.text_offset
        return [EntitySpan(s.start - off, s.end - off) for s in self.entity_element_spans]


@dataclass
class LabelPolicy:
    """Label-prompt regularization used during training.

    Gold labels are never dropped; negatives sampled from ``negative_pool``
    pad the prompt up to ``max_labels`` and are then each independently
    discarded with ``drop_probability`` to vary the prompt length.
    """

    max_labels: int = 25
    drop_probability: float = 0.0
    shuffle: bool = True
    negative_pool: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        if self.max_labels < 1:
            raise ConfigError(f"max_labels must be >= 1, got {self.max_labels}")
        if not (0.0 <= self.drop_probability < 1.0):
            raise ConfigError(
                f"drop_probability must be in [0, 1), got {self.drop_probability}"
            )


def assemble(labels: list[str], instance: InputInstance) -> AssembledSequence:
    """Build the joint element sequence for one instance.

    Raises:
        InvalidInputError: empty label list, or an entity span outside the
            instance's tokens.
    """
    if not labels:
        raise InvalidInputError("label list must be non-empty")
    n = len(instance.tokens)
    for k, span in enumerate(instance.entities):
        if span.end >= n:
            raise InvalidInputError(
                f"entity {k} span ({span.start}, {span.end}) out of range for {n} tokens"
            )

    elements: list[str] = []
    label_element_indices: list[int] = []
    for i, label in enumerate(labels):
        if i > 0:
            elements.append(REL_TOKEN)
        label_element_indices.append(len(elements))
        elements.append(label)
    elements.append(SEP_TOKEN)
    text_offset = len(elements)
    elements.extend(instance.tokens)

    entity_element_spans = [
        EntitySpan(span.start + text_offset, span.end + text_offset)
        for span in instance.entities
    ]
    return AssembledSequence(
        elements=elements,
        labels=list(labels),
        label_element_indices=label_element_indices,
        text_offset=text_offset,
        entity_element_spans=entity_element_spans,
        entity_ids=list(range(len(instance.entities))),
    )


def regularize_labels(
    gold_labels: set[str],
    policy: LabelPolicy,
    rng: random.Random,
) -> list[str]:
    """Produce the label prompt for one training instance.

    Gold labels always survive (truncated only if they alone exceed
    ``max_labels``). Distinct negatives are sampled from the pool to fill
    the prompt, each then dropped independently with
    ``policy.drop_probability``; a pool too small to pad is not an error.
    When ``drop_probability`` is zero no randomness is consumed for
    dropping, so the output matches a pipeline with no dropping stage at
    all. Deterministic given the rng state.
    """
    gold = sorted(gold_labels)
    if len(gold) >= policy.max_labels:
        result = gold[: policy.max_labels]
        if policy.shuffle:
            rng.shuffle(result)
        return result

    pool = sorted(set(policy.negative_pool) - set(gold))
    want = policy.max_labels - len(gold)
    chosen = rng.sample(pool, min(want, len(pool)))
    if policy.drop_probability > 0.0:
        chosen = [neg for neg in chosen if rng.random() >= policy.drop_probability]

    result = gold + sorted(chosen)
    if policy.shuffle:
        rng.shuffle(result)
    return result


def truncate(
    seq: AssembledSequence, max_elements: int
) -> tuple[AssembledSequence, list[int]]:
    """Trim the text tail so the sequence fits ``max_elements``.

    The label prompt is always preserved in full. Entities whose element
    span crosses or lies beyond the cut are removed and their instance
    indices reported.

    Raises:
        ConfigError: the prompt alone does not fit ``max_elements``.
    """
    if seq.text_offset > max_elements:
        raise ConfigError(
            f"label prompt occupies {seq.text_offset} elements, "
            f"exceeding max_elements={max_elements}"
        )
    if len(seq.elements) <= max_elements:
        return seq, []

    kept_spans: list[EntitySpan] = []
    kept_ids: list[int] = []
    dropped: list[int] = []
    for span, ent_id in zip(seq.entity_element_spans, seq.entity_ids):
        if span.end < max_elements:
            kept_spans.append(span)
            kept_ids.append(ent_id)
        else:
            dropped.append(ent_id)

    trimmed = AssembledSequence(
        elements=seq.elements[:max_elements],
        labels=list(seq.labels),
        label_element_indices=list(seq.label_element_indices),
        text_offset=seq.text_offset,
        entity_element_spans=kept_spans,
        entity_ids=kept_ids,
    )
    return trimmed, dropped


def truncated_view(
    instance: InputInstance, seq: AssembledSequence
) -> tuple[InputInstance, list[int]]:
    """Re-express an instance against a (possibly truncated) sequence.

    Returns the instance restricted to the sequence's surviving tokens and
    entities, with relations re-indexed onto the surviving roster, plus the
    mapping from new entity indices to original ones (``seq.entity_ids``).
    Relations touching a dropped entity are removed.
    """
    keep = seq.entity_ids
    if len(keep) == len(instance.entities) and seq.num_text_tokens == len(instance.tokens):
        return instance, list(keep)

    old_to_new = {old: new for new, old in enumerate(keep)}
    spans = seq.entity_token_spans()
    relations = [
        type(rel)(old_to_new[rel.head], old_to_new[rel.tail], rel.label)
        for rel in instance.relations
        if rel.head in old_to_new and rel.tail in old_to_new
    ]
    clusters = None
    if instance.clusters is not None:
        clusters = []
        for cluster in instance.clusters:
            mapped = [old_to_new[m] for m in cluster if m in old_to_new]
            if mapped:
                clusters.append(mapped)
    view = InputInstance(
        tokens=instance.tokens[: seq.num_text_tokens],
        entities=spans,
        relations=relations,
        doc_id=instance.doc_id,
        clusters=clusters,
    )
    return view, list(keep)


def prompt_length(num_labels: int) -> int:
    """Elements occupied by the label prompt (labels, separators, [SEP])."""
    if num_labels < 1:
        raise InvalidInputError("at least one label is required")
    return 2 * num_labels


def max_text_tokens(num_labels: int, max_elements: int) -> int:
    """Text capacity left once the label prompt is placed."""
    return max(0, max_elements - prompt_length(num_labels))

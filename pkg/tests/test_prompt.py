"""Input assembly, label regularization, and truncation."""
from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glirel.data import EntitySpan, InputInstance, Relation
from glirel.errors import ConfigError, InvalidInputError
from glirel.prompt import (
    LabelPolicy,
    assemble,
    max_text_tokens,
    prompt_length,
    regularize_labels,
    truncate,
    truncated_view,
)


def instance_with(tokens, entities=(), relations=()):
    return InputInstance(
        tokens=list(tokens), entities=list(entities), relations=list(relations)
    )


class TestAssemble:
    def test_two_labels_layout(self):
        inst = instance_with(["Apple", "was", "founded", "by", "Steve", "Jobs"])
        seq = assemble(["founded by", "located in"], inst)
        assert seq.elements == [
            "founded by", "[REL]", "located in", "[SEP]",
            "Apple", "was", "founded", "by", "Steve", "Jobs",
        ]
        assert seq.text_offset == 4
        assert seq.label_element_indices == [0, 2]

    def test_single_label_has_no_separator(self):
        seq = assemble(["r"], instance_with(["a"]))
        assert seq.elements == ["r", "[SEP]", "a"]
        assert seq.text_offset == 2

    def test_element_count_formula_25_labels_100_tokens(self):
        # counted by constructing: 2M + N
        labels = [f"label {i}" for i in range(25)]
        seq = assemble(labels, instance_with([f"t{i}" for i in range(100)]))
        assert len(seq.elements) == 150
        assert len(seq.elements) == 2 * 25 + 100

    def test_entity_spans_rebased(self):
        inst = instance_with(["a", "b", "c"], entities=[EntitySpan(1, 2)])
        seq = assemble(["x", "y"], inst)
        assert seq.entity_element_spans == [EntitySpan(5, 6)]
        assert seq.entity_ids == [0]

    def test_empty_labels_rejected(self):
        with pytest.raises(InvalidInputError):
            assemble([], instance_with(["a"]))

    def test_out_of_range_entity_rejected(self):
        inst = instance_with(["a", "b"])
        inst.entities.append(EntitySpan(1, 5))  # bypass constructor check
        with pytest.raises(InvalidInputError):
            assemble(["r"], inst)

    @given(
        num_labels=st.integers(min_value=1, max_value=30),
        num_tokens=st.integers(min_value=0, max_value=60),
    )
    @settings(max_examples=60, deadline=None)
    def test_layout_invariants(self, num_labels, num_tokens):
        labels = [f"l{i}" for i in range(num_labels)]
        seq = assemble(labels, instance_with([f"t{i}" for i in range(num_tokens)]))
        assert len(seq.elements) == 2 * num_labels + num_tokens
        assert seq.text_offset == 2 * num_labels
        assert seq.label_element_indices == [2 * t for t in range(num_labels)]
        assert seq.elements[seq.text_offset - 1] == "[SEP]"
        for t, idx in enumerate(seq.label_element_indices):
            assert seq.elements[idx] == labels[t]

    def test_entity_round_trip(self):
        tokens = ["t0", "t1", "t2", "t3", "t4"]
        inst = instance_with(tokens, entities=[EntitySpan(0, 1), EntitySpan(3, 4)])
        seq = assemble(["a", "b", "c"], inst)
        for k, span in enumerate(seq.entity_element_spans):
            assert seq.elements[span.start] == tokens[inst.entities[k].start]
            assert seq.elements[span.end] == tokens[inst.entities[k].end]

    def test_deterministic(self):
        inst = instance_with(["a", "b"], entities=[EntitySpan(0, 0)])
        first = assemble(["x", "y"], inst)
        second = assemble(["x", "y"], inst)
        assert first == second


class TestRegularizeLabels:
    def test_no_drop_deterministic_fill(self):
        policy = LabelPolicy(
            max_labels=3, drop_probability=0.0, shuffle=False, negative_pool={"n1", "n2"}
        )
        result = regularize_labels({"p1"}, policy, random.Random(0))
        assert result == ["p1", "n1", "n2"]

    def test_cap_equals_gold_size(self):
        policy = LabelPolicy(max_labels=2, drop_probability=0.0, shuffle=False)
        result = regularize_labels({"p1", "p2"}, policy, random.Random(0))
        assert sorted(result) == ["p1", "p2"]

    def test_drop_rate_monte_carlo(self):
        # per-negative survival over 10k trials must track 1 - drop_probability
        pool = {"n1", "n2", "n3", "n4"}
        policy = LabelPolicy(
            max_labels=5, drop_probability=0.5, shuffle=False, negative_pool=pool
        )
        rng = random.Random(7)
        survived = {n: 0 for n in pool}
        trials = 10_000
        for _ in range(trials):
            for label in regularize_labels({"g"}, policy, rng):
                if label in survived:
                    survived[label] += 1
        for label, count in survived.items():
            assert 0.47 <= count / trials <= 0.53, (label, count / trials)

    def test_gold_never_dropped(self):
        policy = LabelPolicy(
            max_labels=6, drop_probability=0.9, shuffle=True, negative_pool={"n1", "n2"}
        )
        rng = random.Random(3)
        for _ in range(200):
            result = regularize_labels({"g1", "g2"}, policy, rng)
            assert "g1" in result and "g2" in result

    def test_small_pool_pads_what_exists(self):
        policy = LabelPolicy(max_labels=10, drop_probability=0.0, shuffle=False,
                             negative_pool={"n1"})
        assert regularize_labels({"g"}, policy, random.Random(0)) == ["g", "n1"]

    def test_length_cap_and_distinct(self):
        policy = LabelPolicy(
            max_labels=4, drop_probability=0.0, shuffle=True,
            negative_pool={f"n{i}" for i in range(20)},
        )
        rng = random.Random(11)
        for _ in range(100):
            result = regularize_labels({"g"}, policy, rng)
            assert len(result) == 4
            assert len(set(result)) == 4
            assert "g" in result

    def test_same_seed_same_output(self):
        policy = LabelPolicy(
            max_labels=5, drop_probability=0.3, shuffle=True,
            negative_pool={f"n{i}" for i in range(9)},
        )
        one = regularize_labels({"g"}, policy, random.Random(42))
        two = regularize_labels({"g"}, policy, random.Random(42))
        assert one == two

    def test_zero_drop_matches_pipeline_without_drop_stage(self):
        # with drop_probability == 0 the rng stream must be identical to an
        # implementation that has no dropping logic at all
        def reference_no_drop(gold, policy, rng):
            gold = sorted(gold)
            pool = sorted(set(policy.negative_pool) - set(gold))
            want = policy.max_labels - len(gold)
            chosen = rng.sample(pool, min(want, len(pool)))
            result = gold + sorted(chosen)
            if policy.shuffle:
                rng.shuffle(result)
            return result

        policy = LabelPolicy(
            max_labels=6, drop_probability=0.0, shuffle=True,
            negative_pool={f"n{i}" for i in range(12)},
        )
        rng_a = random.Random(99)
        rng_b = random.Random(99)
        for _ in range(50):
            assert regularize_labels({"g1", "g2"}, policy, rng_a) == reference_no_drop(
                {"g1", "g2"}, policy, rng_b
            )
        # downstream draws stay aligned too
        assert rng_a.random() == rng_b.random()


class TestTruncate:
    def test_boundary_noop(self):
        labels = [f"l{i}" for i in range(25)]
        seq = assemble(labels, instance_with([f"t{i}" for i in range(100)]))
        out, dropped = truncate(seq, len(seq.elements))
        assert out == seq
        assert dropped == []

    def test_entity_crossing_cut_dropped_and_reported(self):
        inst = instance_with(
            [f"t{i}" for i in range(10)],
            entities=[EntitySpan(0, 1), EntitySpan(7, 9)],
        )
        seq = assemble(["a"], inst)  # text offset 2; second entity at elements 9..11
        out, dropped = truncate(seq, 10)
        assert dropped == [1]
        assert out.entity_ids == [0]
        assert len(out.elements) == 10

    def test_text_capacity_from_layout_formula(self):
        # oracle: the prompt occupies 2M elements, so max_elements - 2M
        # text elements survive (M=2 -> 512 - 4 = 508)
        inst = instance_with([f"t{i}" for i in range(600)])
        seq = assemble(["label one", "label two"], inst)
        out, dropped = truncate(seq, 512)
        assert prompt_length(2) == 4
        assert out.num_text_tokens == 508
        assert out.num_text_tokens == max_text_tokens(2, 512)
        assert len(out.elements) == 512

    def test_prompt_never_cut(self):
        labels = [f"l{i}" for i in range(5)]
        seq = assemble(labels, instance_with([f"t{i}" for i in range(50)]))
        out, _ = truncate(seq, 12)
        assert out.labels == labels
        assert out.text_offset == seq.text_offset
        assert out.elements[: out.text_offset] == seq.elements[: seq.text_offset]

    def test_labels_exceeding_budget_is_config_error(self):
        seq = assemble(["a", "b", "c"], instance_with(["x"]))
        with pytest.raises(ConfigError):
            truncate(seq, 5)  # prompt alone needs 6 elements

    def test_truncated_view_reindexes_relations(self):
        inst = instance_with(
            [f"t{i}" for i in range(10)],
            entities=[EntitySpan(0, 0), EntitySpan(4, 4), EntitySpan(9, 9)],
            relations=[Relation(0, 1, "keep"), Relation(0, 2, "lose")],
        )
        seq = assemble(["keep", "lose"], inst)
        cut, dropped = truncate(seq, 11)  # keeps 7 text tokens
        view, entity_ids = truncated_view(inst, cut)
        assert dropped == [2]
        assert entity_ids == [0, 1]
        assert len(view.tokens) == 7
        assert [r.label for r in view.relations] == ["keep"]
        assert view.entities == [EntitySpan(0, 0), EntitySpan(4, 4)]

"""Subword segmentation, encoding shapes, pooling, and checkpointing."""
from __future__ import annotations

import numpy as np
import pytest
import torch

from glirel.data import EntitySpan, InputInstance
from glirel.encoder import EncoderConfig, TransformerEncoder, tokenize_elements
from glirel.errors import ConfigError, InvalidInputError
from glirel.model import ModelConfig, RelationClassifier, load_checkpoint, save_checkpoint
from glirel.prompt import REL_TOKEN, SEP_TOKEN, assemble
from glirel.subword import SCHEME_ID, SubwordVocab, build_vocab

from conftest import simple_instance, tiny_model_config


@pytest.fixture
def vocab() -> SubwordVocab:
    return build_vocab(
        [["participation", "in", "votes", "matter"], ["a", "b", "cd"]],
        ["participation in"],
    )


class TestTokenizeElements:
    def test_rel_token_is_single_piece(self, vocab):
        assert len(vocab.encode_element(REL_TOKEN)) == 1
        assert len(vocab.encode_element(SEP_TOKEN)) == 1

    def test_multiword_label_pools_at_first_piece(self, vocab):
        inst = simple_instance()
        seq = assemble(["participation in"], inst)
        ids, first = tokenize_elements(seq, vocab)
        pieces = vocab.encode_element("participation in")
        assert len(pieces) >= 2
        assert ids[first[0] : first[0] + len(pieces)] == pieces
        assert pieces[0] == vocab.piece_id("participation")

    def test_unknown_word_falls_back_to_characters(self, vocab):
        pieces = vocab.encode_element("cdcd")
        assert len(pieces) == 4
        assert all(p != vocab.unk_id for p in pieces)  # chars c and d are known

    def test_unknown_character_maps_to_unk(self, vocab):
        pieces = vocab.encode_element("é")
        assert pieces == [vocab.unk_id]

    def test_single_char_element_is_own_position(self, vocab):
        seq = assemble(["a"], InputInstance(tokens=["a"]))
        ids, first = tokenize_elements(seq, vocab)
        assert first == [0, 1, 2]
        assert len(ids) == 3

    def test_first_piece_indices_strictly_increasing(self, vocab):
        inst = InputInstance(tokens=["votes", "zzz", "matter"])
        seq = assemble(["participation in", "unknownlabel"], inst)
        ids, first = tokenize_elements(seq, vocab)
        assert all(b > a for a, b in zip(first, first[1:]))
        assert len(ids) >= len(seq.elements)

    def test_vocab_round_trip(self, vocab):
        payload = vocab.to_dict()
        assert payload["scheme"] == SCHEME_ID
        clone = SubwordVocab.from_dict(payload)
        assert clone.pieces == vocab.pieces


class TestEncoderShapes:
    def make_encoder(self, vocab, **overrides):
        defaults = dict(hidden_dim=32, num_layers=1, num_heads=2, ffn_dim=64,
                        max_positions=64)
        defaults.update(overrides)
        torch.manual_seed(0)
        return TransformerEncoder(EncoderConfig(**defaults), vocab)

    def test_shape_contract(self, vocab):
        encoder = self.make_encoder(vocab)
        seq = assemble(["a", "b"], simple_instance(num_tokens=6))
        enc = encoder.encode(seq)
        assert enc.label_vectors.shape == (2, 32)
        assert enc.word_vectors.shape == (6, 32)
        assert enc.special_vectors.shape == (2, 32)  # one [REL], one [SEP]
        assert torch.isfinite(enc.label_vectors).all()
        assert torch.isfinite(enc.word_vectors).all()

    def test_determinism_bitwise(self, vocab):
        encoder = self.make_encoder(vocab)
        encoder.eval()
        seq = assemble(["a", "b"], simple_instance())
        with torch.no_grad():
            first = encoder.encode(seq)
            second = encoder.encode(seq)
        assert torch.equal(first.label_vectors, second.label_vectors)
        assert torch.equal(first.word_vectors, second.word_vectors)

    def test_too_long_sequence_rejected(self, vocab):
        encoder = self.make_encoder(vocab, max_positions=8)
        seq = assemble(["a"], InputInstance(tokens=["a"] * 20))
        with pytest.raises(InvalidInputError):
            encoder.encode(seq)

    def test_hidden_dim_must_divide_heads(self):
        with pytest.raises(ConfigError):
            EncoderConfig(hidden_dim=30, num_heads=4)

    def test_pooling_is_exactly_first_piece_output(self, vocab):
        encoder = self.make_encoder(vocab)
        encoder.eval()
        inst = InputInstance(tokens=["votes", "matter"])
        seq = assemble(["participation in"], inst)
        ids, first = tokenize_elements(seq, vocab)
        with torch.no_grad():
            hidden = encoder(torch.tensor([ids]), torch.ones(1, len(ids), dtype=torch.bool))
            enc = encoder.encode(seq)
        assert torch.equal(enc.label_vectors[0], hidden[0, first[0]])
        assert torch.equal(enc.word_vectors[0], hidden[0, first[seq.text_offset]])

    def test_batch_padding_matches_single(self, vocab):
        # padding must not change any real element's vector
        encoder = self.make_encoder(vocab)
        encoder.eval()
        short = assemble(["a"], InputInstance(tokens=["votes"]))
        long = assemble(["a"], InputInstance(tokens=["votes", "matter", "b", "cd"]))
        with torch.no_grad():
            batched = encoder.encode_batch([short, long])
            alone = encoder.encode(short)
        torch.testing.assert_close(batched[0].word_vectors, alone.word_vectors)
        torch.testing.assert_close(batched[0].label_vectors, alone.label_vectors)


class TestZeroedAttentionClosedForm:
    """With attention output and FFN second layers zeroed, the network
    reduces to final_norm(token_embedding + position_embedding), which an
    independent numpy oracle reproduces; permuting text-token positions
    permutes word vectors accordingly."""

    def build(self, vocab):
        torch.manual_seed(1)
        encoder = TransformerEncoder(
            EncoderConfig(hidden_dim=16, num_layers=1, num_heads=1, ffn_dim=32,
                          max_positions=32),
            vocab,
        )
        with torch.no_grad():
            encoder.layers[0].attn.out.weight.zero_()
            encoder.layers[0].attn.out.bias.zero_()
            encoder.layers[0].ffn[2].weight.zero_()
            encoder.layers[0].ffn[2].bias.zero_()
        encoder.eval()
        return encoder

    @staticmethod
    def numpy_layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mean) / np.sqrt(var + 1e-5) * gamma + beta

    def test_pooled_vector_equals_embedding_sum(self, vocab):
        encoder = self.build(vocab)
        inst = InputInstance(tokens=["votes", "matter", "in"])
        seq = assemble(["a"], inst)
        ids, first = tokenize_elements(seq, vocab)
        with torch.no_grad():
            enc = encoder.encode(seq)
        tok = encoder.token_embedding.weight.detach().numpy()
        pos = encoder.position_embedding.weight.detach().numpy()
        gamma = encoder.final_norm.weight.detach().numpy()
        beta = encoder.final_norm.bias.detach().numpy()
        for word_idx in range(3):
            piece_pos = first[seq.text_offset + word_idx]
            expected = self.numpy_layer_norm(
                tok[ids[piece_pos]] + pos[piece_pos], gamma, beta
            )
            np.testing.assert_allclose(
                enc.word_vectors[word_idx].numpy(), expected, rtol=1e-5, atol=1e-6
            )

    def test_permuting_tokens_permutes_rows(self, vocab):
        encoder = self.build(vocab)
        a = assemble(["a"], InputInstance(tokens=["votes", "matter", "in"]))
        b = assemble(["a"], InputInstance(tokens=["matter", "votes", "in"]))
        with torch.no_grad():
            enc_a = encoder.encode(a)
            enc_b = encoder.encode(b)
        # same single-piece tokens at the same positions: rows follow the
        # token+position sum, so swapped tokens give swapped embed rows
        tok = encoder.token_embedding.weight.detach()
        pos = encoder.position_embedding.weight.detach()
        ids_a, first_a = tokenize_elements(a, vocab)
        for w in range(3):
            p = first_a[a.text_offset + w]
            manual = encoder.final_norm(tok[ids_a[p]] + pos[p])
            torch.testing.assert_close(enc_a.word_vectors[w], manual)
        assert not torch.allclose(enc_a.word_vectors[0], enc_b.word_vectors[0])


class TestGradientsDoublePrecision:
    def test_encoder_gradients_match_finite_differences(self, vocab):
        # double-precision FD on a scalar readout; sampled parameter slots
        from gradcheck import finite_difference_check

        torch.manual_seed(2)
        encoder = TransformerEncoder(
            EncoderConfig(hidden_dim=16, num_layers=1, num_heads=1, ffn_dim=32,
                          max_positions=32),
            vocab,
        ).double()
        seq = assemble(["a", "participation in"], simple_instance(num_tokens=4))
        ids, _ = tokenize_elements(seq, vocab)
        piece_ids = torch.tensor([ids])

        def loss_fn():
            out = encoder(piece_ids)
            return (out * out).sum() / out.numel()

        checked, _ = finite_difference_check(
            loss_fn,
            encoder.named_parameters(),
            eps=1e-6,
            rtol=1e-5,
            atol=1e-9,
            max_slots_per_tensor=4,
            rng=np.random.default_rng(0),
        )
        assert checked > 30


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        inst = simple_instance()
        model = RelationClassifier(
            tiny_model_config(), build_vocab([inst.tokens], ["rel a", "rel b"])
        )
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, extra={"step": 7})
        clone, extra = load_checkpoint(path)
        assert extra == {"step": 7}
        assert clone.config.to_dict() == model.config.to_dict()
        assert clone.vocab.pieces == model.vocab.pieces
        for (name, a), (name_b, b) in zip(
            model.state_dict().items(), clone.state_dict().items()
        ):
            assert name == name_b
            assert torch.equal(a, b), name

    def test_version_field_present_and_enforced(self, tmp_path):
        import json
        import struct

        inst = simple_instance()
        model = RelationClassifier(
            tiny_model_config(), build_vocab([inst.tokens], ["rel a"])
        )
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        (header_len,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8 : 8 + header_len])
        assert header["version"] == 1
        assert header["format"] == "glirel-checkpoint"
        header["version"] = 99
        blob = json.dumps(header).encode()
        path.write_bytes(struct.pack("<Q", len(blob)) + blob + raw[8 + header_len :])
        with pytest.raises(InvalidInputError):
            load_checkpoint(path)

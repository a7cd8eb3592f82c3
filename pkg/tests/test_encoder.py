"""Host encoder: insertion, heads, identity-at-init, checkpoints, tokenizers."""

import pytest
import torch

from compfreeze.compacter import CompacterConfig
from compfreeze.data import TAG_VOCAB, TokenSentence
from compfreeze.encoder import (
    CharTokenizer,
    TransformerEncoderModel,
    WordTokenizer,
    base_checkpoint_hash,
    encode_classification,
    encode_token_sentences,
    export_base_checkpoint,
    export_delta_checkpoint,
    forward_sequence,
    forward_tokens,
    insert_compacters,
    load_base_checkpoint,
    load_delta_checkpoint,
)
from compfreeze.freeze import (
    HeadSpec,
    compacter_entries,
    descriptor_from_model,
    encoder_entries,
    head_entries,
    plan_for_strategy,
)

from conftest import toy_descriptor, toy_model


def fresh_encoder(seed=0, **kwargs):
    return TransformerEncoderModel(toy_descriptor(**kwargs), seed=seed)


def char_batch(texts, max_len=32):
    return encode_classification(texts, CharTokenizer(), max_len)


class TestInsertion:
    def test_even_plan_places_six_blocks(self):
        model = toy_model("even_lc")
        assert sorted(model.compacter_layers()) == [2, 4, 6, 8, 10, 12]

    def test_single_plan_places_one_block(self):
        model = toy_model("single(5)")
        assert sorted(model.compacter_layers()) == [5]

    def test_insertion_is_non_destructive(self):
        encoder = fresh_encoder(seed=3)
        before = {name: p for name, p in encoder.named_parameters()}
        insert_compacters(encoder, plan_for_strategy("even_lc"),
                          CompacterConfig(hidden_dim=64),
                          HeadSpec("sequence_classification", 2), seed=4)
        for name, p in before.items():
            assert dict(encoder.named_parameters())[name] is p

    def test_dimension_mismatch_rejected(self):
        encoder = fresh_encoder()
        with pytest.raises(ValueError):
            insert_compacters(encoder, plan_for_strategy("even_lc"),
                              CompacterConfig(hidden_dim=128),
                              HeadSpec("sequence_classification", 2))

    def test_two_per_block_attaches_attention_blocks(self):
        model = toy_model("single(3)", placement="two_per_block")
        layer = model.encoder.layers[2]
        assert layer.attn_compacter is not None and layer.compacter is not None


class TestIdentityAtInit:
    @pytest.mark.parametrize("strategy", ["odd_lc", "even_lc", "upper_lc", "lower_lc",
                                          "single(7)", "triple(7,8,9)"])
    def test_adapted_hidden_states_equal_base(self, strategy):
        encoder = fresh_encoder(seed=5)
        ids, mask = char_batch(["example.com", "qzvkw9.net", "shop-cloud.org"])
        base = encoder(ids, mask)
        model = toy_model(strategy, seed=5)
        # same seed -> same base weights; run through the adapted encoder
        assert torch.equal(model.encoder(ids, mask), base)

    def test_two_per_block_identity(self):
        ids, mask = char_batch(["example.com", "111.io"])
        base = fresh_encoder(seed=6)(ids, mask)
        model = toy_model("even_lc", seed=6, placement="two_per_block")
        assert torch.equal(model.encoder(ids, mask), base)


class TestForward:
    def test_sequence_batch_shape(self):
        model = toy_model()
        ids, mask = char_batch(["a.com"] * 8)
        assert forward_sequence(model, ids, mask).shape == (8, 2)

    def test_empty_batch(self):
        model = toy_model()
        ids = torch.zeros((0, 4), dtype=torch.long)
        mask = torch.zeros((0, 4), dtype=torch.long)
        assert forward_sequence(model, ids, mask).shape == (0, 2)

    def test_token_logits_shape(self):
        model = toy_model(head=HeadSpec("token_classification", len(TAG_VOCAB)))
        sents = [TokenSentence(("evil.com", "hit", "europe"), ("S-DOM", "O", "S-LOC"))]
        tok = WordTokenizer.fit([" ".join(s.tokens) for s in sents])
        ids, mask, _ = encode_token_sentences(sents, tok, TAG_VOCAB, 16)
        out = forward_tokens(model, ids, mask)
        assert out.shape == (1, 3, 85)

    def test_head_kind_checked(self):
        model = toy_model()
        ids, mask = char_batch(["a.com"])
        with pytest.raises(ValueError):
            forward_tokens(model, ids, mask)

    def test_overlong_input_truncated_by_encoding(self):
        ids, mask = char_batch(["x" * 500], max_len=16)
        assert ids.shape[1] == 16

    def test_sequence_longer_than_positions_rejected(self):
        model = toy_model()
        long_ids = torch.ones((1, 80), dtype=torch.long)
        with pytest.raises(ValueError):
            model(long_ids, torch.ones_like(long_ids))

    def test_dense_projection_head(self):
        desc = toy_descriptor(head_style="dense_projection")
        encoder = TransformerEncoderModel(desc, seed=1)
        model = insert_compacters(encoder, plan_for_strategy("even_lc"),
                                  CompacterConfig(hidden_dim=64),
                                  HeadSpec("sequence_classification", 2, "dense_projection"),
                                  seed=2)
        ids, mask = char_batch(["a.com", "b.net"])
        assert model(ids, mask).shape == (2, 2)

    def test_padding_does_not_change_outputs(self):
        model = toy_model(seed=9)
        ids1, mask1 = char_batch(["short.io"])
        ids2 = torch.cat([ids1, torch.zeros((1, 6), dtype=torch.long)], dim=1)
        mask2 = torch.cat([mask1, torch.zeros((1, 6), dtype=torch.long)], dim=1)
        out1 = forward_sequence(model, ids1, mask1)
        out2 = forward_sequence(model, ids2, mask2)
        assert torch.allclose(out1, out2, atol=1e-5)


class TestDescriptorAgreement:
    def test_model_paths_match_constructed_descriptor(self):
        model = toy_model("odd_lc")
        d = model.encoder.desc
        plan = plan_for_strategy("odd_lc")
        expected = (
            encoder_entries(d.num_layers, d.hidden_dim, d.ffn_dim, d.vocab_size,
                            d.max_positions, d.type_vocab_size)
            + compacter_entries(plan, model.compacter_config)
            + head_entries(model.head_spec, d.hidden_dim)
        )
        got = descriptor_from_model(model)
        assert sorted((e.path, e.shape) for e in got) == \
            sorted((e.path, e.shape) for e in expected)


class TestCheckpoints:
    def test_base_round_trip(self, tmp_path):
        encoder = fresh_encoder(seed=11)
        ids, mask = char_batch(["roundtrip.com"])
        want = encoder(ids, mask)
        export_base_checkpoint(encoder, str(tmp_path / "base"))
        loaded = load_base_checkpoint(str(tmp_path / "base"))
        assert torch.equal(loaded(ids, mask), want)
        assert base_checkpoint_hash(loaded) == base_checkpoint_hash(encoder)

    def test_delta_round_trip_restores_trained_state(self, tmp_path):
        model = toy_model("even_lc", seed=12)
        with torch.no_grad():  # fake a training delta
            for layer_idx, block in model.compacter_layers().items():
                block.up.t.fill_(0.05 * layer_idx)
            model.head.classifier.weight.fill_(0.25)
        ids, mask = char_batch(["delta.org", "check.net"])
        want = model(ids, mask)
        export_base_checkpoint(model.encoder, str(tmp_path / "base"))
        export_delta_checkpoint(model, str(tmp_path / "delta"))
        encoder = load_base_checkpoint(str(tmp_path / "base"))
        restored = load_delta_checkpoint(str(tmp_path / "delta"), encoder)
        assert torch.equal(restored(ids, mask), want)

    def test_delta_only_stores_trainable_tensors(self, tmp_path):
        import numpy as np

        model = toy_model("single(1)", seed=13)
        export_delta_checkpoint(model, str(tmp_path / "delta"))
        stored = set(np.load(tmp_path / "delta" / "delta.npz").files)
        trainable = {n for n, f in model.mask.flags.items() if f}
        assert stored == trainable
        assert not any("attention.query" in name for name in stored)

    def test_hash_mismatch_rejected(self, tmp_path):
        model = toy_model("even_lc", seed=14)
        export_delta_checkpoint(model, str(tmp_path / "delta"))
        other = fresh_encoder(seed=99)
        with pytest.raises(ValueError):
            load_delta_checkpoint(str(tmp_path / "delta"), other)


class TestTokenizers:
    def test_char_tokenizer_stable_and_unknown(self):
        tok = CharTokenizer()
        ids = tok.encode("Ab.9")
        assert len(ids) == 4
        assert tok.encode("ab.9") == ids  # case folded
        assert tok.encode("é") == [1]  # unknown char -> UNK

    def test_word_tokenizer_fit_and_oov(self):
        tok = WordTokenizer.fit(["the cat sat", "the dog ran"])
        known = tok.encode("the cat")
        assert all(i >= 3 for i in known)
        assert tok.encode("zebra")[0] == 1

    def test_vocab_round_trip(self):
        tok = WordTokenizer.fit(["alpha beta gamma"])
        clone = WordTokenizer(tok.to_dict())
        assert clone.encode("alpha gamma beta") == tok.encode("alpha gamma beta")

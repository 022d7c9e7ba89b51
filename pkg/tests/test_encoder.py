"""Tests for the tokenizer, toy encoder, reconstruction head, checkpoints."""

import math

import numpy as np
import pytest

from progemb.encoder import (
    MASK_ID,
    PAD_ID,
    MaeDecoder,
    TokenSequence,
    Tokenizer,
    ToyEncoder,
    corrupt,
    encode,
    load_checkpoint,
    mae_loss,
    save_checkpoint,
    _encode_backward,
    _encode_parts,
    _mae_forward_backward,
)


class TestTokenSequence:
    def test_length(self):
        assert len(TokenSequence((2, 3, 4))) == 3

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            TokenSequence(())

    def test_negative_id_rejected(self):
        with pytest.raises(ValueError):
            TokenSequence((2, -1))


class TestTokenizer:
    def test_reserved_ids(self):
        tok = Tokenizer.from_texts(["a b"])
        assert tok.id_to_token[PAD_ID] == "<pad>"
        assert tok.id_to_token[MASK_ID] == "<mask>"

    def test_frequency_order_with_ties_by_string(self):
        tok = Tokenizer.from_texts(["b b a c c"])
        # two tokens with count 2 sort alphabetically, then the singleton
        assert tok.id_to_token[2:] == ("b", "c", "a")

    def test_rebuild_is_identical(self):
        texts = ["the cat sat", "the dog ran", "a cat ran"]
        assert Tokenizer.from_texts(texts) == Tokenizer.from_texts(texts)

    def test_limit_keeps_most_frequent(self):
        tok = Tokenizer.from_texts(["a a a b b c"], limit=2)
        assert set(tok.id_to_token[2:]) == {"a", "b"}

    def test_extra_texts_survive_the_limit(self):
        tok = Tokenizer.from_texts(["a a a b b c"], extra_texts=("query: z",), limit=2)
        vocab = set(tok.id_to_token)
        assert {"query:", "z", "a", "b"} <= vocab
        assert "c" not in vocab

    def test_encode_decode_round_trip(self):
        tok = Tokenizer.from_texts(["one two three"])
        seq = tok.encode_text("three one")
        assert tok.decode(seq) == "three one"

    def test_out_of_vocabulary_named_in_error(self):
        tok = Tokenizer.from_texts(["hello world"])
        with pytest.raises(ValueError, match="galaxy"):
            tok.encode_text("hello galaxy")

    def test_truncation(self):
        tok = Tokenizer.from_texts(["a b c d e"])
        assert len(tok.encode_text("a b c d e", max_len=3)) == 3

    def test_empty_text_rejected(self):
        tok = Tokenizer.from_texts(["a"])
        with pytest.raises(ValueError):
            tok.encode_text("   ")


def small_encoder(seed=3, vocab=12, dim=5):
    return ToyEncoder.create(vocab, dim, seed=seed)


class TestToyEncoder:
    def test_output_is_unit_norm(self):
        enc = small_encoder()
        rng = np.random.default_rng(0)
        for _ in range(20):
            seq = TokenSequence(tuple(rng.integers(2, 12, size=rng.integers(1, 9))))
            np.testing.assert_allclose(np.linalg.norm(encode(enc, seq)), 1.0, atol=1e-12)

    def test_deterministic(self):
        enc = small_encoder()
        seq = TokenSequence((2, 5, 7))
        np.testing.assert_array_equal(encode(enc, seq), encode(enc, seq))

    def test_token_order_irrelevant_under_mean_pooling(self):
        enc = small_encoder()
        a = encode(enc, TokenSequence((2, 5, 7)))
        b = encode(enc, TokenSequence((7, 2, 5)))
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_unknown_token_id_rejected(self):
        enc = small_encoder(vocab=6)
        with pytest.raises(ValueError, match="6"):
            encode(enc, TokenSequence((2, 6)))

    def test_backward_matches_finite_differences(self):
        """Gradients of c . encode(seq) with respect to both parameter
        matrices, checked by central differences."""
        enc = small_encoder(seed=9, vocab=8, dim=4)
        seq = TokenSequence((2, 3, 3, 7))
        rng = np.random.default_rng(1)
        c = rng.normal(size=4)

        emb, pooled, u_norm = _encode_parts(enc, seq)
        grads = {
            "token_table": np.zeros_like(enc.token_table),
            "projection": np.zeros_like(enc.projection),
        }
        _encode_backward(enc, seq, pooled, u_norm, emb, c, grads)

        h = 1e-6
        for name in ("token_table", "projection"):
            arr = getattr(enc, name)
            fd = np.zeros_like(arr)
            flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up = float(np.dot(c, encode(enc, seq)))
                flat[idx] = orig - h
                down = float(np.dot(c, encode(enc, seq)))
                flat[idx] = orig
                fd_flat[idx] = (up - down) / (2 * h)
            np.testing.assert_allclose(grads[name], fd, atol=1e-7)


class TestCorrupt:
    def test_masks_ceil_of_ratio(self):
        seq = TokenSequence((2, 3, 4, 5, 6))
        out = corrupt(seq, 0.3, seed=0)
        assert sum(1 for t in out.tokens if t == MASK_ID) == math.ceil(0.3 * 5)

    def test_zero_ratio_is_identity(self):
        seq = TokenSequence((2, 3, 4))
        assert corrupt(seq, 0.0, seed=1).tokens == seq.tokens

    def test_deterministic_per_seed(self):
        seq = TokenSequence(tuple(range(2, 22)))
        assert corrupt(seq, 0.4, seed=7).tokens == corrupt(seq, 0.4, seed=7).tokens
        assert corrupt(seq, 0.4, seed=7).tokens != corrupt(seq, 0.4, seed=8).tokens

    def test_unmasked_positions_unchanged(self):
        seq = TokenSequence(tuple(range(2, 12)))
        out = corrupt(seq, 0.5, seed=3)
        for before, after in zip(seq.tokens, out.tokens):
            assert after in (before, MASK_ID)

    def test_invalid_ratio_rejected(self):
        with pytest.raises(ValueError):
            corrupt(TokenSequence((2,)), 1.0, seed=0)


class TestMaeLoss:
    def test_uniform_logits_at_init(self):
        """The output matrix starts at zero, so every position predicts the
        uniform distribution and the loss is length * log(vocab)."""
        vocab, dim = 9, 4
        enc = ToyEncoder.create(vocab, dim, seed=2)
        dec = MaeDecoder.create(6, dim, vocab, seed=2)
        seq = TokenSequence((2, 5, 8))
        value = mae_loss(enc, dec, seq, corrupt(seq, 0.3, seed=0))
        np.testing.assert_allclose(value, 3 * math.log(vocab), atol=1e-12)

    def test_sequence_longer_than_positions_rejected(self):
        enc = ToyEncoder.create(6, 3, seed=0)
        dec = MaeDecoder.create(2, 3, 6, seed=0)
        seq = TokenSequence((2, 3, 4))
        with pytest.raises(ValueError):
            mae_loss(enc, dec, seq, seq)

    def test_length_mismatch_rejected(self):
        enc = ToyEncoder.create(6, 3, seed=0)
        dec = MaeDecoder.create(8, 3, 6, seed=0)
        with pytest.raises(ValueError):
            mae_loss(enc, dec, TokenSequence((2, 3)), TokenSequence((2, 3, 4)))

    def test_gradients_match_finite_differences(self):
        vocab, dim, positions = 7, 3, 5
        enc = ToyEncoder.create(vocab, dim, seed=4)
        dec = MaeDecoder.create(positions, dim, vocab, seed=4)
        # give the output matrix some structure so its gradient is nontrivial
        rng = np.random.default_rng(8)
        dec.output = rng.normal(0, 0.3, size=dec.output.shape)
        clean = TokenSequence((2, 6, 3, 5))
        corrupted = corrupt(clean, 0.4, seed=1)

        _, grads = _mae_forward_backward(enc, dec, clean, corrupted)
        h = 1e-6
        owners = {"token_table": enc, "projection": enc,
                  "position_table": dec, "output": dec}
        for name, owner in owners.items():
            arr = getattr(owner, name)
            fd = np.zeros_like(arr)
            flat, fd_flat = arr.reshape(-1), fd.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up = mae_loss(enc, dec, clean, corrupted)
                flat[idx] = orig - h
                down = mae_loss(enc, dec, clean, corrupted)
                flat[idx] = orig
                fd_flat[idx] = (up - down) / (2 * h)
            np.testing.assert_allclose(grads[name], fd, atol=1e-6,
                                       err_msg=f"gradient mismatch for {name}")

    def test_gradient_step_reduces_loss(self):
        vocab, dim = 10, 4
        enc = ToyEncoder.create(vocab, dim, seed=5)
        dec = MaeDecoder.create(6, dim, vocab, seed=5)
        clean = TokenSequence((2, 7, 4, 9))
        corrupted = corrupt(clean, 0.4, seed=2)
        before, grads = _mae_forward_backward(enc, dec, clean, corrupted)
        for name, owner in (("token_table", enc), ("projection", enc),
                            ("position_table", dec), ("output", dec)):
            setattr(owner, name, getattr(owner, name) - 0.05 * grads[name])
        after = mae_loss(enc, dec, clean, corrupted)
        assert after < before


class TestCheckpoint:
    def test_round_trip_preserves_everything(self, tmp_path):
        tok = Tokenizer.from_texts(["alpha beta gamma", "beta delta"])
        enc = ToyEncoder.create(len(tok.id_to_token), 6, seed=11)
        dec = MaeDecoder.create(10, 6, len(tok.id_to_token), seed=11)
        path = tmp_path / "model.bin"
        save_checkpoint(path, enc, tok, dec)
        ckpt = load_checkpoint(path)
        assert ckpt.tokenizer == tok
        np.testing.assert_array_equal(ckpt.encoder.token_table, enc.token_table)
        np.testing.assert_array_equal(ckpt.encoder.projection, enc.projection)
        np.testing.assert_array_equal(ckpt.decoder.position_table, dec.position_table)
        np.testing.assert_array_equal(ckpt.decoder.output, dec.output)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        tok = Tokenizer.from_texts(["x y z"])
        enc = ToyEncoder.create(len(tok.id_to_token), 4, seed=0)
        dec = MaeDecoder.create(5, 4, len(tok.id_to_token), seed=0)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(a, enc, tok, dec)
        ckpt = load_checkpoint(a)
        save_checkpoint(b, ckpt.encoder, ckpt.tokenizer, ckpt.decoder)
        assert a.read_bytes() == b.read_bytes()

    def test_decoder_optional(self, tmp_path):
        tok = Tokenizer.from_texts(["p q"])
        enc = ToyEncoder.create(len(tok.id_to_token), 3, seed=1)
        path = tmp_path / "enc.bin"
        save_checkpoint(path, enc, tok)
        assert load_checkpoint(path).decoder is None

    def test_corrupt_header_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b'{"format": "something-else", "version": 1}\n')
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        tok = Tokenizer.from_texts(["m n"])
        enc = ToyEncoder.create(len(tok.id_to_token), 3, seed=1)
        good = tmp_path / "good.bin"
        save_checkpoint(good, enc, tok)
        data = good.read_bytes()
        tampered = data.replace(b'"version": 1', b'"version": 99')
        bad = tmp_path / "bad.bin"
        bad.write_bytes(tampered)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(bad)

    def test_truncated_payload_rejected(self, tmp_path):
        tok = Tokenizer.from_texts(["u v w"])
        enc = ToyEncoder.create(len(tok.id_to_token), 3, seed=2)
        path = tmp_path / "trunc.bin"
        save_checkpoint(path, enc, tok)
        data = path.read_bytes()
        path.write_bytes(data[:-10])
        with pytest.raises(ValueError):
            load_checkpoint(path)

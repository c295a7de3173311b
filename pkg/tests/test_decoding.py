"""Greedy and beam decoding contracts."""

import numpy as np
import pytest

import captionforge.decoding as dec
from captionforge.corpus import EOS, SEP_TOKEN, SOS
from captionforge.decoding import (
    beam_decode,
    caption_text,
    greedy_decode,
    read_decodes,
    sequence_logprob,
    write_decodes,
)
from captionforge.errors import ConfigError
from captionforge.model import ModelConfig, build, decode_forward, encode


def tiny_params(seed, vocab_size=9, **kw):
    base = dict(
        variant="vanilla",
        n_layers_or_steps=1,
        d_model=8,
        n_heads=2,
        d_ff=16,
        dropout=0.0,
        vocab_size=vocab_size,
        max_decode_len=6,
        feature_dim=8,
    )
    base.update(kw)
    return build(ModelConfig(**base), seed)


def _scripted_logits(script, vocab):
    """Fake per-step logits: step i makes script[i] the argmax; after the
    script runs out, <eos> wins."""

    def fake(params, tokens, memory):
        step = len(tokens) - 1
        row = np.zeros(vocab)
        if step < len(script):
            row[script[step]] = 5.0
        else:
            row[EOS] = 5.0
        return row

    return fake


class TestGreedy:
    def test_immediate_eos_gives_empty_caption(self, monkeypatch):
        params = tiny_params(0)
        monkeypatch.setattr(dec, "_next_logits", _scripted_logits([EOS], 9))
        assert greedy_decode(params, np.zeros((2, 8))) == []

    def test_length_cap_with_eos_suppressed(self, monkeypatch):
        params = tiny_params(0)
        monkeypatch.setattr(dec, "_next_logits", _scripted_logits([5] * 50, 9))
        out = greedy_decode(params, np.zeros((2, 8)), max_len=5)
        assert out == [5] * 5

    def test_follows_script(self, monkeypatch):
        params = tiny_params(0)
        monkeypatch.setattr(dec, "_next_logits", _scripted_logits([4, 6, 8], 9))
        assert greedy_decode(params, np.zeros((2, 8))) == [4, 6, 8]

    def test_each_step_is_argmax_of_decode_forward(self):
        """Greedy output re-derived token by token from raw logits."""
        rng = np.random.default_rng(3)
        params = tiny_params(3)
        feats = rng.uniform(-1, 1, (4, 8))
        out = greedy_decode(params, feats)
        memory = encode(feats, params)
        tokens = [SOS]
        for tok in out:
            logits = decode_forward(np.array(tokens), memory, params).data[-1]
            assert int(np.argmax(logits)) == tok
            tokens.append(tok)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        params = tiny_params(4)
        feats = rng.uniform(-1, 1, (3, 8))
        assert greedy_decode(params, feats) == greedy_decode(params, feats)

    def test_overfit_model_reproduces_training_captions(self, tmp_path):
        """After memorizing a tiny corpus, greedy output is the caption."""
        from captionforge.corpus import SynthSpec, build_vocab, load_features_for, synth_corpus
        from captionforge.training import TrainConfig, train

        records, _ = synth_corpus(
            SynthSpec(n_classes=2, videos_per_class=3, feature_dim=16, rows_range=(3, 5)), seed=0, out_dir=tmp_path
        )
        vocab = build_vocab(records)
        config = ModelConfig(
            variant="vanilla",
            n_layers_or_steps=1,
            d_model=16,
            n_heads=2,
            d_ff=32,
            dropout=0.0,
            vocab_size=len(vocab),
            max_decode_len=12,
            feature_dim=16,
        )
        params, _ = train(records, vocab, config, TrainConfig(batch_size=3, lr0=2e-3, epochs=250, seed=0))
        feats = load_features_for(records)
        for r in records:
            out = vocab.decode(greedy_decode(params, feats[r.video_id].values))
            assert out == r.captions[0]


class TestBeam:
    def test_zero_width_rejected(self):
        params = tiny_params(0)
        with pytest.raises(ConfigError):
            beam_decode(params, np.zeros((2, 8)), width=0)

    def test_immediate_eos_any_width(self, monkeypatch):
        params = tiny_params(0)
        for width in (1, 2, 4):
            monkeypatch.setattr(dec, "_next_logits", _scripted_logits([EOS], 9))
            assert beam_decode(params, np.zeros((2, 8)), width=width) == []

    def test_width_one_equals_greedy_on_50_random_models(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            params = tiny_params(seed)
            feats = rng.uniform(-1, 1, (int(rng.integers(1, 5)), 8))
            assert beam_decode(params, feats, width=1) == greedy_decode(params, feats)

    def test_width_four_dominates_greedy_at_alpha_zero(self):
        """Un-normalized logprob of the beam result >= greedy's."""
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            params = tiny_params(seed)
            feats = rng.uniform(-1, 1, (3, 8))
            greedy = greedy_decode(params, feats)
            beam = beam_decode(params, feats, width=4, length_norm_alpha=0.0)
            lp_beam = sequence_logprob(params, feats, beam)
            lp_greedy = sequence_logprob(params, feats, greedy)
            assert lp_beam >= lp_greedy - 1e-12

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        params = tiny_params(6)
        feats = rng.uniform(-1, 1, (3, 8))
        a = beam_decode(params, feats, width=3)
        b = beam_decode(params, feats, width=3)
        assert a == b


class TestDecodeFile:
    def test_single_sentence_text(self):
        assert caption_text(["a", "man", "runs"]) == "a man runs"

    def test_paragraph_sentences_joined_with_periods(self):
        words = ["a", "man", "runs", SEP_TOKEN, "he", "stops"]
        assert caption_text(words) == "a man runs . he stops"

    def test_round_trip(self, tmp_path):
        decoded = {
            "v1": ["a", "man", "runs"],
            "v2": ["she", "sings", SEP_TOKEN, "loudly", "now"],
        }
        path = tmp_path / "decodes.tsv"
        write_decodes(path, decoded)
        back = read_decodes(path)
        assert back["v1"] == [["a", "man", "runs"]]
        assert back["v2"] == [["she", "sings"], ["loudly", "now"]]

    def test_lines_sorted_and_tab_separated(self, tmp_path):
        path = tmp_path / "d.tsv"
        write_decodes(path, {"b": ["x"], "a": ["y"]})
        lines = path.read_text().strip().splitlines()
        assert lines == ["a\ty", "b\tx"]

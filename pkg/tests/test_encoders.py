"""
File: test_encoders.py
Purpose: Tests for tokenization and the text/image transformer encoders
Version: 1.0.0
Last Updated: 2026-10-16
"""
import numpy as np
import pytest

from src.ag_adapter import AdapterConfig, AdapterState
from src.config import CAPTION_TEMPLATES, EOS_TOKEN, PAD_TOKEN
from src.encoders import (ImageEncoderParams, ModelConfig, TextEncoderParams, Vocabulary, default_words,
                          encode_image, encode_text, patchify, tokenize)
from src.exceptions import ConfigurationError, ContractError, DimensionError, VocabularyError


class TestVocabulary:
    """Test suite for the word-level vocabulary."""

    def test_specials_first(self):
        vocab = Vocabulary.default()
        assert vocab.words[:2] == [PAD_TOKEN, EOS_TOKEN]
        assert vocab.pad_id == 0
        assert vocab.eos_id == 1
        assert len(vocab) < ModelConfig().vocab_size

    def test_template_words_covered(self):
        words = set(default_words())
        for template in CAPTION_TEMPLATES:
            for word in template.split():
                if not word.startswith("{"):
                    assert word in words

    def test_tokenize_layout(self):
        vocab = Vocabulary.default()
        ids = tokenize("A Red circle", vocab)
        assert ids.shape == (16,)
        assert ids[0] == vocab.ids["a"]
        assert ids[1] == vocab.ids["red"]
        assert ids[3] == vocab.eos_id
        assert np.all(ids[4:] == vocab.pad_id)

    def test_unknown_word(self):
        with pytest.raises(VocabularyError) as exc:
            tokenize("a purple circle")
        assert exc.value.word == "purple"

    def test_too_long(self):
        with pytest.raises(ContractError):
            tokenize(" ".join(["red"] * 16))

    def test_invalid_vocabularies(self):
        with pytest.raises(ConfigurationError):
            Vocabulary(["red", PAD_TOKEN, EOS_TOKEN])
        with pytest.raises(ConfigurationError):
            Vocabulary([PAD_TOKEN, EOS_TOKEN, "red", "red"])

    def test_save_and_load(self, tmp_out):
        vocab = Vocabulary.default()
        vocab.save(tmp_out / "vocab.txt")
        assert Vocabulary.from_file(tmp_out / "vocab.txt").words == vocab.words


class TestModelConfig:
    """Test suite for encoder shape validation."""

    def test_patch_must_divide(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(patch=7)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(d_vision=30, n_heads=4)

    def test_dict_round_trip_ignores_unknown(self):
        config = ModelConfig(d=32, d_text=32, d_vision=32)
        values = dict(config.to_dict(), unused=1)
        assert ModelConfig.from_dict(values) == config


class TestTextEncoder:
    """Test suite for the text transformer."""

    def test_unit_norm_batch(self, tiny_config, rng):
        params = TextEncoderParams.create(tiny_config, rng)
        toks = Vocabulary.default().tokenize_batch(["a red circle", "a photo of blue cross"])
        y = encode_text(params, toks, tiny_config)
        assert y.shape == (2, tiny_config.d)
        assert np.allclose(np.linalg.norm(y.data, axis=-1), 1.0, atol=1e-12)

    def test_single_sequence(self, tiny_config, rng):
        params = TextEncoderParams.create(tiny_config, rng)
        toks = tokenize("a red circle")
        assert encode_text(params, toks, tiny_config).shape == (tiny_config.d,)

    def test_padding_is_masked(self, tiny_config, rng):
        params = TextEncoderParams.create(tiny_config, rng)
        toks = tokenize("big green square")
        before = encode_text(params, toks, tiny_config).data
        params.tok_embed.data[0] += 50.0
        after = encode_text(params, toks, tiny_config).data
        assert np.allclose(before, after, atol=1e-12)

    def test_requires_one_eos(self, tiny_config, rng):
        params = TextEncoderParams.create(tiny_config, rng)
        toks = np.zeros((1, 16), dtype=np.int64)
        toks[0, :3] = [4, 5, 6]
        with pytest.raises(ContractError):
            encode_text(params, toks, tiny_config)


class TestImageEncoder:
    """Test suite for patchify and the image transformer."""

    def test_patchify_layout(self, rng):
        images = rng.integers(0, 256, size=(2, 64, 64, 3)).astype(np.uint8)
        patches = patchify(images, 16)
        assert patches.shape == (2, 16, 16 * 16 * 3)
        assert patches.min() >= -1.0 and patches.max() <= 1.0
        expected = images[1, 0:16, 16:32].astype(np.float64).reshape(-1) / 127.5 - 1.0
        assert np.allclose(patches[1, 1], expected)

    def test_shapes(self, tiny_config, rng):
        params = ImageEncoderParams.create(tiny_config, rng)
        images = rng.integers(0, 256, size=(3, 64, 64, 3)).astype(np.uint8)
        batch = encode_image(params, images, tiny_config)
        assert batch.shape == (3, tiny_config.d)
        assert np.allclose(np.linalg.norm(batch.data, axis=-1), 1.0, atol=1e-12)
        single = encode_image(params, images[0], tiny_config)
        assert np.allclose(single.data, batch.data[0], atol=1e-12)

    def test_bad_image_shape(self, tiny_config, rng):
        params = ImageEncoderParams.create(tiny_config, rng)
        with pytest.raises(DimensionError):
            encode_image(params, np.zeros((1, 32, 32, 3), dtype=np.uint8), tiny_config)

    def test_instruction_needs_adapter(self, tiny_config, rng):
        params = ImageEncoderParams.create(tiny_config, rng)
        image = np.zeros((64, 64, 3), dtype=np.uint8)
        with pytest.raises(ConfigurationError):
            encode_image(params, image, tiny_config, instruction=np.ones(tiny_config.d))

    def test_stream_layout_trace(self, tiny_config, rng):
        params = ImageEncoderParams.create(tiny_config, rng)
        adapter = AdapterState.create(AdapterConfig(mode="early", d_mlp=8, n_heads=2), 2, tiny_config.d,
                                      tiny_config.d_vision, rng)
        images = rng.integers(0, 256, size=(2, 64, 64, 3)).astype(np.uint8)
        trace = []
        encode_image(params, images, tiny_config, instruction=rng.normal(size=(2, tiny_config.d)),
                     adapter=adapter, trace=trace)
        assert trace == [(2, tiny_config.n_patches + 1, tiny_config.d_vision)] * 2

    def test_identity_at_init(self, tiny_config, rng):
        params = ImageEncoderParams.create(tiny_config, rng)
        adapter = AdapterState.create(AdapterConfig(d_mlp=16, n_heads=2), tiny_config.n_image_layers,
                                      tiny_config.d, tiny_config.d_vision, rng)
        images = rng.integers(0, 256, size=(50, 64, 64, 3)).astype(np.uint8)
        instructions = rng.normal(size=(50, tiny_config.d))
        baseline = encode_image(params, images, tiny_config).data
        conditioned = encode_image(params, images, tiny_config, instruction=instructions, adapter=adapter).data
        assert np.array_equal(baseline, conditioned)

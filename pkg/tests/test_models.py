"""Tests for the two architecture builders and parameter accounting."""

import time

import numpy as np
import pytest

from binorm import autograd as ag
from binorm.config import FULL_LADDER, ModelConfig, load_model_config
from binorm.errors import ConfigurationError, DimensionError
from binorm.layers import BncvLayer, BnfcLayer, Dropout, GlobalAvgPool, MaxPool2D
from binorm.models import (
    LayerSpec,
    Model,
    build_bcvnn,
    build_blm,
    build_model,
    count_params,
    layer_specs,
    memory_summary,
)


def blm_closed_form(vocab, max_len, emb, blocks, mlp0, mlp1, ff=None):
    ff = ff or 2 * emb

    def proj(n_in, n_out):
        return n_in * n_out + n_out

    per_block = 4 * proj(emb, emb) + proj(emb, ff) + proj(ff, emb)
    return proj(vocab, emb) + proj(max_len, emb) + blocks * per_block + proj(emb, mlp0) + proj(mlp0, mlp1) + proj(mlp1, vocab)


class TestBcvnn:
    def test_full_stack(self):
        model = build_bcvnn(load_model_config("bcvnn"))
        convs = [leaf for leaf in model.leaves.values() if isinstance(leaf, BncvLayer)]
        dense = [leaf for leaf in model.leaves.values() if isinstance(leaf, BnfcLayer)]
        assert len(model.leaves) == 13
        assert [c.n_filters for c in convs] == list(FULL_LADDER)
        assert len(dense) == 3
        assert [type(s) for s in model.stack].count(MaxPool2D) == 4
        assert isinstance(model.stack[14], GlobalAvgPool)

    def test_full_parameter_count(self):
        assert count_params(build_bcvnn(load_model_config("bcvnn"))).total == 1_403_653

    def test_tiny_forward_is_a_distribution(self, tiny_bcvnn, rng):
        model = build_bcvnn(tiny_bcvnn, seed=3)
        out = model.predict(rng.standard_normal((5, 16, 16, 3)).astype(np.float32))
        assert out.shape == (5, 4)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_standard_twin_adds_dropout(self, tiny_bcvnn):
        tiny_bcvnn.binary = False
        rates = [layer.rate for layer in build_bcvnn(tiny_bcvnn).stack if isinstance(layer, Dropout)]
        assert rates == [0.4, 0.3]

    def test_even_filter(self):
        with pytest.raises(ConfigurationError, match="odd"):
            build_bcvnn(ModelConfig(kind="bcvnn", filter_size=4))

    def test_wrong_kind(self, tiny_blm):
        with pytest.raises(ConfigurationError):
            build_bcvnn(tiny_blm)

    def test_input_shape_checked(self, tiny_bcvnn):
        with pytest.raises(DimensionError):
            build_bcvnn(tiny_bcvnn).predict(np.zeros((1, 8, 8, 3), dtype=np.float32))


class TestBlm:
    @pytest.mark.parametrize("preset, millions", [("blm-small", 154.4), ("blm-large", 332.8)])
    def test_preset_sizes(self, preset, millions):
        total = count_params(build_blm(load_model_config(preset))).total
        assert abs(total / 1e6 - millions) / millions < 0.005

    def test_small_exact(self):
        assert count_params(build_blm(load_model_config("blm-small"))).total == 154_406_714

    def test_tiny_matches_closed_form(self):
        config = ModelConfig(kind="blm", max_len=12, emb_dim=16, num_heads=2, num_blocks=2, mlp_units_0=32, mlp_units_1=24, vocab_size=11)
        assert count_params(build_blm(config)).total == blm_closed_form(11, 12, 16, 2, 32, 24)

    def test_construction_is_lazy(self):
        start = time.perf_counter()
        model = build_blm(load_model_config("blm-large"))
        count_params(model)
        assert time.perf_counter() - start < 1.0
        assert not any(p.materialized for p in model.parameters().values())

    def test_registry_names(self, tiny_blm):
        names = list(build_blm(tiny_blm).parameters())
        assert names[:4] == ["embed.token.W", "embed.token.b", "embed.position.W", "embed.position.b"]
        assert "block2.attn.out.W" in names
        assert names[-2:] == ["head.out.W", "head.out.b"]

    @pytest.mark.parametrize("emb, heads, blocks, length", [(8, 2, 1, 3), (12, 3, 2, 5), (16, 4, 1, 1)])
    def test_forward_shapes(self, emb, heads, blocks, length, rng):
        config = ModelConfig(kind="blm", max_len=6, emb_dim=emb, num_heads=heads, num_blocks=blocks, mlp_units_0=16, mlp_units_1=8, vocab_size=7)
        out = build_blm(config, seed=1).predict(rng.integers(0, 7, size=(2, length)))
        assert out.shape == (2, length, 7)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError, match="divisible"):
            build_blm(ModelConfig(kind="blm", emb_dim=10, num_heads=4))


class TestAccounting:
    def test_single_dense_layer(self):
        spec = LayerSpec("fc", "dense", (3, 2))
        model = Model(ModelConfig(), [spec], {"fc": BnfcLayer(3, 2, name="fc")})
        assert count_params(model).total == 8

    @pytest.mark.parametrize("preset", ["tiny-bcvnn", "tiny-blm", "bcvnn"])
    def test_total_is_sum_of_layers(self, preset):
        counts = count_params(build_model(load_model_config(preset)))
        assert counts.total == sum(counts.per_layer.values())

    def test_binary_normalize_counts_zero(self, tiny_blm):
        counts = count_params(build_blm(tiny_blm))
        assert counts.per_layer["block1.norm1"] == 0

    def test_standard_twin_counts_normalize(self, tiny_blm):
        binary = count_params(build_blm(tiny_blm)).total
        tiny_blm.binary = False
        standard = count_params(build_blm(tiny_blm))
        assert standard.per_layer["block1.norm1"] == 2 * tiny_blm.emb_dim
        assert standard.total > binary

    def test_memory_ratio(self):
        summary = memory_summary(build_blm(load_model_config("blm-small")))
        assert summary.float_bytes == 4 * summary.parameters
        assert summary.ratio > 31


class TestTwinsAndDeterminism:
    @pytest.mark.parametrize("preset", ["tiny-bcvnn", "tiny-blm"])
    def test_same_seed_same_masters(self, preset):
        config = load_model_config(preset)
        a = build_model(config, seed=5).parameters()
        b = build_model(config, seed=5).parameters()
        for name in a:
            np.testing.assert_array_equal(a[name].value, b[name].value)

    def test_seed_changes_masters(self, tiny_bcvnn):
        a = build_model(tiny_bcvnn, seed=1).parameters()["block1.conv1.W"].value
        b = build_model(tiny_bcvnn, seed=2).parameters()["block1.conv1.W"].value
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("preset", ["tiny-bcvnn", "tiny-blm"])
    def test_twins_share_topology(self, preset):
        binary = load_model_config(preset)
        standard = load_model_config(preset)
        standard.binary = False
        assert layer_specs(binary) == layer_specs(standard)
        b, s = build_model(binary), build_model(standard)
        assert list(b.leaves) == list(s.leaves)
        for name, leaf in b.leaves.items():
            assert leaf.binary and not s.leaves[name].binary

    def test_standard_forward(self, tiny_blm, rng):
        tiny_blm.binary = False
        out = build_blm(tiny_blm).forward(ag.constant(rng.integers(0, 16, size=(2, 5))))
        np.testing.assert_allclose(out.value.sum(axis=-1), 1.0, atol=1e-6)

import numpy as np
import pytest

from mowe import numerics as nx
from mowe.config import PipelineConfig
from mowe.errors import ArgumentError, ConfigError, DimensionError
from mowe.numerics import Rng, tensor
from mowe.pipeline import (
    Adapter, AdapterSpec, DecoderSpec, LoraLinear, Projection, TinyDecoder, TokenBatch, adapt,
    adapter_spec, build_model, decode, decode_full, fuse_embeddings, project,
)
from mowe.trainer import train


def _decoder(vocab=12, d_model=8):
    return TinyDecoder(DecoderSpec(vocab_size=vocab, d_model=d_model, n_layers=1, n_heads=2, d_ff=8,
                                   lora_rank=2, lora_alpha=4.0), Rng(0, "decoder-test"))


def _tokens(targets=(3, 4, 0), d_model=8, audio_len=4):
    audio = tensor(Rng(1, "audio").normal((audio_len, d_model)))
    return TokenBatch(audio, (1, 2), targets)


class TestFuse:

    def test_feature_axis_concat(self):
        z_base = tensor(np.ones((6, 5)))
        z_mowe = tensor(np.full((6, 4), 2.0))
        fused = fuse_embeddings(z_base, z_mowe)
        assert fused.shape == (6, 9)
        np.testing.assert_array_equal(fused.data[:, :5], z_base.data)
        np.testing.assert_array_equal(fused.data[:, 5:], z_mowe.data)

    def test_missing_mixture_passes_base_through(self):
        z_base = tensor(np.ones((6, 5)))
        assert fuse_embeddings(z_base, None) is z_base

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            fuse_embeddings(tensor(np.ones((6, 5))), tensor(np.ones((7, 2))))


class TestAdapter:

    def test_grouped_gives_exact_token_count(self):
        spec = AdapterSpec("grouped-linear-gelu", seq_len=10, d_in=3, d_out=4, tokens=4)
        assert spec.group == 3
        assert spec.pad_end == 2
        out = adapt(tensor(Rng(0).normal((10, 3))), Adapter(spec, Rng(0)))
        assert out.shape == (4, 4)

    def test_grouped_one_frame_per_token(self):
        spec = AdapterSpec("grouped-linear-gelu", seq_len=100, d_in=2, d_out=3, tokens=100)
        assert spec.group == 1 and spec.pad_end == 0
        assert adapt(tensor(np.zeros((100, 2))), Adapter(spec, Rng(0))).shape == (100, 3)

    def test_grouped_padding_is_zero(self):
        """Test that the padded tail frames contribute nothing beyond the bias."""
        spec = AdapterSpec("grouped-linear-gelu", seq_len=5, d_in=1, d_out=1, tokens=3)
        adapter = Adapter(spec, Rng(0))
        adapter.weight.data[:] = 1.0
        out = adapt(tensor(np.arange(1.0, 6.0).reshape(5, 1)), adapter)
        pre = np.array([1 + 2, 3 + 4, 5 + 0], dtype=float)
        np.testing.assert_allclose(out.data[:, 0], nx.gelu(tensor(pre)).data)

    def test_strided_conv_token_count(self):
        spec = AdapterSpec("strided-conv", seq_len=800, d_in=2, d_out=3, kernel=8, stride=8)
        assert spec.out_tokens == 100 and spec.pad_end == 0
        assert adapt(tensor(np.zeros((800, 2))), Adapter(spec, Rng(0))).shape == (100, 3)

    def test_strided_conv_pads_ragged_tail(self):
        spec = AdapterSpec("strided-conv", seq_len=803, d_in=2, d_out=3, kernel=8, stride=8)
        assert spec.out_tokens == 101
        assert spec.pad_end == 5
        assert adapt(tensor(np.zeros((803, 2))), Adapter(spec, Rng(0))).shape == (101, 3)

    def test_short_sequence_is_a_config_error(self):
        config = PipelineConfig(adapter_tokens=100)
        with pytest.raises(ConfigError) as info:
            adapter_spec(config, seq_len=50, d_in=4)
        assert info.value.location == "pipeline.adapter_tokens"
        assert info.value.hint

    def test_strided_conv_accepts_short_sequences(self):
        config = PipelineConfig(adapter="strided-conv", adapter_tokens=100)
        assert adapter_spec(config, seq_len=50, d_in=4).out_tokens == 7

    def test_wrong_input_shape(self):
        spec = AdapterSpec("grouped-linear-gelu", seq_len=8, d_in=3, d_out=4, tokens=4)
        with pytest.raises(DimensionError):
            adapt(tensor(np.zeros((8, 2))), Adapter(spec, Rng(0)))


class TestProjection:

    def test_identity(self):
        z = tensor(Rng(0).normal((4, 3)))
        np.testing.assert_array_equal(project(z, Projection(3, 3, identity=True)).data, z.data)

    def test_identity_needs_square(self):
        with pytest.raises(ArgumentError):
            Projection(3, 4, identity=True)

    def test_zero_input_gives_bias_rows(self):
        projection = Projection(3, 5, Rng(0))
        projection.bias.data[:] = np.arange(5.0)
        out = project(tensor(np.zeros((4, 3))), projection)
        np.testing.assert_array_equal(out.data, np.tile(np.arange(5.0), (4, 1)))


class TestLora:

    def test_zero_b_matches_base_weight(self):
        layer = LoraLinear("q", 4, 4, rank=2, alpha=4.0, rng=Rng(0))
        x = tensor(Rng(1).normal((3, 4)))
        np.testing.assert_allclose(layer(x).data, x.data @ layer.weight.data, rtol=0, atol=1e-14)

    def test_update_is_scaled_low_rank_product(self):
        layer = LoraLinear("q", 4, 4, rank=2, alpha=4.0, rng=Rng(0))
        layer.lora_b.data[:] = Rng(2).normal((2, 4))
        x = tensor(Rng(1).normal((3, 4)))
        expected = x.data @ layer.weight.data + 2.0 * (x.data @ layer.lora_a.data) @ layer.lora_b.data
        np.testing.assert_allclose(layer(x).data, expected, rtol=1e-12)

    def test_only_factors_are_trainable(self):
        layer = LoraLinear("q", 4, 4, rank=2, alpha=4.0, rng=Rng(0))
        x = tensor(Rng(1).normal((3, 4)))
        nx.sum_all(layer(x)).backward()
        assert layer.weight.grad is None
        assert layer.lora_b.grad is not None and np.any(layer.lora_b.grad)
        # B starts at zero, so A's first gradient vanishes
        np.testing.assert_array_equal(layer.lora_a.grad, np.zeros((4, 2)))

    def test_rank_must_be_positive(self):
        with pytest.raises(ArgumentError):
            DecoderSpec(lora_rank=0)

    def test_heads_must_divide_width(self):
        with pytest.raises(ArgumentError):
            DecoderSpec(d_model=10, n_heads=4)


class TestDecoder:

    def test_token_batch_layout(self):
        tokens = _tokens()
        assert tokens.prompt_len == 6
        assert tokens.text_ids == [1, 2, 3, 4]
        assert tokens.length == 8
        np.testing.assert_array_equal(np.flatnonzero(tokens.loss_mask), [5, 6, 7])

    def test_decode_rows_match_full_logits(self):
        decoder = _decoder()
        tokens = _tokens()
        full = decode_full(tokens, decoder)
        scored = decode(tokens, decoder)
        assert full.shape == (8, 12)
        assert scored.shape == (3, 12)
        np.testing.assert_allclose(scored.data, full.data[tokens.loss_mask], rtol=1e-12)

    def test_causal_prefix_is_unchanged(self):
        """Test that changing a later token leaves every earlier position's logits untouched."""
        decoder = _decoder()
        first = decode_full(_tokens(targets=(3, 4, 0)), decoder).data
        second = decode_full(_tokens(targets=(3, 7, 0)), decoder).data
        # target[1] enters the input at position prompt_len + 1 = 7
        np.testing.assert_allclose(first[:7], second[:7], rtol=0, atol=1e-12)
        assert not np.array_equal(first[7], second[7])

    def test_audio_width_must_match(self):
        with pytest.raises(DimensionError):
            decode(_tokens(d_model=6), _decoder())

    def test_empty_targets(self):
        with pytest.raises(ArgumentError):
            decode(TokenBatch(tensor(np.zeros((4, 8))), (1,), ()), _decoder())

    def test_decoder_weights_are_frozen(self):
        named = _decoder().parameters()
        frozen = [name for name, t in named.items() if not t.requires_grad]
        trainable = [name for name, t in named.items() if t.requires_grad]
        assert "decoder.embed" in frozen and "decoder.unembed" in frozen
        assert all(name.endswith((".lora_a", ".lora_b")) for name in trainable)


class TestMoweModel:

    def test_forward_shapes(self, toy_model, toy_dataset):
        sample = toy_dataset.samples[0]
        out = toy_model.forward(sample)
        assert out.logits.shape == (len(sample.target_ids), 12)
        assert out.next_token.shape == (1,)
        assert out.mixture.z_mowe.shape == (8, 2 * 2)

    def test_fused_width_follows_mode(self, toy, toy_dataset):
        sample = toy_dataset.samples[0]
        for mode, width in (("off", 5), ("dep", 7), ("indep-x2", 9)):
            model = build_model(toy.override({"routing.mode": mode}), seed=0)
            z, _ = model.embed(sample, training=False)
            assert z.shape == (8, width)

    def test_mode_off_has_no_routing(self, toy, toy_dataset):
        model = build_model(toy.override({"routing.mode": "off"}), seed=0)
        assert model.pool.size == 0
        loss = model.loss_total(toy_dataset.samples[:2])
        assert loss.routing.total.item() == 0.0
        assert loss.total.item() == pytest.approx(loss.next_token.item())

    def test_loss_is_linear_in_routing_weight(self, toy, toy_dataset):
        batch = toy_dataset.samples[:2]
        light = build_model(toy.override({"routing.loss_weight": 0.1}), seed=0).loss_total(batch, training=False)
        heavy = build_model(toy.override({"routing.loss_weight": 0.5}), seed=0).loss_total(batch, training=False)
        assert light.next_token.item() == heavy.next_token.item()
        gap = heavy.total.item() - light.total.item()
        assert gap == pytest.approx(0.4 * light.routing.total.item(), rel=1e-9, abs=1e-12)

    def test_empty_batch(self, toy_model):
        with pytest.raises(ArgumentError):
            toy_model.loss_total([])

    def test_gradients_reach_lora_and_routers_only_where_trainable(self, toy_model, toy_dataset):
        loss = toy_model.loss_total(toy_dataset.samples[:2], training=True)
        loss.total.backward()
        for name, t in toy_model.frozen_parameters().items():
            assert t.grad is None, name
        assert toy_model.decoder.layers[0].q.lora_b.grad is not None
        assert toy_model.routers.parameters()["routers.0.W_dep"].grad is not None

    def test_base_encoder_is_trained(self, toy_model, toy_dataset):
        trainable = toy_model.trainable_parameters()
        base = [name for name in trainable if name.startswith("encoders.base.")]
        assert base
        toy_model.loss_total(toy_dataset.samples[:2], training=True).total.backward()
        assert trainable["encoders.base.in.w"].grad is not None

    def test_active_params_counts_base_and_selected(self, toy_model, toy_dataset):
        out = toy_model.forward(toy_dataset.samples[0], training=False)
        expected = toy_model.pool.base.count_params() + sum(
            toy_model.pool.weak[k].count_params() for k in out.mixture.active_encoders())
        assert toy_model.active_params(out.mixture) == expected
        assert 1 <= len(out.mixture.active_encoders()) <= 2

    def test_same_seed_same_model(self, toy):
        a = build_model(toy, seed=3).parameters()
        b = build_model(toy, seed=3).parameters()
        assert list(a) == list(b)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_frozen_weights_survive_training(self, toy, toy_splits):
        """Test that training leaves every frozen tensor bitwise identical."""
        train_set, _ = toy_splits
        model = build_model(toy, seed=0)
        before = {name: t.data.copy() for name, t in model.frozen_parameters().items()}
        trainable_before = {name: t.data.copy() for name, t in model.trainable_parameters().items()}
        train(toy, train_set, model)
        for name, t in model.frozen_parameters().items():
            np.testing.assert_array_equal(t.data, before[name], err_msg=name)
        assert any(not np.array_equal(t.data, trainable_before[name])
                   for name, t in model.trainable_parameters().items())

    def test_parameter_gradients_match_finite_differences(self, toy_model, toy_dataset):
        batch = toy_dataset.samples[:1]
        params = {name: t for name, t in toy_model.trainable_parameters().items()
                  if name in ("adapter.w", "projection.w", "routers.0.W_dep")}
        report = nx.check_gradients(lambda: toy_model.loss_total(batch, training=False).total, params,
                                    max_coords=4)
        assert report.passed(1e-3)

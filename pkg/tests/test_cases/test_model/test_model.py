# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

import numpy as np
import pytest
from scipy.special import expit

from kinedecode import tensor as T
from kinedecode.model import ConfigError, ModelConfig, ModelParams
from kinedecode.model.blocks import Embedding, FCHead, MultiConvBlock, SEBlock, SelfAttentionBlock
from kinedecode.model.decoder import HybridDecoder
from kinedecode.tensor import Tensor, check_gradients
from kinedecode.train import mse_loss

TINY = dict(in_channels_eeg=4, window_samples=32, large_kernel=5, large_features=2,
            branch_kernels=(3, 5), branch_features=2, pool_k=4, pool_s=4, se_reduction=2,
            embed_dim=16, heads=2, head_dim=8, dropout=0.0)


def block_params(block, seed=0, randomize=True):
    """Initialize *block* and replace every tensor by random values."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    block.init_params(params, rng)
    if randomize:
        for _, t in params.items():
            t.values = rng.normal(scale=0.5, size=t.shape)
    return params


def test_multi_conv_output_shape():
    cfg = ModelConfig().validate()
    block = MultiConvBlock(cfg)
    params = block_params(block, randomize=False)
    x = np.random.default_rng(1).normal(size=(2, 32, 250))
    out = block(params, Tensor(x))
    assert out.shape == (2, 24, 32, 62)
    assert cfg.pooled_length == 62


def test_multi_conv_identity_kernels():
    cfg = ModelConfig(in_channels_eeg=8, window_samples=20, large_kernel=1, large_features=1,
                      branch_kernels=(1,), branch_features=1, pool_k=1, pool_s=1,
                      use_se=False).validate()
    block = MultiConvBlock(cfg)
    params = block_params(block, randomize=False)
    params["large.w"].values = np.ones((1, 1, 1))
    params["branch0.w"].values = np.ones((1, 1, 1))
    # positive input passes both ELUs unchanged
    x = np.random.default_rng(2).uniform(0.1, 1.0, size=(3, 8, 20))
    out = block(params, Tensor(x))
    np.testing.assert_allclose(out.values[:, 0], x, rtol=0, atol=1e-15)


def test_window_shorter_than_large_kernel():
    with pytest.raises(ConfigError) as e:
        ModelConfig(window_samples=50).validate()
    assert e.value.key == "model.window_samples"


@pytest.mark.parametrize("kwargs,key", [
    (dict(embed_dim=100), "model.embed_dim"),
    (dict(out_dim=4), "model.out_dim"),
    (dict(branch_kernels=(7, 16)), "model.branch_kernels"),
    (dict(branch_kernels=()), "model.branch_kernels"),
    (dict(se_reduction=5), "model.se_reduction"),
    (dict(dropout=1.0), "model.dropout"),
    (dict(in_channels_emg=-1), "model.in_channels_emg"),
    (dict(in_channels_emg=5, emg_se=True, emg_se_reduction=2), "model.emg_se_reduction"),
    (dict(in_channels_emg=5, emg_se=True, emg_se_reduction=0), "model.emg_se_reduction"),
])
def test_config_errors(kwargs, key):
    with pytest.raises(ConfigError) as e:
        ModelConfig(**kwargs).validate()
    assert e.value.key == key


def test_config_dict_round_trip():
    cfg = ModelConfig(in_channels_emg=5, branch_kernels=(3, 9))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"kernel": 3})


def test_se_squeeze_of_constant_map():
    block = SEBlock(ModelConfig(), 32)
    x = Tensor(np.full((2, 32, 24, 62), 3.5))
    np.testing.assert_allclose(block.squeeze(x).values, 3.5)


def test_se_saturated_gate_is_identity():
    block = SEBlock(ModelConfig(), 32)
    params = block_params(block, randomize=False)
    params["se.b2"].values = np.full(32, 40.0)
    x = np.random.default_rng(3).normal(size=(2, 32, 4, 5))
    np.testing.assert_allclose(block(params, Tensor(x)).values, x, rtol=0, atol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_se_matches_direct_evaluation(seed):
    block = SEBlock(ModelConfig(), 32)
    params = block_params(block, seed)
    x = np.random.default_rng(100 + seed).normal(size=(2, 32, 6, 7))
    out = block(params, Tensor(x)).values

    w1, b1 = params["se.w1"].values, params["se.b1"].values
    w2, b2 = params["se.w2"].values, params["se.b2"].values
    expected = np.empty_like(x)
    for n in range(x.shape[0]):
        z = np.array([x[n, c].sum() / x[n, c].size for c in range(32)])
        s = expit(np.maximum(z @ w1 + b1, 0.0) @ w2 + b2)
        assert np.all((s > 0) & (s < 1))
        for c in range(32):
            expected[n, c] = s[c] * x[n, c]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_embedding_shapes():
    cfg = ModelConfig().validate()
    embed = Embedding(cfg)
    params = block_params(embed, randomize=False)
    z = embed(params, Tensor(np.zeros((3, 32, 24, 62))))
    assert z.shape == (3, 62, 128)
    fusion = ModelConfig(in_channels_emg=5)
    assert fusion.embed_input_width == (32 + 5) * 24
    assert Embedding(fusion).param_specs()["w"].shape == ((32 + 5) * 24, 128)


def test_embedding_zero_weights_give_zero_tokens():
    cfg = ModelConfig(in_channels_emg=5).validate()
    embed = Embedding(cfg)
    params = block_params(embed, randomize=False)
    for name in ("embed.w", "embed.pos"):
        params[name].values = np.zeros(params[name].shape)
    rng = np.random.default_rng(4)
    z = embed(params, Tensor(rng.normal(size=(2, 32, 24, 62))),
              Tensor(rng.normal(size=(2, 5, 24, 62))))
    assert np.all(z.values == 0.0)


def test_embedding_modality_checks():
    fusion = ModelConfig(in_channels_emg=5).validate()
    embed = Embedding(fusion)
    params = block_params(embed, randomize=False)
    with pytest.raises(ValueError):
        embed(params, Tensor(np.zeros((1, 32, 24, 62))))
    with pytest.raises(ValueError):
        embed(params, Tensor(np.zeros((1, 32, 24, 62))), Tensor(np.zeros((1, 5, 24, 61))))
    eeg_only = Embedding(ModelConfig())
    with pytest.raises(ValueError):
        eeg_only(block_params(eeg_only), Tensor(np.zeros((1, 32, 24, 62))),
                 Tensor(np.zeros((1, 5, 24, 62))))


def test_attention_single_token():
    cfg = ModelConfig(embed_dim=8, heads=2, head_dim=4)
    block = SelfAttentionBlock(cfg)
    params = block_params(block, 5)
    _, weights = block(params, Tensor(np.random.default_rng(5).normal(size=(3, 1, 8))))
    np.testing.assert_array_equal(weights, 1.0)


def test_attention_zero_query_is_uniform():
    cfg = ModelConfig(embed_dim=4, heads=1, head_dim=4)
    block = SelfAttentionBlock(cfg)
    params = block_params(block, randomize=False)
    params["attn.wq"].values = np.zeros((4, 4))
    _, weights = block(params, Tensor(np.eye(4)[None]))
    np.testing.assert_allclose(weights, 0.25, rtol=0, atol=1e-15)


def _attention_oracle(z, params, heads, head_dim, eps=1e-5):
    wq, wk, wv, wo = (params["attn.%s" % n].values for n in ("wq", "wk", "wv", "wo"))
    g, b = params["attn.ln.g"].values, params["attn.ln.b"].values
    out = np.empty_like(z)
    all_weights = np.empty((z.shape[0], heads, z.shape[1], z.shape[1]))
    for n in range(z.shape[0]):
        q, k, v = z[n] @ wq, z[n] @ wk, z[n] @ wv
        context = []
        for i in range(heads):
            cols = slice(i * head_dim, (i + 1) * head_dim)
            scores = q[:, cols] @ k[:, cols].T / np.sqrt(head_dim)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            w = e / e.sum(axis=1, keepdims=True)
            all_weights[n, i] = w
            context.append(w @ v[:, cols])
        r = z[n] + np.concatenate(context, axis=1) @ wo
        mu = r.mean(axis=1, keepdims=True)
        var = np.maximum(((r - mu) ** 2).mean(axis=1, keepdims=True), eps)
        out[n] = (r - mu) / np.sqrt(var) * g + b
    return out, all_weights


@pytest.mark.parametrize("seed", range(20))
def test_attention_matches_direct_evaluation(seed):
    cfg = ModelConfig(embed_dim=32, heads=4, head_dim=8)
    block = SelfAttentionBlock(cfg)
    params = block_params(block, seed)
    z = np.random.default_rng(200 + seed).normal(size=(2, 9, 32))
    out, weights = block(params, Tensor(z))
    expected, expected_weights = _attention_oracle(z, params, 4, 8)
    np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-10)
    np.testing.assert_allclose(weights, expected_weights, rtol=0, atol=1e-10)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, rtol=0, atol=1e-10)


def test_head_pools_constant_tokens():
    cfg = ModelConfig(embed_dim=8, heads=2, head_dim=4)
    head = FCHead(cfg)
    params = block_params(head, randomize=False)
    z = np.tile(np.arange(8.0), (2, 5, 1))
    out, latent = head(params, Tensor(z))
    np.testing.assert_allclose(latent.values, z[:, 0], rtol=0, atol=1e-12)
    assert out.shape == (2, 6)
    labels = FCHead(cfg.classifier())
    assert labels(block_params(labels), Tensor(z))[0].shape == (2, 5)


def test_decoder_output_dims():
    cfg = ModelConfig(**TINY)
    x = np.random.default_rng(6).normal(size=(3, 4, 32))
    out = HybridDecoder(cfg)(x)
    assert out.values.shape == (3, 6)
    assert out.latent.shape == (3, 16)
    assert out.attention.shape == (3, 2, 8, 8)
    proba = HybridDecoder(cfg.classifier()).predict_proba(x)
    assert proba.shape == (3, 5)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ConfigError):
        HybridDecoder(cfg).predict_proba(x)


def test_decoder_is_deterministic():
    cfg = ModelConfig(**TINY)
    x = np.random.default_rng(7).normal(size=(4, 4, 32))
    a, _ = HybridDecoder(cfg, seed=3).predict(x)
    b, _ = HybridDecoder(cfg, seed=3).predict(x)
    c, _ = HybridDecoder(cfg, seed=4).predict(x)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_fusion_differs_only_at_embedding_width():
    eeg = HybridDecoder(ModelConfig(**TINY)).param_shapes()
    fusion = HybridDecoder(ModelConfig(**dict(TINY, in_channels_emg=5))).param_shapes()
    assert eeg.keys() == fusion.keys()
    differ = [name for name in eeg if eeg[name] != fusion[name]]
    assert differ == ["embed.w"]
    assert fusion["embed.w"][0] - eeg["embed.w"][0] == 5 * 4


def test_emg_se_bottleneck():
    gated = ModelConfig(**dict(TINY, in_channels_emg=5, emg_se=True))
    shapes = HybridDecoder(gated).param_shapes()
    assert tuple(shapes["se_emg.w1"]) == (5, 1)
    wide = ModelConfig(**dict(TINY, in_channels_emg=5, emg_se=True, emg_se_reduction=1))
    assert tuple(HybridDecoder(wide).param_shapes()["se_emg.w2"]) == (5, 5)
    ModelConfig(in_channels_emg=5, emg_se_reduction=2).validate()


def test_fusion_needs_emg():
    decoder = HybridDecoder(ModelConfig(**dict(TINY, in_channels_emg=5)))
    x = np.zeros((1, 4, 32))
    with pytest.raises(ValueError):
        decoder(x)
    assert decoder(x, np.zeros((1, 5, 32))).values.shape == (1, 6)


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(**dict(TINY, in_channels_emg=5))
    decoder = HybridDecoder(cfg, seed=11)
    path = tmp_path / "decoder.kda"
    decoder.save(path, extra={"norm.k_min": np.arange(6.0)})
    loaded, extra = HybridDecoder.load(path)
    assert loaded.config == cfg
    np.testing.assert_array_equal(extra["norm.k_min"], np.arange(6.0))
    rng = np.random.default_rng(8)
    x, e = rng.normal(size=(2, 4, 32)), rng.normal(size=(2, 5, 32))
    np.testing.assert_array_equal(loaded.predict(x, e)[0], decoder.predict(x, e)[0])
    for name, t in decoder.params.items():
        np.testing.assert_array_equal(loaded.params[name].values, t.values)


def test_checkpoint_shape_mismatch():
    params = HybridDecoder(ModelConfig(**TINY)).params
    with pytest.raises(ConfigError):
        HybridDecoder(ModelConfig(**dict(TINY, embed_dim=32, head_dim=16)), params=params)


def test_full_model_gradient_check():
    cfg = ModelConfig(**TINY)
    decoder = HybridDecoder(cfg, seed=1)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 4, 32))
    target = rng.normal(size=(2, 6))

    def loss():
        return mse_loss(decoder(x).values, target)

    errors = check_gradients(loss, decoder.params.tensors())
    assert len(errors) == len(decoder.params)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, worst


def test_attention_rows_in_full_forward():
    decoder = HybridDecoder(ModelConfig(**TINY), seed=2)
    out = decoder(np.random.default_rng(10).normal(size=(5, 4, 32)))
    np.testing.assert_allclose(out.attention.sum(axis=-1), 1.0, rtol=0, atol=1e-10)


def test_se_gate_strictly_inside_unit_interval():
    cfg = ModelConfig(**TINY)
    decoder = HybridDecoder(cfg, seed=3)
    h = T.transpose(decoder.conv(decoder.params, Tensor(np.ones((1, 4, 32)))), (0, 2, 1, 3))
    s = decoder.se.scale(decoder.params, h).values
    assert np.all((s > 0) & (s < 1))

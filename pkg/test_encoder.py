import numpy as np
import pytest

from autodiff import Linear, Tensor, gradcheck
from config import TrainConfig
from encoder import (PatchMerging, SwinBlock, TinyCNN, TinyCNNConfig, TinySwin, TinySwinConfig, WindowAttention,
                     build_encoder, encode_input, patch_embed, patch_merge, shift_attention_mask,
                     shift_region_labels, shifted_window_attention, window_attention)
from errors import ConfigurationError, DimensionError

F64 = np.float64


def tokens(rng, b=1, h=8, w=8, c=8):
    return Tensor(rng.normal(size=(b, h, w, c)), dtype=F64)


def attention(dim=8, window=4, heads=2, seed=0):
    return WindowAttention(dim, window, heads, np.random.default_rng(seed), dtype=F64)


def masked_attention_oracle(x, attn, m, shift):
    """Token-by-token attention on the rolled grid, restricted to each token's seam region."""
    b, h, w, c = x.shape
    heads = attn.num_heads
    hd = c // heads
    xr = np.roll(x, (-shift, -shift), axis=(1, 2))
    regions = shift_region_labels(h, w, m, shift) if shift else np.zeros((h, w), dtype=int)
    qkv = xr @ attn.qkv.weight.data + attn.qkv.bias.data
    q = qkv[..., :c].reshape(b, h, w, heads, hd)
    k = qkv[..., c:2 * c].reshape(b, h, w, heads, hd)
    v = qkv[..., 2 * c:].reshape(b, h, w, heads, hd)
    table = attn.relative_position_bias_table.data
    out = np.zeros((b, h, w, c))
    for n in range(b):
        for i in range(h):
            for j in range(w):
                r0, c0 = (i // m) * m, (j // m) * m
                members = [(a, e) for a in range(r0, r0 + m) for e in range(c0, c0 + m)
                           if regions[a, e] == regions[i, j]]
                for hh in range(heads):
                    logits = np.array([
                        q[n, i, j, hh] @ k[n, a, e, hh] * attn.scale
                        + table[(i % m - a % m + m - 1) * (2 * m - 1) + (j % m - e % m + m - 1), hh]
                        for a, e in members])
                    p = np.exp(logits - logits.max())
                    p /= p.sum()
                    out[n, i, j, hh * hd:(hh + 1) * hd] = sum(pk * v[n, a, e, hh] for pk, (a, e) in zip(p, members))
    out = out @ attn.proj.weight.data + attn.proj.bias.data
    return np.roll(out, (shift, shift), axis=(1, 2))


# ------------------------------------------------------------ patch embed

def test_patch_embed_shape_and_zero_image():
    proj = Linear(16, 32, rng=np.random.default_rng(0))
    out = patch_embed(Tensor(np.zeros((2, 1, 64, 64))), proj, 4)
    assert out.shape == (2, 16, 16, 32)
    np.testing.assert_array_equal(out.data, 0.0)


def test_patch_embed_identity_projection_flattens_patches():
    x = np.arange(64, dtype=F64).reshape(1, 1, 8, 8)
    proj = Linear(16, 16, bias=False, dtype=F64)
    proj.weight.data = np.eye(16)
    out = patch_embed(Tensor(x, dtype=F64), proj, 4).data
    for i in range(2):
        for j in range(2):
            np.testing.assert_array_equal(out[0, i, j], x[0, 0, 4 * i:4 * i + 4, 4 * j:4 * j + 4].reshape(-1))


def test_patch_embed_rejects_indivisible_image():
    with pytest.raises(ConfigurationError):
        patch_embed(Tensor(np.zeros((1, 1, 10, 10))), Linear(16, 4), 4)


# --------------------------------------------------------- window attention

def test_window_attention_is_local():
    rng = np.random.default_rng(1)
    attn = attention()
    x = tokens(rng)
    base = window_attention(x, attn, 4).data
    bumped = x.data.copy()
    bumped[0, 1, 2] += 10.0
    out = window_attention(Tensor(bumped, dtype=F64), attn, 4).data
    np.testing.assert_array_equal(out[:, 4:, :], base[:, 4:, :])
    np.testing.assert_array_equal(out[:, :4, 4:], base[:, :4, 4:])
    assert np.abs(out[:, :4, :4] - base[:, :4, :4]).max() > 0


def test_single_window_is_global_attention():
    rng = np.random.default_rng(2)
    attn = attention()
    x = tokens(rng, b=2, h=4, w=4)
    out = window_attention(x, attn, 4).data
    np.testing.assert_allclose(out, masked_attention_oracle(x.data, attn, 4, 0), atol=1e-10)


def test_identical_tokens_attend_uniformly():
    attn = attention()
    attn.relative_position_bias_table.data = np.zeros_like(attn.relative_position_bias_table.data)
    x = Tensor(np.broadcast_to(np.random.default_rng(3).normal(size=8), (1, 8, 8, 8)).copy(), dtype=F64)
    _, weights = window_attention(x, attn, 4, return_attention=True)
    np.testing.assert_allclose(weights, 1.0 / 16, atol=1e-12)


@pytest.mark.parametrize("shift", [0, 2])
def test_attention_rows_sum_to_one(shift):
    _, weights = shifted_window_attention(tokens(np.random.default_rng(4)), attention(), 4, shift=shift,
                                          return_attention=True)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)


def test_window_attention_rejects_indivisible_grid():
    with pytest.raises(ConfigurationError):
        window_attention(tokens(np.random.default_rng(0), h=6, w=6), attention(), 4)


# -------------------------------------------------------- shifted windows

def test_zero_shift_equals_window_attention():
    x = tokens(np.random.default_rng(5))
    attn = attention()
    np.testing.assert_array_equal(shifted_window_attention(x, attn, 4, shift=0).data,
                                  window_attention(x, attn, 4).data)


def test_seam_pairs_receive_no_attention():
    x = tokens(np.random.default_rng(6))
    _, weights = shifted_window_attention(x, attention(), 4, return_attention=True)
    mask = shift_attention_mask(8, 8, 4, 2)
    across = np.broadcast_to((mask != 0)[:, None], weights.shape)
    assert across.any()
    assert weights[across].max() < 1e-6


def test_shifted_attention_matches_roll_and_mask_oracle():
    rng = np.random.default_rng(7)
    attn = attention(seed=3)
    x = tokens(rng, b=2)
    out = shifted_window_attention(x, attn, 4).data
    np.testing.assert_allclose(out, masked_attention_oracle(x.data, attn, 4, 2), atol=1e-10)


def test_region_labels_split_last_window_row():
    labels = shift_region_labels(8, 8, 4, 2)
    assert len(np.unique(labels)) == 9
    assert labels[0, 0] == labels[3, 3]
    assert labels[4, 4] != labels[6, 6]


# ----------------------------------------------------------- patch merging

def test_patch_merging_shapes_and_zero_input():
    merge = PatchMerging(32, np.random.default_rng(0))
    out = merge(Tensor(np.zeros((1, 16, 16, 32))))
    assert out.shape == (1, 8, 8, 64)
    np.testing.assert_array_equal(out.data, 0.0)


def test_patch_merge_gathers_neighbourhoods():
    rng = np.random.default_rng(8)
    t = rng.normal(size=(1, 4, 4, 3))
    reduction = Linear(12, 12, bias=False, dtype=F64)
    reduction.weight.data = np.eye(12)
    out = patch_merge(Tensor(t, dtype=F64), reduction).data
    for i in range(2):
        for j in range(2):
            expected = np.concatenate([t[0, 2 * i, 2 * j], t[0, 2 * i + 1, 2 * j],
                                       t[0, 2 * i, 2 * j + 1], t[0, 2 * i + 1, 2 * j + 1]])
            np.testing.assert_array_equal(out[0, i, j], expected)


def test_patch_merge_rejects_odd_grid():
    with pytest.raises(ConfigurationError):
        PatchMerging(4, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 4, 4))))


# ------------------------------------------------------------------ blocks

def test_block_with_zero_output_projections_is_identity():
    block = SwinBlock(8, 2, (8, 8), 4, 2, 4.0, np.random.default_rng(0), dtype=F64)
    for p in (block.attn.proj.weight, block.attn.proj.bias, block.fc2.weight, block.fc2.bias):
        p.data = np.zeros_like(p.data)
    x = tokens(np.random.default_rng(9))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_block_clamps_window_to_small_grid():
    block = SwinBlock(8, 2, (2, 2), 4, 2, 4.0, np.random.default_rng(0))
    assert block.window_size == 2 and block.shift == 0


def test_default_tiny_swin_parameter_count():
    assert TinySwin().parameter_count() == 143468


@pytest.mark.parametrize("encoder_cls, config", [
    (TinySwin, TinySwinConfig(img_size=32)),
    (TinyCNN, TinyCNNConfig(img_size=32)),
])
def test_encoder_output_shape_and_determinism(encoder_cls, config):
    x = encode_input(np.random.default_rng(0).uniform(-np.pi, np.pi, size=(3, 32, 32)))
    a = encoder_cls(config, np.random.default_rng(11))(x)
    b = encoder_cls(config, np.random.default_rng(11))(x)
    assert a.shape == (3, 128)
    np.testing.assert_array_equal(a.data, b.data)


def test_encoder_rejects_wrong_input_shape():
    with pytest.raises(DimensionError):
        TinySwin(TinySwinConfig(img_size=32))(Tensor(np.zeros((1, 1, 16, 16))))
    with pytest.raises(DimensionError):
        TinyCNN(TinyCNNConfig(img_size=32))(Tensor(np.zeros((1, 2, 32, 32))))


def test_last_layer_attention_maps_are_normalised():
    model = TinySwin(TinySwinConfig(img_size=32), np.random.default_rng(0))
    grids = model.last_layer_attention(encode_input(np.zeros((2, 32, 32))))
    assert grids.shape == (2, model.last_stage_heads, 4, 4)
    np.testing.assert_allclose(grids.sum(axis=(2, 3)), 1.0, atol=1e-6)


def _small_swin():
    cfg = TinySwinConfig(img_size=8, patch_size=2, window_size=2, embed_dim=4, depths=(2, 1), heads=(1, 2),
                         mlp_ratio=2.0, output_dim=3)
    return TinySwin(cfg, np.random.default_rng(0), dtype=F64)


def test_tiny_swin_gradcheck():
    model = _small_swin()
    rng = np.random.default_rng(12)
    x = Tensor(rng.uniform(-1, 1, size=(2, 1, 8, 8)), dtype=F64)
    g = rng.normal(size=(2, 3))
    assert model.stages[0].blocks[1].shift == 1
    assert gradcheck(lambda: (model(x) * g).sum(), model.parameters(), max_coords=6) < 1e-4


def test_tiny_cnn_gradcheck():
    model = TinyCNN(TinyCNNConfig(img_size=8, channels=(2, 3, 2), output_dim=3), np.random.default_rng(0), dtype=F64)
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(2, 1, 8, 8)), dtype=F64)
    g = rng.normal(size=(2, 3))
    assert gradcheck(lambda: (model(x) * g).sum(), model.parameters(), max_coords=6) < 1e-4


# ----------------------------------------------------------------- inputs

def test_input_encodings():
    phases = np.array([[[-np.pi, 0.0], [np.pi / 2, 3.0]]])
    x = encode_input(phases, "phase").data
    assert x.shape == (1, 1, 2, 2)
    assert x.min() >= -1.0 and x.max() < 1.0
    cs = encode_input(phases, "cossin").data
    assert cs.shape == (1, 2, 2, 2)
    np.testing.assert_allclose(cs[0, 0] ** 2 + cs[0, 1] ** 2, 1.0, atol=1e-6)
    with pytest.raises(ConfigurationError):
        encode_input(phases, "complex")


def test_build_encoder_follows_config():
    cnn = build_encoder(TrainConfig(encoder="tiny_cnn", grid_size=32), np.random.default_rng(0))
    assert cnn.kind == "tiny_cnn"
    swin = build_encoder(TrainConfig(grid_size=32, input_encoding="cossin"), np.random.default_rng(0))
    assert swin.kind == "tiny_swin" and swin.config.in_chans == 2

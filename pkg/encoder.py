# Feature extractor: tiny CNN dan tiny shifted-window transformer.
#
# Layout token: (B, H, W, C). Window: (B * nW, M*M, C).

import logging
import math
from dataclasses import dataclass

import numpy as np

from autodiff import (DEFAULT_DTYPE, LayerNorm, Linear, Module, Parameter, Tensor, concat,
                      conv2d, gelu, getitem, max_pool2d, no_grad, relu, reshape, roll, softmax,
                      transpose)
from errors import ConfigurationError, DimensionError

LOG = logging.getLogger(__name__)

MASK_LOGIT = -1e9


def encode_input(phases, encoding="phase", dtype=DEFAULT_DTYPE):
    """Wrapped phase (N, H, W) -> network input (N, C, H, W)."""
    phases = np.asarray(phases, dtype=np.float64)
    if phases.ndim == 2:
        phases = phases[None]
    if encoding == "phase":
        x = phases[:, None] / np.pi
    elif encoding == "cossin":
        x = np.stack([np.cos(phases), np.sin(phases)], axis=1)
    else:
        raise ConfigurationError(f"unknown input encoding '{encoding}'")
    return Tensor(x.astype(dtype))


# ================================================================= #
# ========================= WINDOW HELPERS ======================== #
# ================================================================= #

def _check_windows(h, w, window_size):
    if window_size < 1 or h % window_size or w % window_size:
        raise ConfigurationError(f"token grid {h}x{w} not divisible by window size {window_size}")


def window_partition(x, window_size):
    b, h, w, c = x.shape
    m = window_size
    x = reshape(x, (b, h // m, m, w // m, m, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, m * m, c))


def window_reverse(windows, window_size, h, w):
    m = window_size
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // m) * (w // m))
    x = reshape(windows, (b, h // m, w // m, m, m, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, h, w, c))


def relative_position_index(window_size):
    m = window_size
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (m - 1)
    return rel[:, :, 0] * (2 * m - 1) + rel[:, :, 1]


def shift_region_labels(h, w, window_size, shift):
    """Region id per token of the rolled grid; tokens of different regions never attend."""
    labels = np.zeros((h, w), dtype=np.int64)
    cuts = (slice(0, -window_size), slice(-window_size, -shift), slice(-shift, None))
    region = 0
    for hs in cuts:
        for ws in cuts:
            labels[hs, ws] = region
            region += 1
    return labels


def shift_attention_mask(h, w, window_size, shift):
    """(nW, M*M, M*M) additive mask: 0 inside a region, MASK_LOGIT across the seam."""
    m = window_size
    labels = shift_region_labels(h, w, m, shift)
    windows = labels.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(-1, m * m)
    same = windows[:, :, None] == windows[:, None, :]
    return np.where(same, 0.0, MASK_LOGIT)


# ================================================================= #
# ============================ ATTENTION ========================== #
# ================================================================= #

class WindowAttention(Module):
    """Multi-head self-attention inside M x M windows with a relative position bias."""

    def __init__(self, dim, window_size, num_heads, rng, dtype=DEFAULT_DTYPE):
        if dim % num_heads:
            raise ConfigurationError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng=rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng=rng, dtype=dtype)
        self.relative_position_bias_table = Parameter(
            rng.normal(0.0, 0.02, size=((2 * window_size - 1) ** 2, num_heads)), dtype=dtype)
        self._rel_index = relative_position_index(window_size).reshape(-1)

    def position_bias(self):
        n = self.window_size * self.window_size
        bias = reshape(getitem(self.relative_position_bias_table, self._rel_index), (n, n, self.num_heads))
        return transpose(bias, (2, 0, 1))

    def forward(self, windows, mask=None, return_attention=False):
        bw, n, c = windows.shape
        if c != self.dim or n != self.window_size ** 2:
            raise DimensionError(f"attention expects (*, {self.window_size ** 2}, {self.dim}), got {windows.shape}")
        hd = c // self.num_heads
        qkv = transpose(reshape(self.qkv(windows), (bw, n, 3, self.num_heads, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ transpose(k, (0, 1, 3, 2))
        logits = logits + self.position_bias()
        if mask is not None:
            nw = mask.shape[0]
            logits = reshape(logits, (bw // nw, nw, self.num_heads, n, n)) + mask[None, :, None]
            logits = reshape(logits, (bw, self.num_heads, n, n))
        attn = softmax(logits, axis=-1)
        out = reshape(transpose(attn @ v, (0, 2, 1, 3)), (bw, n, c))
        out = self.proj(out)
        if return_attention:
            return out, attn.data
        return out


def shifted_window_attention(tokens, attn, window_size, shift=None, return_attention=False):
    """Cyclic shift by `shift` (default M//2), masked window attention, shift back."""
    b, h, w, c = tokens.shape
    _check_windows(h, w, window_size)
    shift = window_size // 2 if shift is None else int(shift)
    x = roll(tokens, (-shift, -shift), axis=(1, 2)) if shift else tokens
    mask = shift_attention_mask(h, w, window_size, shift) if shift else None
    out, weights = attn(window_partition(x, window_size), mask, return_attention=True)
    x = window_reverse(out, window_size, h, w)
    if shift:
        x = roll(x, (shift, shift), axis=(1, 2))
    if return_attention:
        return x, weights
    return x


def window_attention(tokens, attn, window_size, return_attention=False):
    return shifted_window_attention(tokens, attn, window_size, shift=0, return_attention=return_attention)


def attention_to_grid(weights, h, w, window_size, shift):
    """Central-token attention rows of every window, placed back on the (h, w) grid.

    weights: (B * nW, heads, N, N) -> (B, heads, h, w).
    """
    m = window_size
    nw = (h // m) * (w // m)
    bw, heads, n, _ = weights.shape
    centre = (m // 2) * m + m // 2
    rows = weights[:, :, centre, :].reshape(bw // nw, h // m, w // m, heads, m, m)
    grid = rows.transpose(0, 3, 1, 4, 2, 5).reshape(bw // nw, heads, h, w)
    if shift:
        grid = np.roll(grid, (shift, shift), axis=(2, 3))
    return grid


# ================================================================= #
# ======================== PATCH OPERATIONS ======================= #
# ================================================================= #

def patch_embed(x, proj, patch_size):
    """(B, C, H, W) -> (B, H/p, W/p, embed) via a shared linear map of flattened p x p patches."""
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch size {p}")
    patches = reshape(x, (b, c, h // p, p, w // p, p))
    patches = reshape(transpose(patches, (0, 2, 4, 1, 3, 5)), (b, h // p, w // p, c * p * p))
    return proj(patches)


def patch_merge(tokens, reduction, norm=None):
    """Concatenate 2x2 neighbourhoods (4C) and project with `reduction`."""
    b, h, w, c = tokens.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"patch merging needs an even token grid, got {h}x{w}")
    x0 = tokens[:, 0::2, 0::2, :]
    x1 = tokens[:, 1::2, 0::2, :]
    x2 = tokens[:, 0::2, 1::2, :]
    x3 = tokens[:, 1::2, 1::2, :]
    x = concat([x0, x1, x2, x3], axis=-1)
    if norm is not None:
        x = norm(x)
    return reduction(x)


class PatchMerging(Module):
    def __init__(self, dim, rng, dtype=DEFAULT_DTYPE):
        self.norm = LayerNorm(4 * dim, dtype=dtype)
        self.reduction = Linear(4 * dim, 2 * dim, bias=False, rng=rng, dtype=dtype)

    def forward(self, tokens):
        return patch_merge(tokens, self.reduction, self.norm)


class SwinBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim, num_heads, resolution, window_size, shift, mlp_ratio, rng, dtype=DEFAULT_DTYPE):
        h, w = resolution
        if min(h, w) <= window_size:
            # window covers the grid: nothing to shift
            window_size, shift = min(h, w), 0
        _check_windows(h, w, window_size)
        self.resolution = (h, w)
        self.window_size = window_size
        self.shift = shift
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, window_size, num_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, int(dim * mlp_ratio), rng=rng, dtype=dtype)
        self.fc2 = Linear(int(dim * mlp_ratio), dim, rng=rng, dtype=dtype)

    def forward(self, x, return_attention=False):
        if tuple(x.shape[1:3]) != self.resolution:
            raise DimensionError(f"block built for {self.resolution} tokens, got {x.shape}")
        y, weights = shifted_window_attention(self.norm1(x), self.attn, self.window_size,
                                              shift=self.shift, return_attention=True)
        x = x + y
        x = x + self.fc2(gelu(self.fc1(self.norm2(x))))
        if return_attention:
            return x, weights
        return x


class SwinStage(Module):
    def __init__(self, blocks, downsample=None):
        self.blocks = list(blocks)
        self.downsample = downsample


@dataclass
class TinySwinConfig:
    img_size: int = 64
    in_chans: int = 1
    patch_size: int = 4
    window_size: int = 4
    embed_dim: int = 32
    depths: tuple = (2, 2)
    heads: tuple = (2, 4)
    mlp_ratio: float = 4.0
    output_dim: int = 128

    def validate(self):
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ConfigurationError("depths and heads must be non-empty and of equal length")
        if self.img_size % self.patch_size:
            raise ConfigurationError(f"image {self.img_size} not divisible by patch size {self.patch_size}")
        tokens = self.img_size // self.patch_size
        if tokens % (2 ** (len(self.depths) - 1)):
            raise ConfigurationError(f"{tokens} tokens per side cannot be merged {len(self.depths) - 1} times")
        return self


class TinySwin(Module):
    kind = "tiny_swin"

    def __init__(self, config=None, rng=None, dtype=DEFAULT_DTYPE):
        self.config = (config or TinySwinConfig()).validate()
        cfg = self.config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.output_dim = cfg.output_dim
        self.patch_proj = Linear(cfg.in_chans * cfg.patch_size ** 2, cfg.embed_dim, rng=rng, dtype=dtype)
        self.patch_norm = LayerNorm(cfg.embed_dim, dtype=dtype)
        res = cfg.img_size // cfg.patch_size
        dim = cfg.embed_dim
        self.stages = []
        for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.heads)):
            blocks = [SwinBlock(dim, heads, (res, res), cfg.window_size,
                                0 if j % 2 == 0 else cfg.window_size // 2, cfg.mlp_ratio, rng, dtype)
                      for j in range(depth)]
            last = i == len(cfg.depths) - 1
            self.stages.append(SwinStage(blocks, None if last else PatchMerging(dim, rng, dtype)))
            if not last:
                res //= 2
                dim *= 2
        self.norm = LayerNorm(dim, dtype=dtype)
        self.head = Linear(dim, cfg.output_dim, rng=rng, dtype=dtype)

    def _check_input(self, x):
        cfg = self.config
        expected = (cfg.in_chans, cfg.img_size, cfg.img_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"tiny_swin expects (B, {cfg.in_chans}, {cfg.img_size}, {cfg.img_size}), got {x.shape}")

    def forward_tokens(self, x, return_attention=False):
        self._check_input(x)
        t = self.patch_norm(patch_embed(x, self.patch_proj, self.config.patch_size))
        weights = None
        for stage in self.stages:
            for block in stage.blocks:
                t, weights = block(t, return_attention=True)
            if stage.downsample is not None:
                t = stage.downsample(t)
        t = self.norm(t)
        if return_attention:
            return t, weights
        return t

    def forward(self, x):
        return self.head(self.forward_tokens(x).mean(axis=(1, 2)))

    def last_layer_attention(self, x, raw=False):
        """Final block attention: raw (B*nW, heads, N, N) or central-token grids (B, heads, h, w)."""
        with no_grad():
            _, weights = self.forward_tokens(x, return_attention=True)
        if raw:
            return weights
        block = self.stages[-1].blocks[-1]
        h, w = block.resolution
        return attention_to_grid(weights, h, w, block.window_size, block.shift)

    @property
    def last_stage_heads(self):
        return self.config.heads[-1]


# ================================================================= #
# ============================ TINY CNN =========================== #
# ================================================================= #

class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, padding=1, rng=None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = math.sqrt(2.0 / (in_channels * kernel_size * kernel_size))
        self.padding = padding
        self.weight = Parameter(rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size)),
                                dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), dtype=dtype)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


@dataclass
class TinyCNNConfig:
    img_size: int = 64
    in_chans: int = 1
    channels: tuple = (8, 16, 32)
    output_dim: int = 128

    def validate(self):
        if self.img_size % (2 ** len(self.channels)):
            raise ConfigurationError(f"image {self.img_size} not divisible by {2 ** len(self.channels)}")
        return self


class TinyCNN(Module):
    """conv3x3-relu-maxpool blocks, flatten, dense."""
    kind = "tiny_cnn"

    def __init__(self, config=None, rng=None, dtype=DEFAULT_DTYPE):
        self.config = (config or TinyCNNConfig()).validate()
        cfg = self.config
        rng = rng if rng is not None else np.random.default_rng(0)
        self.output_dim = cfg.output_dim
        chans = (cfg.in_chans,) + tuple(cfg.channels)
        self.convs = [Conv2d(chans[i], chans[i + 1], rng=rng, dtype=dtype) for i in range(len(cfg.channels))]
        side = cfg.img_size // (2 ** len(cfg.channels))
        self.fc = Linear(chans[-1] * side * side, cfg.output_dim, rng=rng, dtype=dtype)

    def forward(self, x):
        cfg = self.config
        if x.ndim != 4 or tuple(x.shape[1:]) != (cfg.in_chans, cfg.img_size, cfg.img_size):
            raise DimensionError(f"tiny_cnn expects (B, {cfg.in_chans}, {cfg.img_size}, {cfg.img_size}), got {x.shape}")
        for conv in self.convs:
            x = max_pool2d(relu(conv(x)), 2)
        return self.fc(reshape(x, (x.shape[0], -1)))


def build_encoder(config, rng, dtype=DEFAULT_DTYPE):
    """Encoder named by config.encoder, sized for config.grid_size / input_encoding."""
    if config.encoder == "tiny_swin":
        cfg = TinySwinConfig(img_size=config.grid_size, in_chans=config.in_channels, output_dim=config.output_dim)
        encoder = TinySwin(cfg, rng, dtype)
    elif config.encoder == "tiny_cnn":
        cfg = TinyCNNConfig(img_size=config.grid_size, in_chans=config.in_channels, output_dim=config.output_dim)
        encoder = TinyCNN(cfg, rng, dtype)
    else:
        raise ConfigurationError(f"unknown encoder '{config.encoder}'")
    LOG.debug(">>> [MODEL] %s encoder on %dx%d input: %d parameters", encoder.kind, config.grid_size,
              config.grid_size, encoder.parameter_count())
    return encoder

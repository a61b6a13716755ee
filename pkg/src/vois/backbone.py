"""Dual-path hierarchical windowed-attention encoder.

A 2D image path and a 3D video path run four stages of windowed-attention
blocks in parallel; cross-attention blocks inject image features into the
video path at the configured stages (queries from video, keys/values from
image). The video path emits pyramid features f1..f4 at strides 4, 8, 16,
32 and widths C, 2C, 4C, 8C. Temporal extent is never downsampled.

The 2D path reuses the 3D windowed attention with a singleton leading axis
and window extent 1 on it, so both paths share one masking/partitioning
implementation.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Mlp, Module, MultiheadAttention, attention_core, merge_heads, split_heads
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass
class BackboneConfig:
    C: int = 96
    stage_depths: tuple = (2, 2, 6, 2)
    num_heads: tuple = (3, 6, 12, 24)
    window_2d: tuple = (7, 7)
    window_3d: tuple = (2, 7, 7)
    mlp_ratio: float = 4.0
    fuse_stages: tuple = (3, 4)
    image_size: tuple = (224, 224)   # (H_I, W_I)
    video_size: tuple = (36, 224, 224)  # (T, H_V, W_V)

    def validate(self):
        if len(self.stage_depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("stage_depths and num_heads must have 4 entries")
        for k in self.fuse_stages:
            if k not in (3, 4):
                raise ConfigError(f"fuse_stages may only contain 3 and 4, got {k}")
        hi, wi = self.image_size
        t, hv, wv = self.video_size
        for name, v in [("H_I", hi), ("W_I", wi), ("H_V", hv), ("W_V", wv)]:
            if v % 4:
                raise ConfigError(f"{name}={v} not divisible by the patch size 4")
        if t < 1:
            raise ConfigError("video needs at least one frame")
        for k in range(4):
            width = self.C * (1 << k)
            if width % self.num_heads[k]:
                raise ConfigError(f"stage {k + 1} width {width} not divisible by {self.num_heads[k]} heads")
        return self

    def stage_width(self, k):
        """Channel width of stage k (1-based)."""
        return self.C * (1 << (k - 1))


def backbone_output_shapes(cfg):
    """Pure shape algebra for f1..f4: stage k is T x H/(4*2^(k-1)) x W/(4*2^(k-1)) x 2^(k-1)*C.

    Odd intermediate extents are padded to even before merging, hence the
    ceil division; for extents divisible by 32 this is exact division.
    """
    t, h, w = cfg.video_size
    h, w = h // 4, w // 4
    shapes = []
    for k in range(1, 5):
        shapes.append((t, h, w, cfg.stage_width(k)))
        h, w = (h + 1) // 2, (w + 1) // 2
    return shapes


# -- patch handling -----------------------------------------------------


def patch_partition_2d(image):
    """[H, W, 3] -> [H/4, W/4, 48]; each token is its 4x4x3 patch raster-flattened."""
    h, w, c = image.shape
    if h % 4 or w % 4:
        raise ShapeError(f"image extents {h}x{w} not divisible by patch size 4")
    x = T.reshape(image, (h // 4, 4, w // 4, 4, c))
    return T.reshape(T.transpose(x, (0, 2, 1, 3, 4)), (h // 4, w // 4, 16 * c))


def patch_unpartition_2d(tokens, h, w):
    """Inverse of patch_partition_2d (exact)."""
    x = T.reshape(tokens, (h // 4, w // 4, 4, 4, 3))
    return T.reshape(T.transpose(x, (0, 2, 1, 3, 4)), (h, w, 3))


def patch_partition_3d(video):
    """[T, H, W, 3] -> [T, H/4, W/4, 48]; temporal patch size 1."""
    t, h, w, c = video.shape
    if h % 4 or w % 4:
        raise ShapeError(f"video extents {h}x{w} not divisible by patch size 4")
    x = T.reshape(video, (t, h // 4, 4, w // 4, 4, c))
    return T.reshape(T.transpose(x, (0, 1, 3, 2, 4, 5)), (t, h // 4, w // 4, 16 * c))


def patch_unpartition_3d(tokens, h, w):
    t = tokens.shape[0]
    x = T.reshape(tokens, (t, h // 4, w // 4, 4, 4, 3))
    return T.reshape(T.transpose(x, (0, 1, 3, 2, 4, 5)), (t, h, w, 3))


def window_partition(x, window):
    """[T, H, W, C] -> [num_windows, wt*wh*ww, C]; extents must divide evenly."""
    t, h, w, c = x.shape
    wt, wh, ww = window
    x = T.reshape(x, (t // wt, wt, h // wh, wh, w // ww, ww, c))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5, 6))
    return T.reshape(x, ((t // wt) * (h // wh) * (w // ww), wt * wh * ww, c))


def window_reverse(wins, window, t, h, w):
    wt, wh, ww = window
    c = wins.shape[-1]
    x = T.reshape(wins, (t // wt, h // wh, w // ww, wt, wh, ww, c))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5, 6))
    return T.reshape(x, (t, h, w, c))


def _axis_labels(extent, win, shift):
    """Region labels along one axis for the shifted-window mask.

    The canvas splits into three bands [0, -win), [-win, -shift),
    [-shift, end); after the cyclic shift by -shift, tokens sharing a
    window cell but carrying different band labels came from disjoint
    regions of the unshifted canvas and must not attend to each other.
    """
    labels = np.zeros(extent, dtype=np.int64)
    if shift:
        labels[extent - win:extent - shift] = 1
        labels[extent - shift:] = 2
    return labels


def _build_attn_mask(tp, hp, wp, window, shifts, valid):
    """Additive [-1e9] mask [num_windows, 1, L, L] for region and pad exclusion.

    `valid` marks real (non-pad) tokens on the padded canvas, already rolled
    the same way as the data. Returns None when no masking is needed.
    """
    wt, wh, ww = window
    st, sh, sw = shifts
    need_region = any(shifts)
    need_pad = not valid.all()
    if not (need_region or need_pad):
        return None
    lt = _axis_labels(tp, wt, st)
    lh = _axis_labels(hp, wh, sh)
    lw = _axis_labels(wp, ww, sw)
    labels = (lt[:, None, None] * 9 + lh[None, :, None] * 3 + lw[None, None, :]).astype(np.float64)
    labels = labels.reshape(tp // wt, wt, hp // wh, wh, wp // ww, ww)
    labels = labels.transpose(0, 2, 4, 1, 3, 5).reshape(-1, wt * wh * ww)
    mask = np.where(labels[:, :, None] != labels[:, None, :], -1e9, 0.0)
    if need_pad:
        vwin = valid.reshape(tp // wt, wt, hp // wh, wh, wp // ww, ww)
        vwin = vwin.transpose(0, 2, 4, 1, 3, 5).reshape(-1, wt * wh * ww)
        mask = mask + np.where(vwin[:, None, :], 0.0, -1e9)
    return mask[:, None, :, :]


class WindowAttention(Module):
    """Multi-head self-attention inside (optionally shifted) local windows.

    Operates on [T, H, W, C]; pads each axis up to a window multiple
    (pad keys masked out), cyclic-shifts by floor(window/2) per axis when
    `shift`, masks cross-region pairs, and undoes shift and padding.
    """

    def __init__(self, rng, dim, window, num_heads):
        self.qkv = Linear(rng, dim, 3 * dim)
        self.out_proj = Linear(rng, dim, dim)
        self.window = tuple(window)
        self.num_heads = num_heads
        self.dim = dim

    def forward(self, x, shift=False):
        t, h, w, c = x.shape
        wt, wh, ww = self.window
        pt, ph, pw = (-t) % wt, (-h) % wh, (-w) % ww
        valid = np.zeros((t + pt, h + ph, w + pw), dtype=bool)
        valid[:t, :h, :w] = True
        if pt or ph or pw:
            x = T.pad(x, [(0, pt), (0, ph), (0, pw), (0, 0)])
        tp, hp, wp = t + pt, h + ph, w + pw

        shifts = (wt // 2 if shift else 0, wh // 2 if shift else 0, ww // 2 if shift else 0)
        if shift:
            x = _roll3(x, (-shifts[0], -shifts[1], -shifts[2]))
            valid = np.roll(valid, (-shifts[0], -shifts[1], -shifts[2]), axis=(0, 1, 2))

        mask = _build_attn_mask(tp, hp, wp, self.window, shifts, valid)

        wins = window_partition(x, self.window)           # [nW, L, C]
        qkv = self.qkv(wins)                              # [nW, L, 3C]
        q = split_heads(qkv[:, :, 0 * c:1 * c], self.num_heads)
        k = split_heads(qkv[:, :, 1 * c:2 * c], self.num_heads)
        v = split_heads(qkv[:, :, 2 * c:3 * c], self.num_heads)
        out = self.out_proj(merge_heads(attention_core(q, k, v, mask)))

        x = window_reverse(out, self.window, tp, hp, wp)
        if shift:
            x = _roll3(x, shifts)
        if pt or ph or pw:
            x = x[:t, :h, :w, :]
        return x


def _roll3(x, shifts):
    """Cyclic roll of the first three axes of [T, H, W, C] (differentiable)."""
    for axis, s in enumerate(shifts):
        if s:
            n = x.shape[axis]
            s = s % n
            idx_a = [slice(None)] * x.ndim
            idx_b = [slice(None)] * x.ndim
            idx_a[axis] = slice(n - s, None)
            idx_b[axis] = slice(0, n - s)
            x = T.concat([x[tuple(idx_a)], x[tuple(idx_b)]], axis=axis)
    return x


class SwinBlock(Module):
    """Pre-norm block: LN -> (S)W-MSA -> add, LN -> MLP(GELU) -> add."""

    def __init__(self, rng, dim, window, num_heads, mlp_ratio, shift):
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(rng, dim, window, num_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))
        self.shift = shift

    def forward(self, x):
        x = x + self.attn(self.norm1(x), shift=self.shift)
        return x + self.mlp(self.norm2(x))


class PatchMerging(Module):
    """Concatenate each 2x2 spatial neighborhood, LN, linear 4D -> 2D."""

    def __init__(self, rng, dim):
        self.norm = LayerNorm(4 * dim)
        self.reduce = Linear(rng, 4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        h, w = x.shape[-3], x.shape[-2]
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even extents, got {h}x{w}")
        x0 = x[..., 0::2, 0::2, :]
        x1 = x[..., 1::2, 0::2, :]
        x2 = x[..., 0::2, 1::2, :]
        x3 = x[..., 1::2, 1::2, :]
        return self.reduce(self.norm(T.concat([x0, x1, x2, x3], axis=-1)))


class CrossTransformerBlock(Module):
    """Video tokens attend to image tokens; attention and MLP each carry a
    residual shortcut, with no normalization layers."""

    def __init__(self, rng, dim, num_heads, mlp_ratio):
        self.attn = MultiheadAttention(rng, dim, num_heads)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))

    def forward(self, video_feat, image_feat):
        if video_feat.shape[-1] != image_feat.shape[-1]:
            raise ShapeError(f"channel mismatch: video {video_feat.shape[-1]} vs image {image_feat.shape[-1]}")
        t, h, w, c = video_feat.shape
        q = T.reshape(video_feat, (1, t * h * w, c))
        kv = T.reshape(image_feat, (1, image_feat.shape[0] * image_feat.shape[1], c))
        x = q + self.attn(q, kv, kv)
        x = x + self.mlp(x)
        return T.reshape(x, (t, h, w, c))


class Stage(Module):
    def __init__(self, rng, dim, depth, window, num_heads, mlp_ratio):
        self.blocks = [SwinBlock(rng, dim, window, num_heads, mlp_ratio, shift=(i % 2 == 1))
                       for i in range(depth)]

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


def _pad_to_even(x):
    """Zero-pad H and W of [T, H, W, C] up to even extents."""
    ph, pw = x.shape[-3] % 2, x.shape[-2] % 2
    if ph or pw:
        pads = [(0, 0)] * (x.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
        x = T.pad(x, pads)
    return x


class DualPathBackbone(Module):
    """Four stages of parallel 2D/3D windowed attention with cross-path fusion.

    The image path feeds keys/values to the video path at `fuse_stages`
    and is dropped after the last fusion; f1..f4 are the per-stage video
    features (after fusion where it applies).
    """

    def __init__(self, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        w2 = (1,) + tuple(cfg.window_2d)
        w3 = tuple(cfg.window_3d)
        self.image_embed = Linear(rng, 48, cfg.C)
        self.image_embed_norm = LayerNorm(cfg.C)
        self.video_embed = Linear(rng, 48, cfg.C)
        self.video_embed_norm = LayerNorm(cfg.C)
        self.image_stages = [Stage(rng, cfg.stage_width(k), cfg.stage_depths[k - 1],
                                   w2, cfg.num_heads[k - 1], cfg.mlp_ratio)
                             for k in range(1, 5)]
        self.video_stages = [Stage(rng, cfg.stage_width(k), cfg.stage_depths[k - 1],
                                   w3, cfg.num_heads[k - 1], cfg.mlp_ratio)
                             for k in range(1, 5)]
        self.image_merges = [PatchMerging(rng, cfg.stage_width(k)) for k in range(1, 4)]
        self.video_merges = [PatchMerging(rng, cfg.stage_width(k)) for k in range(1, 4)]
        self.cross_blocks = {k: CrossTransformerBlock(rng, cfg.stage_width(k),
                                                      cfg.num_heads[k - 1], cfg.mlp_ratio)
                             for k in sorted(cfg.fuse_stages)}

    def named_parameters(self, prefix=""):
        yield from super().named_parameters(prefix)
        for k, block in self.cross_blocks.items():
            yield from block.named_parameters(f"{prefix}cross_blocks.{k}.")

    def forward(self, video, image):
        """video [T, H_V, W_V, 3], image [H_I, W_I, 3] -> (f1, f2, f3, f4)."""
        iv = self.image_embed_norm(self.image_embed(patch_partition_2d(image)))
        vv = self.video_embed_norm(self.video_embed(patch_partition_3d(video)))
        iv = T.reshape(iv, (1,) + iv.shape)  # singleton leading axis for shared 3D windowing
        features = []
        for k in range(1, 5):
            iv = self.image_stages[k - 1](iv)
            vv = self.video_stages[k - 1](vv)
            if k in self.cross_blocks:
                vv = self.cross_blocks[k](vv, iv[0])
            features.append(vv)
            if k < 4:
                iv = self.image_merges[k - 1](_pad_to_even(iv))
                vv = self.video_merges[k - 1](_pad_to_even(vv))
        return tuple(features)

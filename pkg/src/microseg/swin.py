"""Shifted-window transformer building blocks.

Covers patch embedding, window partition/reverse, relative position bias,
shift masks, windowed multi-head attention, the residual three-linear MLP,
the full transformer block, and patch merging / expanding.

All functions are pure over a name -> Tensor parameter registry; a ``prefix``
argument selects the block's slice of the registry, so the same code serves
every stage of every model.  Parameter naming convention inside one block:

    norm1.{gamma,beta}
    attn.qkv.{weight,bias}      attn.proj.{weight,bias}
    attn.rel_bias.table
    norm2.{gamma,beta}
    mlp.fc1/fc2/fc3.{weight,bias}
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from microseg import tensor as T
from microseg.tensor import Tensor

__all__ = [
    "SwinStageConfig",
    "patch_embed",
    "window_partition",
    "window_reverse",
    "relative_position_index",
    "build_shift_mask",
    "window_attention",
    "res_mlp",
    "swin_block",
    "patch_merging",
    "patch_expanding",
    "effective_window",
    "trunc_normal",
    "init_linear",
    "init_layer_norm",
    "init_swin_block",
    "init_patch_embed",
    "init_patch_merging",
    "init_patch_expanding",
]


@dataclass
class SwinStageConfig:
    """Hyperparameters for one resolution stage."""

    embed_dim: int
    depth: int
    num_heads: int
    window: int
    mlp_ratio: float = 4.0
    attn_dropout: float = 0.0
    mlp_dropout: float = 0.0

    def validate(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.window < 2:
            raise ValueError(f"window must be >= 2, got {self.window}")
        for p in (self.attn_dropout, self.mlp_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout probability out of range: {p}")
        return self

    def shifts(self):
        """Per-block shift sizes: blocks alternate 0, window//2, 0, ..."""
        return [0 if i % 2 == 0 else self.window // 2 for i in range(self.depth)]


def effective_window(grid, window):
    """Clamp the window to the token grid.

    A stage whose grid side is at most the nominal window size holds a single
    window; attention is already global there, so the window shrinks to the
    grid and shifting is disabled.
    """
    if grid <= window:
        return grid, False
    if grid % window:
        raise ValueError(f"grid side {grid} not divisible by window {window}")
    return window, True


# -- tokenization ----------------------------------------------------------------


def patch_embed(image, params, prefix, patch):
    """Project non-overlapping patch x patch pixel blocks to embed vectors.

    image: (B, 3, H, W) -> tokens (B, (H/patch)*(W/patch), C), row-major over
    patches, layer-normalized.
    """
    b, c_in, h, w = image.shape
    if h % patch or w % patch:
        raise ValueError(f"input {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(b, c_in, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, gh * gw, c_in * patch * patch)
    x = T.linear(x, params[prefix + "proj.weight"], params[prefix + "proj.bias"])
    return T.layer_norm(
        x, params[prefix + "norm.gamma"], params[prefix + "norm.beta"]
    )


def window_partition(x, window):
    """(B, H, W, C) -> (B * nH * nW, window^2, C) non-overlapping windows."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"{h}x{w} grid not divisible by window {window}")
    nh, nw = h // window, w // window
    x = x.reshape(b, nh, window, nw, window, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * nh * nw, window * window, c)


def window_reverse(windows, window, h, w):
    """Exact inverse of ``window_partition``."""
    nh, nw = h // window, w // window
    total, n, c = windows.shape
    if n != window * window or total % (nh * nw):
        raise ValueError(
            f"window count {total} inconsistent with grid {h}x{w}, "
            f"window {window}"
        )
    b = total // (nh * nw)
    x = windows.reshape(b, nh, nw, window, window, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


# -- attention -----------------------------------------------------------------------


@lru_cache(maxsize=32)
def relative_position_index(window_h, window_w=None):
    """(N, N) lookup into the (2*Mh-1)*(2*Mw-1) bias table, N = Mh*Mw.

    Entry [i, j] encodes the 2-d offset between token i and token j; a pure
    function of the window shape.  One int means a square window.
    """
    if window_w is None:
        window_w = window_h
    coords = np.stack(
        np.meshgrid(np.arange(window_h), np.arange(window_w), indexing="ij")
    ).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]  # (2, N, N)
    rel = rel.transpose(1, 2, 0)
    index = (rel[:, :, 0] + window_h - 1) * (2 * window_w - 1) + (
        rel[:, :, 1] + window_w - 1
    )
    index.setflags(write=False)
    return index


@lru_cache(maxsize=64)
def build_shift_mask(h, w, window, shift):
    """Additive attention mask for shifted windows, (num_windows, N, N).

    After the grid is rolled by (-shift, -shift), each axis splits into three
    bands: rows that stayed interior, rows pulled from just before the wrap
    boundary, and rows wrapped around from the start.  Tokens whose (row band,
    column band) pairs differ came from different image regions and must not
    attend to each other; those pairs get -1e9, all others 0.
    """
    if not 0 <= shift < window:
        raise ValueError(f"shift {shift} out of range for window {window}")
    nh, nw = h // window, w // window
    n = window * window
    if shift == 0:
        return np.zeros((nh * nw, n, n), dtype=np.float32)
    ids = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, h - window), slice(h - window, h - shift),
               slice(h - shift, h)):
        for ws in (slice(0, w - window), slice(w - window, w - shift),
                   slice(w - shift, w)):
            ids[hs, ws] = cnt
            cnt += 1
    idw = ids.reshape(nh, window, nw, window).transpose(0, 2, 1, 3)
    idw = idw.reshape(nh * nw, n)
    mask = np.where(
        idw[:, :, None] != idw[:, None, :], np.float32(-1e9), np.float32(0.0)
    )
    mask.setflags(write=False)
    return mask


def window_attention(x, params, prefix, num_heads, window, mask=None,
                     attn_dropout=0.0, rng=None, training=False):
    """Multi-head self-attention within each window.

    x: (num_windows_total, N, C) with N == Mh*Mw; ``window`` is an int for
    square windows or an (Mh, Mw) pair.  The learned relative position bias
    is added to the logits; ``mask`` (num_windows, N, N) is added afterwards,
    broadcast over the batch.
    """
    wh, ww = (window, window) if isinstance(window, int) else window
    nwt, n, c = x.shape
    if c % num_heads:
        raise ValueError(f"channels {c} not divisible by heads {num_heads}")
    if n != wh * ww:
        raise ValueError(f"token count {n} != window area {wh}x{ww}")
    head_dim = c // num_heads
    scale = head_dim**-0.5

    qkv = T.linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = qkv.reshape(nwt, n, 3, num_heads, head_dim)
    qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, nwt, heads, N, hd)
    q, k, v = qkv[0], qkv[1], qkv[2]

    attn = T.matmul(q * scale, k.transpose(0, 1, 3, 2))  # (nwt, heads, N, N)

    table = params[prefix + "rel_bias.table"]
    if table.shape[0] != (2 * wh - 1) * (2 * ww - 1):
        raise ValueError(
            f"bias table rows {table.shape[0]} do not match window {wh}x{ww}"
        )
    idx = relative_position_index(wh, ww)
    bias = T.take(table, idx.reshape(-1))  # (N*N, heads)
    bias = bias.reshape(n, n, num_heads).transpose(2, 0, 1)
    attn = attn + bias

    if mask is not None:
        nw = mask.shape[0]
        b = nwt // nw
        attn = attn.reshape(b, nw, num_heads, n, n)
        attn = attn + Tensor(mask.reshape(1, nw, 1, n, n))
        attn = attn.reshape(nwt, num_heads, n, n)

    attn = T.softmax(attn, axis=-1)
    if training and attn_dropout > 0.0:
        attn = T.dropout(attn, attn_dropout, training, rng)

    out = T.matmul(attn, v)  # (nwt, heads, N, hd)
    out = out.transpose(0, 2, 1, 3).reshape(nwt, n, c)
    return T.linear(out, params[prefix + "proj.weight"],
                    params[prefix + "proj.bias"])


# -- MLP and block ---------------------------------------------------------------------


def _mlp_chain(x, params, prefix, p, rng, training):
    # fc1 -> gelu -> drop -> fc2 -> gelu -> drop -> fc3, no residual here
    h = T.gelu(T.linear(x, params[prefix + "fc1.weight"],
                        params[prefix + "fc1.bias"]))
    h = T.dropout(h, p, training, rng)
    h = T.gelu(T.linear(h, params[prefix + "fc2.weight"],
                        params[prefix + "fc2.bias"]))
    h = T.dropout(h, p, training, rng)
    return T.linear(h, params[prefix + "fc3.weight"], params[prefix + "fc3.bias"])


def res_mlp(x, params, prefix, p=0.0, rng=None, training=False):
    """x + fc3(drop(gelu(fc2(drop(gelu(fc1(x))))))); shape-preserving."""
    return x + _mlp_chain(x, params, prefix, p, rng, training)


def swin_block(x, params, prefix, h, w, num_heads, window, shift,
               attn_dropout=0.0, mlp_dropout=0.0, rng=None, training=False):
    """One pre-norm transformer block over a (B, H*W, C) token grid.

    First half: windowed attention on the (optionally cyclically shifted)
    grid, with the shift mask, plus residual.  Second half: the three-linear
    MLP chain on the normalized tokens, plus residual.  With all weights zero
    the block is the identity.
    """
    b, l, c = x.shape
    if l != h * w:
        raise ValueError(f"token count {l} != grid {h}x{w}")
    m, can_shift = effective_window(min(h, w), window)
    s = shift if can_shift else 0
    if not 0 <= s < m:
        raise ValueError(f"shift {s} out of range for window {m}")

    hid = T.layer_norm(x, params[prefix + "norm1.gamma"],
                       params[prefix + "norm1.beta"])
    hid = hid.reshape(b, h, w, c)
    if s:
        hid = T.cyclic_shift(hid, -s, -s)
    win = window_partition(hid, m)
    mask = build_shift_mask(h, w, m, s) if s else None
    win = window_attention(win, params, prefix + "attn.", num_heads, m,
                           mask=mask, attn_dropout=attn_dropout, rng=rng,
                           training=training)
    hid = window_reverse(win, m, h, w)
    if s:
        hid = T.cyclic_shift(hid, s, s)
    x = x + hid.reshape(b, l, c)

    hid = T.layer_norm(x, params[prefix + "norm2.gamma"],
                       params[prefix + "norm2.beta"])
    return x + _mlp_chain(hid, params, prefix + "mlp.", mlp_dropout, rng,
                          training)


# -- resolution changes ------------------------------------------------------------------


def patch_merging(x, params, prefix, h, w):
    """Concatenate 2x2 token neighborhoods (4C), normalize, project to 2C.

    (B, H*W, C) -> (B, H/2 * W/2, 2C); requires even H and W.
    """
    b, l, c = x.shape
    if l != h * w:
        raise ValueError(f"token count {l} != grid {h}x{w}")
    if h % 2 or w % 2:
        raise ValueError(f"patch_merging needs even grid, got {h}x{w}")
    g = x.reshape(b, h, w, c)
    parts = [g[:, 0::2, 0::2, :], g[:, 1::2, 0::2, :],
             g[:, 0::2, 1::2, :], g[:, 1::2, 1::2, :]]
    merged = T.concat(parts, axis=3).reshape(b, (h // 2) * (w // 2), 4 * c)
    merged = T.layer_norm(merged, params[prefix + "norm.gamma"],
                          params[prefix + "norm.beta"])
    return T.linear(merged, params[prefix + "reduce.weight"],
                    params[prefix + "reduce.bias"])


def patch_expanding(x, params, prefix, h, w, factor):
    """Upsample tokens by channel expansion + pixel-shuffle rearrangement.

    factor 2: linear C -> 2C, rearrange to (2H, 2W, C/2).
    factor 4: linear C -> 16C, rearrange to (4H, 4W, C), channels preserved.
    """
    b, l, c = x.shape
    if l != h * w:
        raise ValueError(f"token count {l} != grid {h}x{w}")
    if factor == 2:
        if c % 2:
            raise ValueError(f"factor-2 expand needs even channels, got {c}")
        c_out = c // 2
    elif factor == 4:
        c_out = c
    else:
        raise ValueError(f"factor must be 2 or 4, got {factor}")
    hid = T.linear(x, params[prefix + "expand.weight"],
                   params[prefix + "expand.bias"])
    hid = hid.reshape(b, h, w, factor, factor, c_out)
    hid = hid.transpose(0, 1, 3, 2, 4, 5)  # (B, H, f, W, f, C')
    return hid.reshape(b, h * factor * w * factor, c_out)


# -- initialization ------------------------------------------------------------------------


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) clipped to +-2 std, float32."""
    return np.clip(
        rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std
    ).astype(np.float32)


def init_linear(reg, name, out_features, in_features, rng):
    reg[name + ".weight"] = Tensor(
        trunc_normal(rng, (out_features, in_features)), requires_grad=True
    )
    reg[name + ".bias"] = Tensor(
        np.zeros(out_features, dtype=np.float32), requires_grad=True
    )


def init_layer_norm(reg, name, dim):
    reg[name + ".gamma"] = Tensor(np.ones(dim, dtype=np.float32),
                                  requires_grad=True)
    reg[name + ".beta"] = Tensor(np.zeros(dim, dtype=np.float32),
                                 requires_grad=True)


def init_swin_block(reg, prefix, dim, num_heads, window, mlp_ratio, rng):
    init_layer_norm(reg, prefix + "norm1", dim)
    init_linear(reg, prefix + "attn.qkv", 3 * dim, dim, rng)
    init_linear(reg, prefix + "attn.proj", dim, dim, rng)
    reg[prefix + "attn.rel_bias.table"] = Tensor(
        trunc_normal(rng, ((2 * window - 1) ** 2, num_heads)),
        requires_grad=True,
    )
    init_layer_norm(reg, prefix + "norm2", dim)
    hidden = int(dim * mlp_ratio)
    init_linear(reg, prefix + "mlp.fc1", hidden, dim, rng)
    init_linear(reg, prefix + "mlp.fc2", hidden, hidden, rng)
    init_linear(reg, prefix + "mlp.fc3", dim, hidden, rng)


def init_patch_embed(reg, prefix, dim, patch, rng, in_channels=3):
    init_linear(reg, prefix + "proj", dim, in_channels * patch * patch, rng)
    init_layer_norm(reg, prefix + "norm", dim)


def init_patch_merging(reg, prefix, dim, rng):
    init_layer_norm(reg, prefix + "norm", 4 * dim)
    init_linear(reg, prefix + "reduce", 2 * dim, 4 * dim, rng)


def init_patch_expanding(reg, prefix, dim, factor, rng):
    out = 2 * dim if factor == 2 else 16 * dim
    init_linear(reg, prefix + "expand", out, dim, rng)

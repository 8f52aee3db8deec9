"""Shifted-window attention, piece by piece.

Windowed attention makes self-attention affordable on images: tokens only
attend within M x M windows, and every other block shifts the grid by M/2 so
information still crosses window borders.  The shift is implemented as a
cyclic roll plus an additive mask that forbids attention between tokens that
were never really neighbours.

Run:  python3 demos/02_swin_blocks.py
"""

import numpy as np

from microseg import swin
from microseg.tensor import Tensor

rng = np.random.default_rng(1)

# -- 1. window partition / reverse is an exact reshuffle ------------------------------

grid = Tensor(rng.standard_normal((1, 8, 8, 4)))
windows = swin.window_partition(grid, 4)
print("8x8 grid, window 4 ->", windows.shape, "(4 windows of 16 tokens)")
back = swin.window_reverse(windows, 4, 8, 8)
print("roundtrip exact:", bool(np.array_equal(back.data, grid.data)))

# -- 2. the shift mask, drawn ----------------------------------------------------------

mask = swin.build_shift_mask(8, 8, 4, 2)
print("\nshift mask for 8x8 / window 4 / shift 2 "
      "(window 3, # = forbidden pair):")
forbidden = mask[3] < 0
for row in forbidden.astype(int):
    print("   " + "".join("#" if v else "." for v in row))

# -- 3. attention inside the windows ---------------------------------------------------

c, heads, m = 4, 2, 4
params = {
    "attn.qkv.weight": Tensor(rng.standard_normal((3 * c, c)) * 0.3),
    "attn.qkv.bias": Tensor(np.zeros(3 * c)),
    "attn.proj.weight": Tensor(rng.standard_normal((c, c)) * 0.3),
    "attn.proj.bias": Tensor(np.zeros(c)),
    "attn.rel_bias.table": Tensor(
        rng.standard_normal(((2 * m - 1) ** 2, heads)) * 0.2),
}
tokens = swin.window_partition(grid, m)
out = swin.window_attention(tokens, params, "attn.", heads, m, mask=mask)
print("\nwindow_attention:", tokens.shape, "->", out.shape)

# identical tokens + zero bias -> attention averages to the same vector
flat = Tensor(np.tile(rng.standard_normal(c), (1, m * m, 1)))
params["attn.rel_bias.table"] = Tensor(np.zeros(((2 * m - 1) ** 2, heads)))
same = swin.window_attention(flat, params, "attn.", heads, m).data
print("identical tokens stay identical:",
      bool(np.allclose(same, same[:, :1], atol=1e-12)))

# -- 4. a full transformer block and the resolution ladder -----------------------------

reg = {}
swin.init_swin_block(reg, "blk.", c, heads, m, 2.0, rng)
x = Tensor(rng.standard_normal((1, 64, c)))  # 8x8 grid flattened
y = swin.swin_block(x, reg, "blk.", 8, 8, heads, m, shift=2)
print("\nswin_block (shifted):", x.shape, "->", y.shape)

swin.init_patch_merging(reg, "merge.", c, rng)
down = swin.patch_merging(y, reg, "merge.", 8, 8)
print("patch_merging: 8x8 x%d -> 4x4 x%d" % (c, down.shape[-1]), down.shape)

swin.init_patch_expanding(reg, "expand.", 2 * c, 2, rng)
up = swin.patch_expanding(down, reg, "expand.", 4, 4, 2)
print("patch_expanding: 4x4 x%d -> 8x8 x%d" % (2 * c, up.shape[-1]), up.shape)

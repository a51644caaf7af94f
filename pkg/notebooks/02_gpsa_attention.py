# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # Gated positional self-attention
#
# A GPSA head mixes two attention maps: content attention from queries and
# keys, and positional attention from a learned vector `v_pos` dotted with the
# relative offset features `(|d|^2, d1, d2)`. The gate `sigmoid(lambda)` sets the
# share of the positional map.

# %%
import tempfile
from pathlib import Path

import numpy as np

from gpsa_lab import attention as A
from gpsa_lab import metrics as MT
from gpsa_lab import tensor as T

grid = A.PatchGrid(7, 7)
table = A.build_relpos_table(grid)
print(table.entries.shape)

# %% [markdown]
# Convolutional initialization points each head at one kernel offset. With
# nine heads the offsets form a 3x3 kernel.

# %%
layer = A.GpsaLayer(num_heads=9, head_dim=4, rng=np.random.default_rng(0))
A.conv_init(layer, locality_strength=2.0)
for h in range(9):
    pos = layer.head_pos(h)
    print(h, A.head_centers(9)[h], "alpha", round(pos.alpha(), 3), "center", pos.center())

# %% [markdown]
# The positional map of a head at a central query, for growing locality
# strength. At large alpha it approaches a one-hot map on the kernel offset.

# %%
q = grid.index(3, 3)
for alpha in (0.5, 2.0, 10.0):
    A.conv_init(layer, alpha)
    pos = T.softmax_rows(A.positional_scores(layer.v_pos, table)).data
    print(f"alpha={alpha}")
    print(np.round(pos[0, q].reshape(7, 7), 3))

# %% [markdown]
# Gating: at `lambda = 1` (the initial value) the positional share is
# `sigmoid(1) = 0.731`. Saturated gates recover either pathway alone.

# %%
x = np.random.default_rng(1).normal(size=(49, 36))
A.conv_init(layer, 2.0)
layer.w_qry.data[...] = np.random.default_rng(2).normal(size=layer.w_qry.shape)
content = A.content_attention(x, layer.w_qry, layer.w_key, 9).data
positional = T.softmax_rows(A.positional_scores(layer.v_pos, table)).data
print("gate", layer.gate_values()[0])
for lam in (-30.0, 1.0, 30.0):
    layer.gating.data[...] = lam
    attn = A.gpsa_attention(x, layer, table).data
    print(lam, "vs content", np.abs(attn - content).max(), "vs positional", np.abs(attn - positional).max())

# %% [markdown]
# Nonlocality measures the attention-weighted query-key distance. It shrinks
# as the locality strength grows, toward the kernel radius.

# %%
for alpha in (0.5, 1.0, 2.0, 4.0, 10.0):
    A.conv_init(layer, alpha)
    pos = T.softmax_rows(A.positional_scores(layer.v_pos, table)).data
    print(alpha, np.mean([MT.nonlocality_head(pos[h], grid, grid.interior()) for h in range(9)]))

# %% [markdown]
# One query's attention, written as a log-scaled PGM image.

# %%
out = Path(tempfile.mkdtemp())
record = MT.AttentionRecord([pos], ["gpsa"], grid)
pixels = MT.export_attention_map(record, 0, 0, q, out / "head0.pgm")
print(pixels)

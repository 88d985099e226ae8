"""Pooling per-layer attention into one map, and laying it out in space.

Shows how the simple pooling orders differ, why multiplicative flow
over many layers collapses, and why tiled images need tile-aware
reshaping.
"""

import numpy as np

from lavender.aggregation import aggregate_simple, attention_flow
from lavender.spatial import TileLayout, naive_grid, resize_to_standard, row_to_grid
from lavender.vlm import AttentionRecord

rng = np.random.default_rng(3)

# 3 layers x 2 heads x 4 text tokens x 9 patches
logits = rng.normal(size=(3, 2, 4, 9)) * 2
w = np.exp(logits)
w /= w.sum(-1, keepdims=True)
rec = AttentionRecord.from_array(w)

for mode in ("mean-mean", "max-mean", "mean-max", "max-max"):
    print(mode, np.round(aggregate_simple(rec, mode).data[0], 3))

# flow: the raw multiplicative fold loses mass layer by layer; renormalization restores it
raw = attention_flow(rec, "multiply", regularize=True, renormalize=False).data
print("raw flow row mass:", np.round(raw.sum(-1), 5))
print("renormalized row 0:", np.round(attention_flow(rec, "multiply").data[0], 3))

# a 2x2 grid of 2x2 tiles: tokens are tile-major
row = np.arange(16.0)
print("tiled\n", row_to_grid(row, TileLayout((2, 2), (2, 2))).data)
print("naive reshape\n", naive_grid(row))

# every map ends up as a 32x32 distribution
m = resize_to_standard(row_to_grid(aggregate_simple(rec).data[0], (3, 3))).data
print("standard map", m.shape, "mass", m.sum())

"""
Flattening planes into logits
=============================

The loss slices the tensor along each axis.  Inside a slice the matched
triple sits at (ell, ell) and plays the role of the positive class.
"""

import math

import numpy as np

from ctp.losses import LossConfig, flatten_plane, pairwise_loss, plane_loss, tensor_loss
from ctp.similarity import cosine_tensor, normalize_rows

b = 3
s = np.arange(b**3, dtype=float).reshape(b, b, b)

# "jk" fixes the text index.  The mask strategy drops the entries that reuse
# the fixed sample in exactly one other axis.
for strategy in ("nm", "mask"):
    fp = flatten_plane(s, "jk", 1, strategy)
    print(f"{strategy:>4}: {len(fp.logits)} logits, target at {fp.index_map[fp.target_pos]}")
kept = flatten_plane(s, "jk", 1, "mask").index_map
print("dropped:", sorted({(u, v) for u in range(b) for v in range(b)} - set(kept)))

# A flat tensor gives every slice the loss ln(length).
print("uniform plane loss per slice:", plane_loss(np.zeros((5, 5, 5)), "ij", "mask", reduction="mean"),
      "ln 17 =", math.log(17))

# Real features: the four training variants on one batch.
rng = np.random.default_rng(1)
t, i, p = (normalize_rows(rng.standard_normal((6, 8))) for _ in range(3))
for tag in ("ctp_mask", "ctp_nm", "ctp_cosine", "pairwise"):
    br = LossConfig.from_tag(tag)(t, i, p, scale=1 / 0.07)
    parts = ", ".join(f"{k}={v:.3f}" for k, v in br.components.items())
    print(f"{tag:>10}: total {br.total:8.3f}  ({parts})")

# Setting the first weight to zero keeps only the point-related pairs.
print("point-only pairwise:", round(pairwise_loss(t, i, p, (0.0, 0.5, 0.5), 10.0).total, 4))
print("cosine tensor at b=6:", cosine_tensor(t, i, p).scores.shape,
      "loss", round(tensor_loss(t, i, p, "cosine").total, 4))

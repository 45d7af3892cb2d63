"""
Scoring every text, image and point combination
===============================================

A batch of b aligned triplets gives b**3 ways to pick one text, one image
and one point feature.  The similarity tensor scores all of them at once.
"""

import math

import numpy as np

from ctp.similarity import combination_counts, cosine_tensor, l2_tensor, l_max, map_l2, normalize_rows

rng = np.random.default_rng(0)
b, d = 4, 8
text, image, point = (normalize_rows(rng.standard_normal((b, d))) for _ in range(3))

# Axis 0 indexes the text row, axis 1 the image row, axis 2 the point row.
cos = cosine_tensor(text, image, point)
print("cosine tensor shape:", cos.scores.shape)
print("matched triple (2, 2, 2):", round(cos.scores[2, 2, 2], 4))

# The distance form sums three unsquared distances.  Three unit vectors can
# be at most 3*sqrt(3) apart in total, reached by a 120 degree star.
raw = l2_tensor(text, image, point)
print("largest raw sum in the batch:", round(raw.max(), 4), "bound:", round(l_max(3), 4))

star = np.array([[1.0, 0.0], [-0.5, math.sqrt(3) / 2], [-0.5, -math.sqrt(3) / 2]])
print("star sum:", l2_tensor(star[:1], star[1:2], star[2:])[0, 0, 0])

# Mapping to [0, 1] turns the distance into a similarity, 1 for identical features.
mapped = map_l2(raw)
print("mapped range:", mapped.scores.min().round(4), "to", mapped.scores.max().round(4))

# The tensor covers far more combinations than the three pairwise matrices.
for n in (8, 32, 192):
    tensor, pairs = combination_counts(n)
    print(f"b={n:>3}: {tensor:>9,} tensor entries vs {pairs:>7,} pairwise entries")

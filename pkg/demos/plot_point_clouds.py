"""
Point clouds: sampling, padding and a permutation-invariant encoder
===================================================================
"""

import numpy as np

from ctp.dataset import SynthConfig, fps, generate_synthetic, pad_or_sample
from ctp.encoders import EncoderSpec, set_encode

line = np.c_[np.arange(10.0), np.zeros(10), np.zeros(10)]
print("fps k=2:", fps(line, 2), " k=3:", fps(line, 3), "(4 and 5 tie, 4 wins)")

small = pad_or_sample(line[:3], 5)
print("padded mask:", small.valid_mask.astype(int))
print("sampled rows:", pad_or_sample(line, 2).points[:, 0])

# The encoder pools only valid rows, so padding and point order do not matter.
params = EncoderSpec(text_in=4, image_in=4, dim=8).build(0)
cloud = np.random.default_rng(0).standard_normal((1, 12, 3))
shuffled = cloud[:, ::-1]
padded = np.concatenate([cloud, np.zeros((1, 4, 3))], axis=1)
mask = np.r_[np.ones(12, bool), np.zeros(4, bool)][None]
base = set_encode(params.point, cloud)
print("order change:", np.abs(base - set_encode(params.point, shuffled)).max())
print("padding change:", np.abs(base - set_encode(params.point, padded, mask)).max())

# Synthetic triplets: one latent prototype per class, three noisy views.
data = generate_synthetic(SynthConfig(n_train=10, n_test=5, seed=0))
r = data.train[0]
print(r.id, r.class_label, repr(r.caption_text), r.text_vector.shape, r.image_vector.shape, r.points.shape)

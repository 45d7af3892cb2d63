"""
Checking hand-written gradients
===============================

Every backward pass is compared with central differences, once on raw
features and once end to end through the three encoders.
"""

import numpy as np

from ctp.diff import check_feature_grad, gradcheck_sweep, oracle_sweep
from ctp.losses import LossConfig

for tag, seed, rep in gradcheck_sweep(seeds=[0], b=4, d=8):
    worst = max(rep.per_parameter, key=rep.per_parameter.get)
    print(f"{tag:>10}: max relative error {rep.max_rel_error:.2e} (worst: {worst})")

# Flipping one analytic gradient shows the check is able to fail.
rng = np.random.default_rng(0)
t, i, p = (rng.standard_normal((4, 8)) for _ in range(3))
bad = check_feature_grad(LossConfig.from_tag("ctp_mask"), t, i, p, 1.0, corrupt="point")
print("sign-flipped point gradient, error:", round(bad.per_parameter["point"], 3))

# The vectorized loss against an index-by-index loop.
errs = [e for *_, e in oracle_sweep(bs=(2, 3, 4), seeds=range(5))]
print(f"{len(errs)} loss comparisons, largest difference {max(errs):.1e}")

"""
Tensor loss against the pairwise baseline
=========================================

All four variants train on the same data with the same seeds.  The
synthetic task is easy, so expect the columns to agree near the top.
"""

from ctp.compare import format_comparison, run_comparison
from ctp.dataset import SynthConfig
from ctp.training import TrainConfig

synth = SynthConfig(n_train=480, n_test=150, seed=0)
base = TrainConfig(epochs=6, batch_size=32, dim=16, hidden=32, point_hidden=32)
acc = run_comparison(synth, base, seeds=(0, 1))
print(format_comparison(acc))

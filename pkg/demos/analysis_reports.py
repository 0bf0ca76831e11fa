"""
Measuring a sparse model
========================

Compression ratios are pure arithmetic over weight counts. The other reports
read a trained model: how strongly the kept connections correlate, how
redundant a unit's kept inputs are with each other, and where the kept
weights sit in the magnitude ranking of their layer.
"""
import numpy as np

from sparsenet import LayerSpec, Network, NetworkSpec, SelectionPolicy, SparsityPlan, TrainConfig
from sparsenet import compression_ratio, correlation_table, face_baseline_spec, train_steps
from sparsenet.analysis import complementarity, magnitude_rank_histogram, selected_corr_mean
from sparsenet.data import synthetic_shapes
from sparsenet.pruners import prune_correlation
from sparsenet.stats import collect_input_pairs

face = face_baseline_spec()
for text in ("", "f:1/256", "f:1/256,5b:1/128", "f:1/256,5b:1/128,5a:1/32"):
    summary = compression_ratio(face, SparsityPlan.parse(text))
    print(f"{text or '(dense)':<28} {summary.kept:>10,} of {summary.total:,} weights  ratio {summary.ratio:.2f}")

# %%
spec = NetworkSpec((10, 10, 1), [
    LayerSpec("fc1", "fc", out_channels=32),
    LayerSpec("relu1", "relu"),
    LayerSpec("fc2", "fc", out_channels=16),
    LayerSpec("relu2", "relu"),
    LayerSpec("out", "fc", out_channels=3),
    LayerSpec("softmax", "softmax"),
], classes=3)
X, y = synthetic_shapes(900, image_hw=(10, 10), classes=3, seed=3)
net = Network.initialize(spec, np.random.default_rng(0))
train_steps(net, X[:700], y[:700], 400, TrainConfig(base_lr=0.05, steps_baseline=400), np.random.default_rng(0))
table = correlation_table(net, X[700:], "fc2")
pairs = collect_input_pairs(net, X[700:], "fc2")

for crit in ("random", "correlation", "highest_only"):
    mask, _ = prune_correlation(table, SelectionPolicy(crit, 1 / 4, seed=1), spec)
    pos, neg = magnitude_rank_histogram(mask, net.params["fc2"]["W"], bins=10)
    stat, p = pos.chi_square()
    print(f"{crit:>12}: selected |r| {selected_corr_mean(mask, table, spec):.3f}  "
          f"input redundancy {complementarity(mask, pairs, spec):.3f}  "
          f"positive-weight rank histogram {pos.counts.tolist()} (chi2 p={p:.2f})")

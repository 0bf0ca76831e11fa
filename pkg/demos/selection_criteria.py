"""
Choosing which connections to keep
==================================

Every criterion returns a mask plus a report. The correlation family ranks a
unit's inputs by |r| separately for positive and negative coefficients and
samples a fraction ``lam`` of each group's budget from the top half of the
ranking, the rest from the bottom half. ``random`` and ``highest_only`` are the
two ends of that dial (lam = 0.5 and lam = 1). The baselines rank weights
instead: by magnitude, by a curvature-weighted saliency, or by what survives
L1-regularized training.
"""
import warnings

import numpy as np

from sparsenet import LayerSpec, Network, NetworkSpec, SelectionPolicy, TrainConfig, correlation_table, train_steps
from sparsenet.data import synthetic_shapes
from sparsenet.pruners import prune_correlation, prune_layer

spec = NetworkSpec((10, 10, 1), [
    LayerSpec("conv", "conv", kernel=3, out_channels=4),
    LayerSpec("relu1", "relu"),
    LayerSpec("fc", "fc", out_channels=16),
    LayerSpec("relu2", "relu"),
    LayerSpec("out", "fc", out_channels=3),
    LayerSpec("softmax", "softmax"),
], classes=3)
X, y = synthetic_shapes(800, image_hw=(10, 10), classes=3, seed=2)
net = Network.initialize(spec, np.random.default_rng(0))
cfg = TrainConfig(base_lr=0.05, steps_baseline=300)
train_steps(net, X[:600], y[:600], 300, cfg, np.random.default_rng(0))
X_stats, y_stats = X[600:], y[600:]

# %%
# The same table and budget, three points on the lam dial.
table = correlation_table(net, X_stats, "fc")
for crit in ("random", "correlation", "highest_only"):
    mask, report = prune_correlation(table, SelectionPolicy(crit, 1 / 16, seed=0), spec)
    kept_r = np.abs(table.r[mask.matrix(spec)])
    print(f"{crit:>12}: kept {report.kept_total}/{report.total} "
          f"(+{report.kept_pos}/-{report.kept_neg}), mean |r| of kept {kept_r.mean():.3f}")

# Budgets are exact: round(S * group size) per sign group, never below one per unit.
print("per-unit counts:", report.unit_counts.tolist())

# %%
# The weight-based baselines, all at the same S.
with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # BRP warns when its step budget ends before the target
    for crit in ("magnitude", "obd", "brp"):
        policy = SelectionPolicy(crit, 1 / 16, seed=0, check_every=25, brp_steps=300, l1_coeff=1e-3)
        mask, report = prune_layer(net, "fc", policy, stats_data=X_stats, stats_labels=y_stats,
                                   train_data=X[:600], train_labels=y[:600], cfg=cfg)
        print(f"{crit:>12}: kept {report.kept_total}, forced trim: {report.forced_trim}")

# %%
# Conv masks are per shared weight; the score is summed over positions.
conv_table = correlation_table(net, X_stats, "conv")
mask, report = prune_correlation(conv_table, SelectionPolicy("correlation", 1 / 3, lam=1.0), spec)
print("conv: taps kept per map", report.unit_counts.tolist(), "of", spec.connectivity("conv").fan_in)

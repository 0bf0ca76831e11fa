"""
Correlations between a unit and its inputs
===========================================

For every connection the library measures how strongly the receiving unit's
post-ReLU output co-varies with the input feeding it, over a held-out batch.
Fully connected and local layers get a Pearson coefficient per connection.
A conv weight serves many positions, so its score is the sum of absolute
per-position coefficients.
"""
import numpy as np

from sparsenet import LayerSpec, Network, NetworkSpec, TrainConfig, correlation_table, train_steps
from sparsenet.data import synthetic_shapes

spec = NetworkSpec((10, 10, 1), [
    LayerSpec("conv", "conv", kernel=3, out_channels=4),
    LayerSpec("relu1", "relu"),
    LayerSpec("local", "local", kernel=2, stride=2, out_channels=4),
    LayerSpec("relu2", "relu"),
    LayerSpec("fc", "fc", out_channels=16),
    LayerSpec("relu3", "relu"),
    LayerSpec("out", "fc", out_channels=3),
    LayerSpec("softmax", "softmax"),
], classes=3)
X, y = synthetic_shapes(900, image_hw=(10, 10), classes=3, seed=1)
net = Network.initialize(spec, np.random.default_rng(0))
train_steps(net, X[:700], y[:700], 400, TrainConfig(base_lr=0.05), np.random.default_rng(0))
stats_batch = X[700:]

# %%
for name in ("fc", "local", "conv"):
    t = correlation_table(net, stats_batch, name)
    print(f"{name:>5} ({t.kind}): table {t.r.shape}, mean |r| {np.abs(t.r).mean():.3f}, "
          f"degenerate pairs {int(t.degenerate.sum())}, positions {t.positions}")

# %%
# Units that never fire (or inputs that never change) have no defined
# coefficient. They get r = 0 and a flag instead of a NaN.
t = correlation_table(net, stats_batch, "fc")
dead = np.flatnonzero(t.degenerate.all(axis=1))
print("fc units silent on this batch:", dead.tolist())

# Each row ranks one unit's inputs; the strongest few look like this:
u = int(np.argmax(np.abs(t.r).max(axis=1)))
order = np.argsort(-np.abs(t.r[u]))[:5]
print(f"unit {u}: inputs {order.tolist()} with r = {np.round(t.r[u, order], 3).tolist()}")

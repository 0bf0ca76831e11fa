"""
Building and training a small network
=====================================

Layers are described by ``LayerSpec`` records; a ``NetworkSpec`` checks the
shapes once and everything else (weights, patches, gradients) follows from it.
Activations are NHWC throughout.
"""
import numpy as np

from sparsenet import LayerSpec, Network, NetworkSpec, TrainConfig, evaluate, forward, train_steps
from sparsenet.data import Dataset, synthetic_shapes

# A conv layer shares one kernel across positions; a local layer owns one
# kernel per output position, so it has many more weights for the same fan-in.
spec = NetworkSpec((12, 12, 1), [
    LayerSpec("conv", "conv", kernel=3, padding=1, out_channels=6),
    LayerSpec("relu1", "relu"),
    LayerSpec("pool", "pool", kernel=2, stride=2),
    LayerSpec("local", "local", kernel=3, out_channels=8),
    LayerSpec("relu2", "relu"),
    LayerSpec("hidden", "fc", out_channels=32),
    LayerSpec("relu3", "relu"),
    LayerSpec("drop", "dropout", dropout_rate=0.2),
    LayerSpec("out", "fc", out_channels=4),
    LayerSpec("softmax", "softmax"),
], classes=4)

for name in spec.prunable_layers:
    conn = spec.connectivity(name)
    print(f"{name:>6}: output {spec.shapes[name]}, fan-in {conn.fan_in}, weights {spec.weight_count(name)}")

# %%
# Training uses plain SGD with momentum. The learning rate steps down ten
# times over the main phase and drops tenfold for a short final phase.
X, y = synthetic_shapes(1200, image_hw=(12, 12), classes=4, seed=0)
data = Dataset.split(X, y, test_fraction=0.25, stats_min=64, seed=0)

net = Network.initialize(spec, np.random.default_rng(0))
cfg = TrainConfig(base_lr=0.05, batch_size=32, steps_baseline=600)  # the decay curve spans these 600 steps
log = train_steps(net, data.X_train, data.y_train, cfg.steps_baseline, cfg, np.random.default_rng(1))
print("first/last loss:", round(log.losses[0], 3), round(log.final_loss, 3))
print("distinct learning rates:", len(set(log.lrs)), "from", log.lrs[0], "to", round(log.lrs[-1], 6))
print("test accuracy:", evaluate(net, data.X_test, data.y_test)[1])

# %%
# Forward results keep every activation, which is what the statistics code reads.
res = forward(net, data.X_test[:2])
print({k: v.shape for k, v in res.activations.items() if k in ("conv", "local", "hidden")})

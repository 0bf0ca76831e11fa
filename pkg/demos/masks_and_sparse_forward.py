"""
Dropping masks
==============

A mask is a boolean array shaped like a layer's weights. Training multiplies
weights by it before the first forward pass and zeroes dropped weights again
after every update, so pruned connections stay at exactly 0.0.
"""
import numpy as np

from sparsenet import DroppingMask, LayerSpec, NetworkSpec, TrainConfig, train_steps
from sparsenet.layers import Network, forward
from sparsenet.masks import apply_masks, count_violations, densify_equivalent

spec = NetworkSpec((6, 6, 2), [
    LayerSpec("conv", "conv", kernel=3, out_channels=4),
    LayerSpec("relu", "relu"),
    LayerSpec("fc", "fc", out_channels=3),
    LayerSpec("softmax", "softmax"),
], classes=3)
rng = np.random.default_rng(0)
net = Network.initialize(spec, rng)

# For a conv layer one mask bit removes a shared weight, i.e. that tap at every position.
conv_mask = DroppingMask("conv", rng.random(spec.weight_shape("conv")) < 0.25, target_sparsity=0.25)
fc_mask = DroppingMask.from_matrix(spec, "fc", rng.random(spec.matrix_shape("fc")) < 0.5, 0.5)
print("kept per conv map:", conv_mask.unit_counts(spec))
print("kept per fc unit: ", fc_mask.unit_counts(spec))

# %%
# Train for a while and count weights that escaped their mask.
X = rng.normal(size=(64, 6, 6, 2))
y = rng.integers(0, 3, size=64)
masks = [conv_mask, fc_mask]
escaped = []
train_steps(net, X, y, 200, TrainConfig(batch_size=16), rng, masks=masks,
            callback=lambda step, n, loss: escaped.append(count_violations(n, masks)))
print("violations over 200 steps:", sum(escaped))

# %%
# A structurally pruned copy only evaluates reserved connections and gives the
# same activations as the masked dense network.
sparse = densify_equivalent(net, masks)
acts, logits = sparse.forward(X[:5])
dense = forward(net, X[:5])
print("max difference:", np.abs(logits - dense.logits).max())
print("stored weights:", sparse.nnz(), "of", spec.total_weights())

# The 1-bit-per-weight serialized form:
print(len(fc_mask.to_bytes()), "bytes for", fc_mask.bits.size, "fc bits")
apply_masks(net, masks)  # idempotent

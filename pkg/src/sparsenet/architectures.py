"""Ready-made network specifications.

``face_baseline_spec`` is the full 112x96 face ConvNet (conv pairs with max
pooling, two locally-connected layers, a 512-d fully-connected feature
layer). It is used for shape and compression arithmetic; nothing here trains
it. ``desk_spec`` is a miniature with the same layer pattern that trains in
seconds on one CPU core.
"""
from .layers import LayerSpec, NetworkSpec


def _conv(name, out, padding=1):
    return [LayerSpec(name, "conv", (3, 3), 1, padding, out), LayerSpec(f"relu{name}", "relu")]


def _local(name, out):
    return [LayerSpec(name, "local", (3, 3), 1, 0, out), LayerSpec(f"relu{name}", "relu")]


def _pool(name):
    return [LayerSpec(name, "pool", (2, 2), 2, 0)]


def face_baseline_spec(input_hw=(112, 96), channels=3, classes=12000, head=False) -> NetworkSpec:
    """The face baseline: output sizes run 112x96x64 ... 3x2x256 -> 512.

    Padding 1 on the 3x3 convolutions keeps spatial size; the
    locally-connected layers use padding 0 and shrink 7x6 -> 5x4 -> 3x2.
    Dropout 30% follows 5b and 50% follows f. With ``head`` a linear
    classifier and softmax are appended (not part of the parameter budget).
    """
    layers = []
    layers += _conv("1a", 64) + _conv("1b", 64) + _pool("pool1")
    layers += _conv("2a", 96) + _conv("2b", 96) + _pool("pool2")
    layers += _conv("3a", 192) + _conv("3b", 192) + _pool("pool3")
    layers += _conv("4a", 256) + _conv("4b", 256) + _pool("pool4")
    layers += _local("5a", 256) + _local("5b", 256)
    layers += [LayerSpec("drop5b", "dropout", dropout_rate=0.3)]
    layers += [LayerSpec("f", "fc", out_channels=512), LayerSpec("reluf", "relu")]
    layers += [LayerSpec("dropf", "dropout", dropout_rate=0.5)]
    if head:
        layers += [LayerSpec("cls", "fc", out_channels=classes), LayerSpec("softmax", "softmax")]
    return NetworkSpec((input_hw[0], input_hw[1], channels), layers, classes)


def desk_spec(
    input_hw=(24, 20),
    channels=1,
    classes=10,
    widths=(8, 16, 16, 24, 32),
    feature_dim=64,
    dropout=(0.3, 0.5),
) -> NetworkSpec:
    """Miniature of the face baseline for CPU-scale experiments.

    Layers ``1a``, ``4a``, ``4b`` (conv), ``5a``, ``5b`` (local), ``f`` (fc)
    and a classifier ``cls`` keep the naming of the full model so sparsity
    plans read the same at both scales.
    """
    c1, c4a, c4b, c5a, c5b = widths
    layers = []
    layers += _conv("1a", c1) + _pool("pool1")
    layers += _conv("4a", c4a) + _conv("4b", c4b) + _pool("pool4")
    layers += _local("5a", c5a) + _local("5b", c5b)
    layers += [LayerSpec("drop5b", "dropout", dropout_rate=dropout[0])]
    layers += [LayerSpec("f", "fc", out_channels=feature_dim), LayerSpec("reluf", "relu")]
    layers += [LayerSpec("dropf", "dropout", dropout_rate=dropout[1])]
    layers += [LayerSpec("cls", "fc", out_channels=classes), LayerSpec("softmax", "softmax")]
    return NetworkSpec((input_hw[0], input_hw[1], channels), layers, classes)

"""Shared builders for the test suite."""

import gzip
import os

import numpy as np

from liplocal.errors import ShapeError
from liplocal.io_formats import Dataset, load_idx, write_idx
from liplocal.network import parse_architecture

HIDDEN = ("relu", "relu_theta", "clipped_maxmin")


def random_arch(rng, n_layers, conv_ok=True, n_classes=3):
    """Architecture string with ``n_layers`` items; convs (if any) come first."""
    items = []
    n_conv = rng.integers(0, n_layers) if conv_ok else 0
    for _ in range(n_conv):
        k = int(rng.integers(2, 4))
        items.append(f"C({int(rng.choice([2, 4]))},{k},{int(rng.integers(1, 3))},{int(rng.integers(0, 2))})")
    for _ in range(n_layers - 1 - n_conv):
        items.append(f"F({int(rng.choice([4, 6, 8]))})")
    items.append(f"F({n_classes})")
    return "-".join(items)


def random_network(rng, n_layers=None, activation=None, conv_ok=True):
    """Small random network with non-zero biases and thresholds spread around zero."""
    n_layers = int(rng.integers(2, 5)) if n_layers is None else n_layers
    activation = str(rng.choice(HIDDEN)) if activation is None else activation
    conv = conv_ok and rng.random() < 0.6
    shape = (2, 6, 6) if conv else (5,)
    while True:
        try:
            net = parse_architecture(random_arch(rng, n_layers, conv_ok=conv), shape, activation=activation,
                                     seed=int(rng.integers(1 << 30)))
            break
        except ShapeError:
            continue  # conv chain shrank below 1x1
    for layer in net.layers:
        layer.bias = 0.3 * rng.standard_normal(layer.bias.shape)
        if layer.activation == "relu_theta":
            layer.theta = rng.uniform(0.05, 1.0, layer.theta.shape)
        elif layer.activation == "clipped_maxmin":
            layer.a = rng.uniform(0.0, 0.8, layer.a.shape)
            layer.b = layer.a - rng.uniform(0.2, 1.5, layer.b.shape)
    return net


def mnist_subset(tmp_dir):
    """Write the 5000-image MNIST subset bundled with mlxtend as gzipped IDX files and load it back.

    The subset is sorted by class, so a fixed permutation is applied before writing.
    Returns ``None`` when mlxtend is not installed.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError:
        return None
    x, y = mnist_data()
    perm = np.random.default_rng(0).permutation(len(y))
    x = x[perm].reshape(-1, 28, 28).astype(np.uint8)
    y = y[perm].astype(np.uint8)
    img, lab = os.path.join(tmp_dir, "images.idx"), os.path.join(tmp_dir, "labels.idx")
    write_idx(img, x)
    write_idx(lab, y, labels=True)
    with open(img, "rb") as f, gzip.open(img + ".gz", "wb") as g:
        g.write(f.read())
    return load_idx(img + ".gz", lab), img + ".gz", lab


def split(data, n_train, n_test):
    train = data.subset(np.arange(n_train))
    test = data.subset(np.arange(n_train, n_train + n_test))
    return train, Dataset(test.x, test.y, test.ids)

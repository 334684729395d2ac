"""Layers, activations, the architecture grammar and the forward pass."""

import math
import re
from dataclasses import dataclass, field

import numpy as np

from liplocal import autodiff as ad
from liplocal.errors import ContractError, ParseError, ShapeError
from liplocal.tensor import DTYPE, conv_output_size

ACTIVATIONS = ("none", "relu", "relu_theta", "maxmin", "clipped_maxmin")
THETA_MIN = 1e-3


@dataclass
class LayerSpec:
    kind: str  # "linear" | "conv"
    weight: np.ndarray
    bias: np.ndarray
    in_shape: tuple
    out_shape: tuple
    activation: str = "none"
    stride: int = 1
    padding: int = 0
    theta: np.ndarray = None  # relu_theta: one threshold per output neuron
    a: np.ndarray = None  # clipped_maxmin: cap on each max output, shape of half the channels
    b: np.ndarray = None  # clipped_maxmin: floor on each min output

    @property
    def in_size(self):
        return math.prod(self.in_shape)

    @property
    def out_size(self):
        return math.prod(self.out_shape)

    def param_names(self):
        names = ["weight", "bias"]
        if self.activation == "relu_theta":
            names.append("theta")
        elif self.activation == "clipped_maxmin":
            names += ["a", "b"]
        return names

    def params(self):
        return {k: getattr(self, k) for k in self.param_names()}

    def token(self):
        if self.kind == "linear":
            return f"F({self.out_shape[0]})"
        return f"C({self.out_shape[0]},{self.weight.shape[2]},{self.stride},{self.padding})"

    def validate(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.activation == "relu_theta" and np.any(self.theta <= 0):
            raise ContractError("relu_theta thresholds must be positive")
        if self.activation == "clipped_maxmin" and np.any(self.b >= self.a):
            raise ContractError("clipped_maxmin needs b < a elementwise")
        if self.activation in ("maxmin", "clipped_maxmin") and self.out_shape[0] % 2:
            raise ContractError(f"maxmin needs an even feature/channel count, got {self.out_shape[0]}")


@dataclass
class NetworkSpec:
    input_shape: tuple
    layers: list
    name: str = ""
    eps_trained: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return self.layers[-1].out_shape[0]

    @property
    def arch(self):
        return render(self)

    @property
    def activation(self):
        return self.layers[0].activation if len(self.layers) > 1 else "none"

    def copy(self):
        layers = []
        for l in self.layers:
            kw = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in vars(l).items()}
            layers.append(LayerSpec(**kw))
        return NetworkSpec(tuple(self.input_shape), layers, self.name, self.eps_trained, dict(self.meta))

    def validate(self):
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            size = math.prod(shape)
            if layer.kind == "linear" and layer.in_size != size:
                raise ShapeError(f"layer {i}: expects {layer.in_size} inputs, gets {size}")
            if layer.kind == "conv" and tuple(layer.in_shape) != shape:
                raise ShapeError(f"layer {i}: expects {layer.in_shape}, gets {shape}")
            layer.validate()
            shape = tuple(layer.out_shape)
        if self.layers[-1].activation != "none":
            raise ContractError("final layer must not have an activation")
        if self.layers[-1].kind != "linear":
            raise ContractError("final layer must be linear")


_ITEM = re.compile(r"(C)\((\d+),(\d+),(\d+),(\d+)\)|(F)\((\d+)\)")


def tokenize_architecture(spec):
    """Split an architecture string into ``("C", c, k, s, p)`` / ``("F", c)`` tuples."""
    s = spec.replace(" ", "")
    if not s:
        raise ParseError("empty architecture string", 0)
    items, pos = [], 0
    while True:
        m = _ITEM.match(s, pos)
        if m is None:
            raise ParseError(f"expected C(c,k,s,p) or F(c), found {s[pos:pos + 12]!r}", pos)
        if m.group(1):
            items.append(("C",) + tuple(int(g) for g in m.group(2, 3, 4, 5)))
        else:
            items.append(("F", int(m.group(7))))
        pos = m.end()
        if pos == len(s):
            return items
        if s[pos] != "-":
            raise ParseError(f"expected '-' between items, found {s[pos]!r}", pos)
        pos += 1


def kaiming_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def parse_architecture(spec, input_shape, num_classes=None, activation="relu_theta", theta_init=1.0, seed=0):
    """Build a randomly initialised network from an architecture string.

    >>> net = parse_architecture("F(10)", (3,), 10)
    >>> net.layers[0].weight.shape
    (10, 3)
    """
    if activation not in ACTIVATIONS or activation == "none":
        raise ContractError(f"unknown hidden activation {activation!r}")
    items = tokenize_architecture(spec)
    rng = np.random.default_rng(seed)
    shape = tuple(int(d) for d in input_shape)
    layers = []
    for i, item in enumerate(items):
        last = i == len(items) - 1
        act = "none" if last else activation
        if item[0] == "C":
            _, c, k, s, p = item
            if len(shape) != 3:
                raise ShapeError(f"conv item {i} needs a C x H x W input, got {shape}")
            if c < 1 or k < 1 or s < 1:
                raise ShapeError(f"conv item {i} has non-positive size")
            oh = conv_output_size(shape[1], k, s, p)
            ow = conv_output_size(shape[2], k, s, p)
            if oh < 1 or ow < 1:
                raise ShapeError(f"conv item {i}: output {oh}x{ow} underflows")
            fan_in = shape[0] * k * k
            layer = LayerSpec(
                "conv", kaiming_uniform(rng, (c, shape[0], k, k), fan_in), np.zeros(c, dtype=DTYPE),
                shape, (c, oh, ow), act, s, p,
            )
        else:
            c = item[1]
            if c < 1:
                raise ShapeError(f"linear item {i} has no outputs")
            fan_in = math.prod(shape)
            layer = LayerSpec(
                "linear", kaiming_uniform(rng, (c, fan_in), fan_in), np.zeros(c, dtype=DTYPE),
                (fan_in,), (c,), act,
            )
        init_activation_params(layer, theta_init)
        layers.append(layer)
        shape = layer.out_shape
    net = NetworkSpec(tuple(int(d) for d in input_shape), layers, name=spec)
    if num_classes is not None and net.num_classes != num_classes:
        raise ShapeError(f"architecture ends in {net.num_classes} outputs, expected {num_classes}")
    net.validate()
    return net


def init_activation_params(layer, theta_init=1.0):
    if layer.activation == "relu_theta":
        layer.theta = np.full(layer.out_shape, float(theta_init), dtype=DTYPE)
    elif layer.activation == "clipped_maxmin":
        half = (layer.out_shape[0] // 2,) + tuple(layer.out_shape[1:])
        layer.a = np.full(half, float(theta_init), dtype=DTYPE)
        layer.b = np.full(half, -float(theta_init), dtype=DTYPE)


def render(net):
    return "-".join(l.token() for l in net.layers)


# scalar reference activations


def relu_theta(z, theta):
    if theta <= 0:
        raise ContractError("theta must be positive")
    if z <= 0:
        return 0.0
    return z if z < theta else theta


def clipped_maxmin(x1, x2, a, b):
    if not b < a:
        raise ContractError("clipped_maxmin needs b < a")
    return min(max(x1, x2), a), max(min(x1, x2), b)


# batched forward


def layer_params(layer, params=None):
    """The layer's parameters, overridden by tape variables from ``params``."""
    p = layer.params()
    if params:
        p.update(params)
    return p


def apply_linear_part(layer, x, weight, bias=None):
    """Affine map of one layer on a batch; flattens into linear layers."""
    n = ad.value_of(x).shape[0]
    if layer.kind == "linear":
        if ad.value_of(x).ndim != 2:
            x = ad.reshape(x, (n, -1))
        return ad.linear(x, weight, bias)
    return ad.conv2d(x, weight, bias, layer.stride, layer.padding)


def apply_operator(layer, x, weight=None):
    """The bias-free linear operator of a layer on a batch of inputs shaped like its input."""
    return apply_linear_part(layer, x, layer.weight if weight is None else weight)


def apply_activation(layer, z, p):
    act = layer.activation
    if act == "none":
        return z
    if act == "relu":
        return ad.relu(z)
    if act == "relu_theta":
        return ad.relu_theta(z, p["theta"])
    hi, lo = p.get("a"), p.get("b")
    z1, z2 = ad.getitem(z, (slice(None), slice(0, None, 2))), ad.getitem(z, (slice(None), slice(1, None, 2)))
    mx, mn = ad.maximum(z1, z2), ad.minimum(z1, z2)
    if act == "clipped_maxmin":
        mx, mn = ad.minimum(mx, hi), ad.maximum(mn, lo)
    return ad.interleave(mx, mn, axis=1)


def forward(net, x, params=None, return_activations=False):
    """Logits for a single input or a batch.

    ``params`` optionally maps layer index -> {name: Var} to record the pass on
    the tape. With ``return_activations`` also returns the lists of
    pre-activations and post-activations per layer.
    """
    xv = ad.value_of(x)
    single = xv.shape == tuple(net.input_shape)
    if not single and xv.shape[1:] != tuple(net.input_shape):
        raise ShapeError(f"input shape {xv.shape} does not match {net.input_shape}")
    h = ad.reshape(x, (1,) + xv.shape) if single else x
    pre, post = [], []
    for i, layer in enumerate(net.layers):
        p = layer_params(layer, params.get(i) if params else None)
        z = apply_linear_part(layer, h, p["weight"], p["bias"])
        h = apply_activation(layer, z, p)
        pre.append(z)
        post.append(h)
    out = ad.reshape(h, ad.value_of(h).shape[1:]) if single else h
    if return_activations:
        return out, pre, post
    return out


def predict(net, x, batch_size=1024):
    x = np.asarray(x, dtype=DTYPE)
    out = [forward(net, x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.argmax(np.concatenate(out), axis=1)


def make_toy_network():
    """Three-layer ReLU-theta network with diag(3,2,1) hidden weights and theta = 1."""
    w = np.diag([3.0, 2.0, 1.0])
    layers = [
        LayerSpec("linear", w.copy(), np.zeros(3), (3,), (3,), "relu_theta", theta=np.ones(3)),
        LayerSpec("linear", w.copy(), np.zeros(3), (3,), (3,), "relu_theta", theta=np.ones(3)),
        LayerSpec("linear", np.ones((1, 3)), np.zeros(1), (3,), (1,), "none"),
    ]
    return NetworkSpec((3,), layers, name="toy")

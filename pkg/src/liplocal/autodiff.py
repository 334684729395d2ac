"""Minimal reverse-mode differentiation over numpy arrays.

Every op below accepts plain arrays or :class:`Var` nodes. When no input is a
``Var`` the op returns a plain array, so the same model code runs either as a
fast numeric pass or recorded on the tape for :func:`backward`.

Subgradients at kinks: ``relu`` and ``relu_theta`` use slope 0 at ``z == 0``
and ``z == theta``; ``maximum``/``minimum`` route ties to the first argument.
"""

import numpy as np

from liplocal import tensor as T
from liplocal.errors import ShapeError


class Var:
    """A node on the tape: forward value plus the rule that pulls gradients back."""

    __slots__ = ("value", "parents", "grad_fn", "op", "name")

    def __init__(self, value, parents=(), grad_fn=None, op="leaf", name=None):
        self.value = np.asarray(value, dtype=T.DTYPE)
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def leaf(value, name=None):
    return Var(np.array(value, dtype=T.DTYPE), name=name)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=T.DTYPE)


def _traced(*xs):
    return any(isinstance(x, Var) for x in xs)


def record(op, inputs, value, grad_fn):
    """Append a node computed from ``inputs``.

    ``grad_fn(g)`` maps the output gradient to one gradient (or ``None``) per
    input. Untraced inputs are kept so ``grad_fn`` indices line up.
    """
    return Var(value, parents=inputs, grad_fn=grad_fn, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(output, seed=None):
    """Accumulate gradients of ``output`` into every leaf reachable from it.

    Returns a dict ``{leaf Var: gradient array}``.
    """
    if not isinstance(output, Var):
        raise TypeError("backward needs a Var")
    if seed is None:
        if output.value.size != 1:
            raise ShapeError(f"seed required for non-scalar output of shape {output.shape}")
        seed = np.ones_like(output.value)
    seed = np.asarray(seed, dtype=T.DTYPE)
    if seed.shape != output.value.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")

    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Var) and id(p) not in seen:
                stack.append((p, False))

    grads = {id(output): seed}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_fn is None:
            leaves[node] = g
            continue
        for p, pg in zip(node.parents, node.grad_fn(g)):
            if not isinstance(p, Var) or pg is None:
                continue
            pg = _unbroadcast(pg, p.value.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaves


# elementwise arithmetic


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _traced(a, b):
        return out
    return record("add", (a, b), out, lambda g: (g, g))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not _traced(a, b):
        return out
    return record("sub", (a, b), out, lambda g: (g, -g))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _traced(a, b):
        return out
    return record("mul", (a, b), out, lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if not _traced(a, b):
        return out
    return record("div", (a, b), out, lambda g: (g / bv, -g * av / (bv * bv)))


def neg(a):
    if not _traced(a):
        return -value_of(a)
    return record("neg", (a,), -a.value, lambda g: (-g,))


def square(a):
    av = value_of(a)
    if not _traced(a):
        return av * av
    return record("square", (a,), av * av, lambda g: (2.0 * av * g,))


def sqrt(a):
    av = value_of(a)
    out = np.sqrt(av)
    if not _traced(a):
        return out

    def grad(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return record("sqrt", (a,), out, grad)


def exp(a):
    out = np.exp(value_of(a))
    if not _traced(a):
        return out
    return record("exp", (a,), out, lambda g: (g * out,))


def absolute(a):
    av = value_of(a)
    if not _traced(a):
        return np.abs(av)
    return record("abs", (a,), np.abs(av), lambda g: (g * np.sign(av),))


def relu(a):
    av = value_of(a)
    out = np.maximum(av, 0.0)
    if not _traced(a):
        return out
    return record("relu", (a,), out, lambda g: (g * (av > 0),))


def relu_theta(z, theta):
    """0 below zero, identity on (0, theta), theta above."""
    zv, tv = value_of(z), value_of(theta)
    out = np.clip(zv, 0.0, None)
    out = np.where(zv >= tv, np.broadcast_to(tv, out.shape), out)
    if not _traced(z, theta):
        return out
    lin = (zv > 0) & (zv < tv)
    top = zv >= tv
    return record("relu_theta", (z, theta), out, lambda g: (g * lin, g * top))


def maximum(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.maximum(av, bv)
    if not _traced(a, b):
        return out
    first = av >= bv
    return record("maximum", (a, b), out, lambda g: (g * first, g * ~first))


def minimum(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.minimum(av, bv)
    if not _traced(a, b):
        return out
    first = av <= bv
    return record("minimum", (a, b), out, lambda g: (g * first, g * ~first))


# reductions and shape ops


def sum(a, axis=None, keepdims=False):  # noqa: A001
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not _traced(a):
        return out

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return record("sum", (a,), out, grad)


def mean(a, axis=None):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def amax(a, axis=-1):
    """Max along ``axis``; the gradient goes to the first maximiser."""
    av = value_of(a)
    idx = np.argmax(av, axis=axis)
    out = np.take_along_axis(av, np.expand_dims(idx, axis), axis).squeeze(axis)
    if not _traced(a):
        return out

    def grad(g):
        gz = np.zeros_like(av)
        np.put_along_axis(gz, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (gz,)

    return record("amax", (a,), out, grad)


def prod(terms):
    out = terms[0]
    for t in terms[1:]:
        out = mul(out, t)
    return out


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    if not _traced(a):
        return out
    return record("reshape", (a,), out, lambda g: (g.reshape(av.shape),))


def getitem(a, idx):
    av = value_of(a)
    out = av[idx]
    if not _traced(a):
        return out

    def grad(g):
        gz = np.zeros_like(av)
        np.add.at(gz, idx, g)
        return (gz,)

    return record("getitem", (a,), out, grad)


def take(a, indices, axis=0):
    """Gather with a 1-D integer index array along ``axis``."""
    av = value_of(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(av, indices, axis=axis)
    if not _traced(a):
        return out

    def grad(g):
        gz = np.zeros_like(av)
        np.add.at(np.moveaxis(gz, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (gz,)

    return record("take", (a,), out, grad)


def take_along(a, indices, axis=-1):
    av = value_of(a)
    out = np.take_along_axis(av, indices, axis)
    if not _traced(a):
        return out

    def grad(g):
        gz = np.zeros_like(av)
        np.put_along_axis(gz, indices, g, axis)
        return (gz,)

    return record("take_along", (a,), out, grad)


def concat(items, axis=-1):
    vals = [value_of(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    if not _traced(*items):
        return out
    edges = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return record("concat", tuple(items), out, lambda g: tuple(np.split(g, edges, axis=axis)))


def interleave(a, b, axis=1):
    """Stack ``a`` and ``b`` alternately along ``axis``: a0, b0, a1, b1, ..."""
    av, bv = value_of(a), value_of(b)
    st = np.stack([av, bv], axis=axis + 1)
    shape = av.shape[:axis] + (2 * av.shape[axis],) + av.shape[axis + 1 :]
    out = st.reshape(shape)
    if not _traced(a, b):
        return out

    def grad(g):
        gs = g.reshape(st.shape)
        return np.take(gs, 0, axis=axis + 1), np.take(gs, 1, axis=axis + 1)

    return record("interleave", (a, b), out, grad)


# layer ops


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for a batch ``x`` of shape (N, in)."""
    xv, wv = value_of(x), value_of(weight)
    if xv.shape[-1] != wv.shape[1]:
        raise ShapeError(f"linear: input width {xv.shape[-1]} != weight columns {wv.shape[1]}")
    out = xv @ wv.T
    if bias is not None:
        out = out + value_of(bias)
    if not _traced(x, weight, bias):
        return out

    def grad(g):
        gx = g @ wv
        gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return record("linear", (x, weight, bias), out, grad)


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    xv, kv = value_of(x), value_of(kernel)
    out = T.conv2d(xv, kv, stride, padding)
    if bias is not None:
        out = out + value_of(bias).reshape(1, -1, 1, 1)
    if not _traced(x, kernel, bias):
        return out

    def grad(g):
        gx = T.conv2d_transpose(g, kv, stride, padding, xv.shape[2:]) if isinstance(x, Var) else None
        gk = T.conv2d_kernel_grad(xv, g, kv.shape[2], stride, padding) if isinstance(kernel, Var) else None
        gb = g.sum(axis=(0, 2, 3)) if isinstance(bias, Var) else None
        return gx, gk, gb

    return record("conv2d", (x, kernel, bias), out, grad)


def l2norm(a, axis=-1):
    """Euclidean norm along ``axis``; zero vectors get a zero gradient."""
    av = value_of(a)
    out = np.sqrt(np.sum(av * av, axis=axis))
    if not _traced(a):
        return out

    def grad(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.expand_dims(np.where(out > 0, g / safe, 0.0), axis) * av,)

    return record("l2norm", (a,), out, grad)


def logsumexp(a, axis=-1):
    av = value_of(a)
    m = av.max(axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    if not _traced(a):
        return out
    soft = e / s
    return record("logsumexp", (a,), out, lambda g: (np.expand_dims(g, axis) * soft,))


def cross_entropy(logits, labels):
    """Per-sample cross-entropy of (N, K) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    picked = take_along(logits, labels[:, None], axis=-1)
    return sub(logsumexp(logits, axis=-1), reshape(picked, (labels.shape[0],)))


def _layer_op(kind, w, x, stride, padding):
    if kind == "linear":
        return x @ w.T
    return T.conv2d(x, w, stride, padding)


def _fit_mask(mask, shape, like):
    # a mask produced for a conv activation may feed a linear layer that sees it flattened
    m = np.asarray(mask, dtype=T.DTYPE)
    batched = len(like) > len(shape)
    return m.reshape(((-1,) if batched else ()) + tuple(shape)) if m.size != 1 else m


def spectral_norm_grad(layer, u, v, mask_in=None, mask_out=None):
    """Gradient of ``sigma = v . (I_out op(W, I_in u))`` with respect to W.

    ``u`` and ``v`` are constants (batched along axis 0 is allowed; the result
    is summed over the batch). For a linear layer this is the masked outer
    product ``(I_out v)(I_in u)^T``.
    """
    u = np.asarray(u, dtype=T.DTYPE)
    v = np.asarray(v, dtype=T.DTYPE)
    if mask_in is not None:
        u = u * _fit_mask(mask_in, layer.in_shape, u.shape)
    if mask_out is not None:
        v = v * _fit_mask(mask_out, layer.out_shape, v.shape)
    if layer.kind == "linear":
        u2 = u.reshape(-1, layer.weight.shape[1])
        v2 = v.reshape(-1, layer.weight.shape[0])
        return v2.T @ u2
    if u.ndim == 3:
        u, v = u[None], v[None]
    return T.conv2d_kernel_grad(u, v, layer.weight.shape[2], layer.stride, layer.padding)


def masked_sigma(layer, weight, u, v, mask_in=None, mask_out=None):
    """Per-sample ``v_n . (I_out op(W, I_in u_n))`` with u, v held constant.

    ``u`` is (N, *in_shape) and ``v`` is (N, *out_shape); returns (N,).
    """
    wv = value_of(weight)
    ui = u if mask_in is None else u * _fit_mask(mask_in, layer.in_shape, np.shape(u))
    vo = v if mask_out is None else v * _fit_mask(mask_out, layer.out_shape, np.shape(v))
    n = ui.shape[0]
    x = ui.reshape(n, -1) if layer.kind == "linear" else ui
    out = (_layer_op(layer.kind, wv, x, layer.stride, layer.padding).reshape(n, -1) * vo.reshape(n, -1)).sum(axis=1)
    if not _traced(weight):
        return out

    def grad(g):
        # per-sample weighting folds into v
        gv = vo * g.reshape((n,) + (1,) * (vo.ndim - 1))
        return (spectral_norm_grad(layer, ui, gv),)

    return record("masked_sigma", (weight,), out, grad)

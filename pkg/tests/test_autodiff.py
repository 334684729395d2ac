import numpy as np
import pytest

from liplocal import autodiff as ad
from liplocal.errors import ShapeError
from liplocal.network import LayerSpec


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def check(fn, *shapes, seed=0, rtol=1e-6, atol=1e-8):
    rng = np.random.default_rng(seed)
    args = [rng.standard_normal(s) for s in shapes]
    leaves = [ad.leaf(a) for a in args]
    out = fn(*leaves)
    grads = ad.backward(out)
    for i, a in enumerate(args):
        def f(v, i=i):
            vals = list(args)
            vals[i] = v
            return float(fn(*vals))

        np.testing.assert_allclose(grads[leaves[i]], numeric_grad(f, a), rtol=rtol, atol=atol)


@pytest.mark.parametrize(
    "fn,shapes",
    [
        (lambda a, b: ad.sum(ad.mul(ad.add(a, b), ad.sub(a, b))), [(3, 4), (4,)]),
        (lambda a, b: ad.sum(ad.div(a, ad.add(ad.square(b), 1.0))), [(2, 3), (2, 3)]),
        (lambda a: ad.sum(ad.exp(ad.mul(a, 0.3))), [(5,)]),
        (lambda a: ad.sum(ad.sqrt(ad.add(ad.square(a), 1.0))), [(4,)]),
        (lambda a: ad.sum(ad.absolute(a)), [(6,)]),
        (lambda a: ad.sum(ad.relu(a)), [(6,)]),
        (lambda a, t: ad.sum(ad.relu_theta(a, ad.add(ad.absolute(t), 0.5))), [(3, 4), (4,)]),
        (lambda a, b: ad.sum(ad.maximum(a, b)), [(5,), (5,)]),
        (lambda a, b: ad.sum(ad.minimum(a, b)), [(5,), (5,)]),
        (lambda a: ad.sum(ad.amax(a, axis=1)), [(3, 5)]),
        (lambda a: ad.mean(ad.reshape(a, (6, 2))), [(3, 4)]),
        (lambda a: ad.sum(ad.getitem(a, (slice(None), slice(0, None, 2)))), [(3, 4)]),
        (lambda a: ad.sum(ad.mul(ad.take(a, np.array([2, 0, 2]), axis=0), 1.5)), [(3, 4)]),
        (lambda a: ad.sum(ad.take_along(a, np.array([[1], [0], [3]]), axis=1)), [(3, 4)]),
        (lambda a, b: ad.sum(ad.mul(ad.concat([a, b], axis=1), np.arange(7.0))), [(2, 3), (2, 4)]),
        (lambda a, b: ad.sum(ad.mul(ad.interleave(a, b), np.arange(6.0))), [(2, 3), (2, 3)]),
        (lambda a: ad.sum(ad.l2norm(a, axis=1)), [(3, 4)]),
        (lambda a: ad.sum(ad.logsumexp(a, axis=1)), [(3, 4)]),
        (lambda a: ad.sum(ad.cross_entropy(a, np.array([0, 3, 1]))), [(3, 4)]),
        (lambda a, b: ad.prod([ad.sum(a), ad.sum(b), 2.0]), [(3,), (2,)]),
        (lambda x, w, b: ad.sum(ad.square(ad.linear(x, w, b))), [(4, 3), (5, 3), (5,)]),
    ],
)
def test_op_gradients(fn, shapes):
    check(fn, *shapes)


def test_conv_gradient_all_inputs():
    def fn(x, k, b):
        return ad.sum(ad.square(ad.conv2d(x, k, b, stride=2, padding=1)))

    check(fn, (2, 2, 5, 5), (3, 2, 3, 3), (3,), rtol=1e-5, atol=1e-7)


def test_kink_conventions():
    z = ad.leaf(np.array([0.0, 1.0, 0.5]))
    g = ad.backward(ad.sum(ad.relu_theta(z, np.ones(3))))[z]
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])
    g = ad.backward(ad.sum(ad.relu(z)))[z]
    np.testing.assert_array_equal(g, [0.0, 1.0, 1.0])
    a, b = ad.leaf(np.array([1.0])), ad.leaf(np.array([1.0]))
    grads = ad.backward(ad.sum(ad.maximum(a, b)))
    assert grads[a][0] == 1.0 and grads[b][0] == 0.0
    s = ad.leaf(np.zeros(3))
    np.testing.assert_array_equal(ad.backward(ad.sum(ad.sqrt(s)))[s], 0.0)


def test_untraced_ops_return_arrays():
    out = ad.add(np.ones(2), np.ones(2))
    assert isinstance(out, np.ndarray)


def test_backward_requires_scalar_or_seed():
    a = ad.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(a, 2.0))
    g = ad.backward(ad.mul(a, 2.0), seed=np.ones(3))
    np.testing.assert_array_equal(g[a], 2.0)
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(a, 2.0), seed=np.ones(2))


def test_shared_subexpression_accumulates():
    a = ad.leaf(np.array(3.0))
    b = ad.mul(a, a)
    g = ad.backward(ad.add(b, b))[a]
    assert g == pytest.approx(12.0)


def test_deep_chain_does_not_recurse():
    a = ad.leaf(np.array(1.0))
    out = a
    for _ in range(5000):
        out = ad.add(out, 1e-3)
    assert ad.backward(out)[a] == pytest.approx(1.0)


@pytest.mark.parametrize("kind", ["linear", "conv"])
def test_masked_sigma_gradient(kind):
    rng = np.random.default_rng(11)
    if kind == "linear":
        layer = LayerSpec("linear", rng.standard_normal((4, 6)), np.zeros(4), (6,), (4,), "relu")
    else:
        layer = LayerSpec("conv", rng.standard_normal((2, 2, 3, 3)), np.zeros(2), (2, 5, 5), (2, 3, 3), "relu", 2, 1)
    n = 3
    u = rng.standard_normal((n,) + layer.in_shape)
    v = rng.standard_normal((n,) + layer.out_shape)
    mi = (rng.random((n,) + layer.in_shape) < 0.6).astype(float)
    mo = (rng.random((n,) + layer.out_shape) < 0.6).astype(float)
    w0 = layer.weight.copy()
    wl = ad.leaf(w0)
    coef = rng.standard_normal(n)
    g = ad.backward(ad.sum(ad.mul(ad.masked_sigma(layer, wl, u, v, mi, mo), coef)))[wl]
    fd = numeric_grad(lambda w: float(np.sum(ad.masked_sigma(layer, w, u, v, mi, mo) * coef)), w0)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)

"""Interval (box) and box-plus-ball propagation of an l2 input ball."""

from dataclasses import dataclass, field

import numpy as np

from liplocal import autodiff as ad
from liplocal import network
from liplocal.errors import DomainError


@dataclass
class LayerBounds:
    """Per-layer bounds for a batch, index ``l`` = output of layer ``l``.

    ``lb``/``ub`` bound the pre-activations, ``post_lb``/``post_ub`` the
    activation outputs. ``clean_pre``/``clean_post`` are the unperturbed
    values. In BCP mode ``ball_radius[l]`` holds the per-neuron ball radius
    and ``rho[l]`` the l2 radius of the ball around ``clean_post[l]``;
    ``rho_in`` is the input radius. Entries may be tape ``Var`` nodes.
    """

    mode: str
    eps: float
    lb: list = field(default_factory=list)
    ub: list = field(default_factory=list)
    post_lb: list = field(default_factory=list)
    post_ub: list = field(default_factory=list)
    clean_pre: list = field(default_factory=list)
    clean_post: list = field(default_factory=list)
    ball_radius: list = None
    rho: list = None

    def __len__(self):
        return len(self.lb)

    def midpoint(self, l):
        return 0.5 * (ad.value_of(self.ub[l]) + ad.value_of(self.lb[l]))

    def radius(self, l):
        return 0.5 * (ad.value_of(self.ub[l]) - ad.value_of(self.lb[l]))

    def values(self):
        """A copy with every tape node replaced by its value."""
        def v(xs):
            return None if xs is None else [ad.value_of(t) for t in xs]

        return LayerBounds(self.mode, self.eps, v(self.lb), v(self.ub), v(self.post_lb), v(self.post_ub),
                           v(self.clean_pre), v(self.clean_post), v(self.ball_radius), v(self.rho))

    @property
    def has_ball(self):
        return self.rho is not None


def interval_maxmin(lb1, ub1, lb2, ub2, a=None, b=None):
    """Box image of the (optionally clipped) MaxMin pair.

    Returns ``((lb_max, ub_max), (lb_min, ub_min))``. ``a`` caps the max
    output and ``b`` floors the min output.
    """
    lmax, umax = ad.maximum(lb1, lb2), ad.maximum(ub1, ub2)
    lmin, umin = ad.minimum(lb1, lb2), ad.minimum(ub1, ub2)
    if a is not None:
        lmax, umax = ad.minimum(lmax, a), ad.minimum(umax, a)
    if b is not None:
        lmin, umin = ad.maximum(lmin, b), ad.maximum(umin, b)
    return (lmax, umax), (lmin, umin)


def activation_bounds(layer, lb, ub, p):
    """Image of the box [lb, ub] under the layer's activation."""
    act = layer.activation
    if act == "none":
        return lb, ub
    if act == "relu":
        return ad.relu(lb), ad.relu(ub)
    if act == "relu_theta":
        return ad.relu_theta(lb, p["theta"]), ad.relu_theta(ub, p["theta"])
    even, odd = (slice(None), slice(0, None, 2)), (slice(None), slice(1, None, 2))
    a = p.get("a") if act == "clipped_maxmin" else None
    b = p.get("b") if act == "clipped_maxmin" else None
    (lmax, umax), (lmin, umin) = interval_maxmin(
        ad.getitem(lb, even), ad.getitem(ub, even), ad.getitem(lb, odd), ad.getitem(ub, odd), a, b
    )
    return ad.interleave(lmax, lmin, axis=1), ad.interleave(umax, umin, axis=1)


def row_norms(layer, weight):
    """l2 norm of each row of the layer's matrix, shaped like one output."""
    if layer.kind == "linear":
        return ad.l2norm(weight, axis=1)
    ones = np.ones((1,) + tuple(layer.in_shape))
    sq = ad.conv2d(ones, ad.square(weight), None, layer.stride, layer.padding)
    return ad.reshape(ad.sqrt(sq), tuple(layer.out_shape))


def _batch(net, x):
    xv = ad.value_of(x)
    if xv.shape == tuple(net.input_shape):
        return ad.reshape(x, (1,) + xv.shape)
    return x


def ibp_forward(net, x, eps, params=None):
    """Box bounds from the tightest box around the l2 ball of radius ``eps``."""
    return _propagate(net, x, eps, params, sigmas=None)


def bcp_forward(net, x, eps, sigmas=None, params=None):
    """Box bounds intersected with ball bounds built from global spectral norms.

    ``sigmas`` are per-layer spectral norms (floats or tape nodes); when
    omitted they are estimated by power iteration.
    """
    if sigmas is None:
        from liplocal.lipschitz import global_lipschitz

        _, sigmas = global_lipschitz(net, tol=1e-8)
    return _propagate(net, x, eps, params, sigmas=sigmas)


def _propagate(net, x, eps, params, sigmas):
    if eps < 0:
        raise DomainError(f"eps must be non-negative, got {eps}")
    x = _batch(net, x)
    ball = sigmas is not None
    out = LayerBounds("bcp" if ball else "ibp", float(eps))
    if ball:
        out.ball_radius, out.rho = [], []
    m, r = x, np.full(ad.value_of(x).shape, float(eps))
    h, rho = x, float(eps)
    for i, layer in enumerate(net.layers):
        p = network.layer_params(layer, params.get(i) if params else None)
        w = p["weight"]
        m_box = network.apply_linear_part(layer, m, w, p["bias"])
        r_box = network.apply_linear_part(layer, r, ad.absolute(w))
        z = network.apply_linear_part(layer, h, w, p["bias"])
        lb, ub = ad.sub(m_box, r_box), ad.add(m_box, r_box)
        if ball:
            r_ball = ad.mul(row_norms(layer, w), rho)
            lb = ad.maximum(lb, ad.sub(z, r_ball))
            ub = ad.minimum(ub, ad.add(z, r_ball))
            rho = ad.mul(rho, sigmas[i])
            out.ball_radius.append(r_ball)
            out.rho.append(rho)
        plb, pub = activation_bounds(layer, lb, ub, p)
        h = network.apply_activation(layer, z, p)
        out.lb.append(lb)
        out.ub.append(ub)
        out.post_lb.append(plb)
        out.post_ub.append(pub)
        out.clean_pre.append(z)
        out.clean_post.append(h)
        m = ad.mul(ad.add(plb, pub), 0.5)
        r = ad.mul(ad.sub(pub, plb), 0.5)
    return out


def sample_l2_ball(x, eps, n, rng):
    """``n`` points drawn uniformly from the l2 ball of radius ``eps`` around ``x``."""
    x = np.asarray(x, dtype=float)
    d = x.size
    dirs = rng.standard_normal((n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = eps * rng.random(n) ** (1.0 / d)
    return x[None] + (dirs * radii[:, None]).reshape((n,) + x.shape)

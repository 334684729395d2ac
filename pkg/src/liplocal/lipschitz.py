"""Indicator masks and global / local Lipschitz bounds.

A hidden neuron whose output cannot change inside the input ball contributes
nothing to the network's local slope, so its row in the preceding weight
matrix and its column in the following one can be dropped before the
spectral norm is taken.
"""

from dataclasses import dataclass

import numpy as np

from liplocal import autodiff as ad
from liplocal import spectral
from liplocal.bounds import bcp_forward, ibp_forward
from liplocal.errors import DomainError


@dataclass
class LayerMasks:
    """0/1 indicators for one hidden activation, batched along axis 0.

    ``varying + constant_zero + constant_theta == 1`` elementwise. For
    clipped MaxMin, ``constant_theta`` marks max outputs pinned at ``a`` and
    ``constant_zero`` min outputs pinned at ``b``; ``fixed_value`` holds the
    pinned output wherever an output is constant. ``rows`` is the row mask for
    the layer's own weight matrix: equal to ``varying`` for elementwise
    activations, and for MaxMin a pair keeps both rows unless both of its
    outputs are constant.
    """

    varying: np.ndarray
    constant_zero: np.ndarray
    constant_theta: np.ndarray
    fixed_value: np.ndarray
    rows: np.ndarray

    @property
    def max_clipped(self):
        return self.constant_theta

    @property
    def min_clipped(self):
        return self.constant_zero

    def varying_fraction(self):
        v = self.varying.reshape(self.varying.shape[0], -1)
        return v.mean(axis=1)


class ActivationMasks(list):
    """One :class:`LayerMasks` per hidden layer."""

    @classmethod
    def all_varying(cls, net, n=1):
        out = cls()
        for layer in net.layers[:-1]:
            shape = (n,) + tuple(layer.out_shape)
            one, zero = np.ones(shape), np.zeros(shape)
            out.append(LayerMasks(one, zero, zero.copy(), zero.copy(), one.copy()))
        return out

    def operator_masks(self, i, n_layers):
        """(mask_in, mask_out) for the operator of layer ``i``."""
        mask_in = self[i - 1].varying if i > 0 else None
        mask_out = self[i].rows if i < n_layers - 1 else None
        return mask_in, mask_out


def _layer_masks(layer, lb, ub):
    act = layer.activation
    zero = np.zeros_like(lb)
    if act == "relu":
        cz = (ub <= 0).astype(float)
        return LayerMasks(1.0 - cz, cz, zero, zero.copy(), 1.0 - cz)
    if act == "relu_theta":
        theta = np.broadcast_to(layer.theta, lb.shape)
        cz = (ub <= 0).astype(float)
        ct = (lb >= theta).astype(float)
        return LayerMasks(1.0 - cz - ct, cz, ct, ct * theta, 1.0 - cz - ct)
    if act == "maxmin":
        one = np.ones_like(lb)
        return LayerMasks(one, zero, zero.copy(), zero.copy(), one.copy())
    if act == "clipped_maxmin":
        lb1, lb2 = lb[:, 0::2], lb[:, 1::2]
        ub1, ub2 = ub[:, 0::2], ub[:, 1::2]
        a = np.broadcast_to(layer.a, lb1.shape)
        b = np.broadcast_to(layer.b, lb1.shape)
        top = (np.maximum(lb1, lb2) >= a).astype(float)
        bottom = (np.minimum(ub1, ub2) <= b).astype(float)
        ct = ad.interleave(top, np.zeros_like(top))
        cz = ad.interleave(np.zeros_like(bottom), bottom)
        fixed = ad.interleave(top * a, bottom * b)
        both = top * bottom
        rows = 1.0 - ad.interleave(both, both)
        return LayerMasks(1.0 - ct - cz, cz, ct, fixed, rows)
    raise ValueError(f"layer has no activation to mask: {act!r}")


def compute_masks(bounds, net):
    """Indicator masks for every hidden layer from pre-activation bounds."""
    out = ActivationMasks()
    for i, layer in enumerate(net.layers[:-1]):
        out.append(_layer_masks(layer, ad.value_of(bounds.lb[i]), ad.value_of(bounds.ub[i])))
    return out


def global_lipschitz(net, tol=1e-6, n_iter=None, max_iter=20000):
    """Product of per-layer spectral norms; activations are 1-Lipschitz."""
    sigmas = []
    for i, layer in enumerate(net.layers):
        s, _, _ = spectral.masked_spectral_norm(layer, n_iter=n_iter, tol=tol, max_iter=max_iter,
                                                layer_index=i, sample_ids=[2**31 - 1])
        sigmas.append(s)
    return float(np.prod(sigmas)), sigmas


def global_lipschitz_oracle(net):
    sigmas = [spectral.spectral_norm_oracle(spectral.materialize_conv_matrix(l)) for l in net.layers]
    return float(np.prod(sigmas)), sigmas


def _bounds(net, x, eps, mode, global_sigmas=None):
    if mode == "ibp":
        return ibp_forward(net, x, eps)
    if mode == "bcp":
        return bcp_forward(net, x, eps, sigmas=global_sigmas)
    raise ValueError(f"unknown bounds mode {mode!r}")


def local_lipschitz(net, x, eps, bounds_mode="ibp", cache=None, sample_ids=None, n_iter=None, tol=1e-3,
                    masks=None, bounds=None, safety=1.0, cap=None, epoch=0, max_iter=10000):
    """Local Lipschitz bound of ``net`` on the l2 ball of radius ``eps`` around ``x``.

    Returns ``(L_local, sigmas, masks)``; for a batch ``L_local`` has shape
    (N,) and ``sigmas`` (N, n_layers). ``cache`` warm-starts the power
    iteration per (sample id, layer) and receives the final iterates.
    ``safety`` multiplies every per-layer estimate; ``cap`` (per-layer
    global norms) clips each factor so the bound never exceeds the global
    one computed from the same estimates.
    """
    if eps < 0:
        raise DomainError(f"eps must be non-negative, got {eps}")
    xv = np.asarray(x, dtype=float)
    single = xv.shape == tuple(net.input_shape)
    if single:
        xv = xv[None]
    n = xv.shape[0]
    if sample_ids is None:
        sample_ids = list(range(n))
    if masks is None:
        if bounds is None:
            bounds = _bounds(net, xv, eps, bounds_mode)
        masks = compute_masks(bounds, net)
    sigmas = np.empty((n, len(net.layers)))
    for i, layer in enumerate(net.layers):
        mask_in, mask_out = masks.operator_masks(i, len(net.layers))
        u0 = cache.get_batch(sample_ids, i, layer.in_shape) if cache is not None else None
        s, u, _ = spectral.masked_spectral_norm(
            layer, mask_in, mask_out, u0=u0 if u0 is not None else None, n_iter=n_iter, tol=tol,
            max_iter=max_iter, sample_ids=sample_ids, layer_index=i,
        )
        s = np.broadcast_to(np.atleast_1d(s), (n,))
        if cache is not None:
            cache.put_batch(sample_ids, i, np.broadcast_to(u, (n,) + tuple(layer.in_shape)), epoch)
        sigmas[:, i] = s * safety
        if cap is not None:
            sigmas[:, i] = np.minimum(sigmas[:, i], cap[i] * safety)
    lip = sigmas.prod(axis=1)
    if single:
        return float(lip[0]), sigmas[0], masks
    return lip, sigmas, masks


def local_lipschitz_oracle(net, masks, index=0):
    """Exact product of masked spectral norms for one sample of a batch of masks."""
    sig = []
    for i, layer in enumerate(net.layers):
        mi, mo = masks.operator_masks(i, len(net.layers))
        sig.append(spectral.spectral_norm_oracle(spectral.masked_matrix(
            layer, None if mi is None else mi[index], None if mo is None else mo[index])))
    return float(np.prod(sig)), sig

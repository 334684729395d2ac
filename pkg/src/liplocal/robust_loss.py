"""Worst-case logits, sparsity penalties and the mixed training objective."""

import math
from dataclasses import dataclass

import numpy as np

from liplocal import autodiff as ad
from liplocal import network
from liplocal.errors import ContractError

SQRT2 = math.sqrt(2.0)


@dataclass
class WorstLogits:
    """``worst`` has K entries, or K + 1 with the appended abstain class (gloro)."""

    logits: object
    worst: object
    labels: np.ndarray
    gloro: bool = False

    @property
    def margin(self):
        """True-class logit minus the largest competing worst-case entry, per sample."""
        w = ad.value_of(self.worst)
        y = self.labels
        true = np.take_along_axis(w, y[:, None], 1)[:, 0]
        if self.gloro:
            return true - w[:, -1]
        other = w.copy()
        np.put_along_axis(other, y[:, None], -np.inf, 1)
        return true - other.max(axis=1)

    @property
    def certified(self):
        return self.margin > 0


def _batch_labels(logits, y):
    lv = ad.value_of(logits)
    single = lv.ndim == 1
    if single:
        logits = ad.reshape(logits, (1,) + lv.shape)
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    return logits, y, single


def _onehot(y, k):
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def worst_logits_simple(logits, y, eps, lip):
    """Add sqrt(2) * eps * L to every non-true logit."""
    if eps < 0 or np.any(ad.value_of(lip) < 0):
        raise ContractError("eps and the Lipschitz bound must be non-negative")
    logits, y, _ = _batch_labels(logits, y)
    k = ad.value_of(logits).shape[1]
    lip = ad.reshape(lip, (-1, 1)) if np.ndim(ad.value_of(lip)) else lip
    bump = ad.mul(ad.mul(lip, SQRT2 * eps), 1.0 - _onehot(y, k))
    return WorstLogits(logits, ad.add(logits, bump), y)


def _penultimate(bounds, x=None):
    """Box (m, r), ball centre and radius of the activations feeding the last layer."""
    if len(bounds) == 1:
        if x is None:
            raise ContractError("single-layer network needs the input for its penultimate box")
        xv = ad.value_of(x)
        return xv, np.full(xv.shape, bounds.eps), xv, bounds.eps
    lo, hi = bounds.post_lb[-2], bounds.post_ub[-2]
    m = ad.mul(ad.add(lo, hi), 0.5)
    r = ad.mul(ad.sub(hi, lo), 0.5)
    rho = bounds.rho[-2] if bounds.rho is not None else None
    return m, r, bounds.clean_post[-2], rho


def worst_logits_bcp(bounds, last_layer, logits, y, rho=None, params=None, x=None):
    """Worst logits from the box and ball around the penultimate activations.

    For each class i the true-minus-i logit gap is lower-bounded separately
    over the box and over the ball; the larger of the two is sound for their
    intersection. ``rho`` overrides the ball radius stored in ``bounds``
    (e.g. eps times a local Lipschitz bound of the hidden layers).
    """
    logits, y, _ = _batch_labels(logits, y)
    p = network.layer_params(last_layer, params)
    m, r, z, brho = _penultimate(bounds, x)
    if rho is None:
        rho = brho
    if rho is None:
        raise ContractError("BCP worst logits need ball information (run bcp_forward or pass rho)")
    n = ad.value_of(logits).shape[0]
    flat = (n, -1)
    m, r, z = ad.reshape(m, flat), ad.reshape(r, flat), ad.reshape(z, flat)
    w, b = p["weight"], p["bias"]
    k, f = ad.value_of(w).shape
    wy = ad.reshape(ad.take(w, y, axis=0), (n, 1, f))
    c = ad.sub(wy, ad.reshape(w, (1, k, f)))  # (n, k, f): W_y - W_i
    db = ad.sub(ad.reshape(ad.take(b, y, axis=0), (n, 1)), ad.reshape(b, (1, k)))
    cm = ad.sum(ad.mul(c, ad.reshape(m, (n, 1, f))), axis=2)
    cr = ad.sum(ad.mul(ad.absolute(c), ad.reshape(r, (n, 1, f))), axis=2)
    cz = ad.sum(ad.mul(c, ad.reshape(z, (n, 1, f))), axis=2)
    rho = ad.reshape(rho, (-1, 1)) if np.ndim(ad.value_of(rho)) else rho
    box_min = ad.add(ad.sub(cm, cr), db)
    ball_min = ad.add(ad.sub(cz, ad.mul(ad.l2norm(c, axis=2), rho)), db)
    gap = ad.maximum(box_min, ball_min)
    true = ad.take_along(logits, y[:, None], axis=1)
    return WorstLogits(logits, ad.sub(true, gap), y)


def worst_logits_gloro(logits, y, eps=None, lip=None, base=None):
    """Logits with an extra abstain entry equal to the largest competing worst logit.

    ``base`` is a precomputed :class:`WorstLogits` (simple or BCP); otherwise
    the simple rule with ``eps`` and ``lip`` is used.
    """
    if base is None:
        base = worst_logits_simple(logits, y, eps, lip)
    y = base.labels
    k = ad.value_of(base.worst).shape[1]
    masked = ad.add(base.worst, -1e30 * _onehot(y, k))
    extra = ad.reshape(ad.amax(masked, axis=1), (-1, 1))
    return WorstLogits(base.logits, ad.concat([base.logits, extra], axis=1), y, gloro=True)


def sparsity_terms(bounds, net, lambda_theta=1.0, params=None):
    """Per-sample sparsity hinge summed over every hidden neuron."""
    total = 0.0
    for i, layer in enumerate(net.layers[:-1]):
        p = network.layer_params(layer, params.get(i) if params else None)
        lb, ub = bounds.lb[i], bounds.ub[i]
        n = ad.value_of(lb).shape[0]
        act = layer.activation
        if act in ("relu", "relu_theta"):
            term = ad.relu(ub)
            if act == "relu_theta":
                term = ad.add(term, ad.mul(ad.relu(ad.sub(p["theta"], lb)), lambda_theta))
        elif act == "clipped_maxmin":
            even, odd = (slice(None), slice(0, None, 2)), (slice(None), slice(1, None, 2))
            ub_min = ad.minimum(ad.getitem(ub, even), ad.getitem(ub, odd))
            lb_max = ad.maximum(ad.getitem(lb, even), ad.getitem(lb, odd))
            term = ad.add(ad.relu(ad.sub(ub_min, p["b"])), ad.mul(ad.relu(ad.sub(p["a"], lb_max)), lambda_theta))
        else:
            continue
        total = ad.add(total, ad.sum(ad.reshape(term, (n, -1)), axis=1))
    return total


def sparsity_loss(bounds, net, lambda_theta=1.0, params=None):
    """Sparsity hinge summed over all hidden neurons and all samples."""
    terms = sparsity_terms(bounds, net, lambda_theta, params)
    return ad.sum(terms) if isinstance(terms, ad.Var) else float(np.sum(terms))


def total_loss(logits, worst, y, lam=0.0, lambda_sparse=0.0, sparsity=None):
    """Batch mean of (1 - lam) CE(logits) + lam CE(worst) + lambda_sparse * sparsity."""
    if not 0.0 <= lam <= 1.0 or lambda_sparse < 0:
        raise ContractError("need 0 <= lambda <= 1 and lambda_sparse >= 0")
    logits, y, _ = _batch_labels(logits, y)
    loss = ad.mul(ad.mean(ad.cross_entropy(logits, y)), 1.0 - lam)
    if lam > 0:
        w = worst.worst if isinstance(worst, WorstLogits) else worst
        loss = ad.add(loss, ad.mul(ad.mean(ad.cross_entropy(w, y)), lam))
    if lambda_sparse > 0 and sparsity is not None:
        loss = ad.add(loss, ad.mul(ad.mean(sparsity), lambda_sparse))
    return loss

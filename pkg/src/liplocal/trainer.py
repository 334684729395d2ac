"""Certifiably robust training with local Lipschitz worst-case logits."""

import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from liplocal import autodiff as ad
from liplocal import network
from liplocal import spectral
from liplocal.bounds import bcp_forward, ibp_forward
from liplocal.errors import ContractError
from liplocal.lipschitz import compute_masks
from liplocal.robust_loss import (
    sparsity_terms,
    total_loss,
    worst_logits_bcp,
    worst_logits_gloro,
    worst_logits_simple,
)

log = logging.getLogger(__name__)

LOSS_MODES = ("simple", "bcp", "gloro", "gloro+bcp")
GLOBAL_ID = 2**31 - 1


@dataclass
class TrainConfig:
    eps_target: float = 0.1
    epochs: int = 10
    lr_decay_epoch: int = 5
    eps_sched_epochs: int = 5
    lambda_sched_epochs: int = None
    initial_lr: float = 1e-3
    end_lr: float = 1e-5
    batch_size: int = 64
    power_iters: int = 2
    lambda_sparse: float = 0.0
    lambda_theta: float = 0.0
    theta_init: float = 1.0
    loss_mode: str = "bcp"
    u_cache: str = "saved"
    bound: str = "local"
    warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lambda_sched_epochs is None:
            self.lambda_sched_epochs = self.eps_sched_epochs
        self.validate()

    def validate(self):
        if not 0 < self.end_lr <= self.initial_lr:
            raise ContractError("need 0 < end_lr <= initial_lr")
        if not 1 <= self.epochs:
            raise ContractError("epochs must be positive")
        if self.lr_decay_epoch > self.epochs or self.eps_sched_epochs > self.epochs:
            raise ContractError("schedule epochs must not exceed the total epoch count")
        if self.power_iters < 1:
            raise ContractError("power_iters must be >= 1")
        if self.eps_target < 0 or self.lambda_sparse < 0 or self.lambda_theta < 0:
            raise ContractError("eps_target, lambda_sparse and lambda_theta must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ContractError(f"loss_mode must be one of {LOSS_MODES}")
        if self.u_cache not in ("saved", "random"):
            raise ContractError("u_cache must be 'saved' or 'random'")
        if self.bound not in ("local", "global"):
            raise ContractError("bound must be 'local' or 'global'")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


# schedules; epochs count from 1, warm-up epochs come first


def lr_schedule(t, cfg):
    """Constant up to the decay epoch, then exponential decay to ``end_lr`` at the last epoch."""
    m, total = cfg.lr_decay_epoch, cfg.epochs
    if t <= m or total == m:
        return cfg.initial_lr
    return cfg.initial_lr * (cfg.end_lr / cfg.initial_lr) ** ((t - m) / (total - m))


def eps_schedule(t, cfg):
    t = t - cfg.warmup_epochs
    n = cfg.eps_sched_epochs
    if t <= 0:
        return 0.0
    if t <= n:
        return t / n * cfg.eps_target
    return cfg.eps_target


def lambda_schedule(t, cfg):
    t = t - cfg.warmup_epochs
    n = cfg.lambda_sched_epochs
    if t <= 0:
        return 0.0
    if n <= 0:
        return 1.0
    return min(t / n, 1.0)


# Adam


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update of a dict of arrays; returns (params, state).

    Keys ending in ``theta`` are clamped to ``THETA_MIN`` afterwards.
    """
    t = state.get("t", 0) + 1
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m[k] = beta1 * m.get(k, np.zeros_like(p)) + (1 - beta1) * g
        v[k] = beta2 * v.get(k, np.zeros_like(p)) + (1 - beta2) * g * g
        mhat = m[k] / (1 - beta1**t)
        vhat = v[k] / (1 - beta2**t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
        if str(k[-1] if isinstance(k, tuple) else k).endswith("theta"):
            p = np.maximum(p, network.THETA_MIN)
        out[k] = p
    state["t"] = t
    return out, state


@dataclass
class TrainState:
    cfg: TrainConfig
    cache: spectral.PowerIterCache = field(default_factory=spectral.PowerIterCache)
    adam: dict = field(default_factory=dict)
    global_u: dict = field(default_factory=dict)
    epoch: int = 0


def _flat_params(net):
    return {(i, k): v for i, layer in enumerate(net.layers) for k, v in layer.params().items()}


def _apply_params(net, flat):
    for (i, k), v in flat.items():
        setattr(net.layers[i], k, v)
    for layer in net.layers:
        if layer.activation == "clipped_maxmin":
            layer.b = np.minimum(layer.b, layer.a - network.THETA_MIN)


def _global_sigmas(net, leaves, state, n_iter):
    """Differentiable global spectral norms, warm-started from the previous step."""
    out = []
    for i, layer in enumerate(net.layers):
        u0 = state.global_u.get(i)
        if u0 is None:
            u0 = spectral.default_u0(layer.in_shape, [GLOBAL_ID], i)
        _, u, v = spectral.masked_spectral_norm(layer, u0=u0, n_iter=n_iter, sample_ids=[GLOBAL_ID], layer_index=i)
        u = np.reshape(u, (1,) + tuple(layer.in_shape))
        v = np.reshape(v, (1,) + tuple(layer.out_shape))
        state.global_u[i] = u
        out.append(ad.reshape(ad.masked_sigma(layer, leaves[i]["weight"], u, v), ()))
    return out


def batch_objective(net, x, y, ids, eps, lam, state, rng=None, freeze=None):
    """Record the full training loss for one batch on the tape.

    Returns ``(loss, leaves, info)``; ``leaves`` maps layer -> {name: Var}.
    ``freeze`` may carry precomputed ``masks`` and power-iteration vectors
    (``u``/``v`` per layer) so the loss becomes a smooth function of the
    parameters, which is what finite-difference checks need.
    """
    cfg = state.cfg
    leaves = {i: {k: ad.leaf(v, name=f"{i}.{k}") for k, v in layer.params().items()}
              for i, layer in enumerate(net.layers)}
    logits = network.forward(net, x, leaves)
    info = {"eps": eps, "lambda": lam}
    need_bounds = eps > 0 and (lam > 0 or cfg.lambda_sparse > 0)
    worst, sparsity = None, None
    if need_bounds:
        bcp = "bcp" in cfg.loss_mode
        gsig = None
        if bcp or cfg.bound == "global":
            if freeze is not None and "global" in freeze:
                gsig = [ad.reshape(ad.masked_sigma(l, leaves[i]["weight"], *freeze["global"][i]), ())
                        for i, l in enumerate(net.layers)]
            else:
                gsig = _global_sigmas(net, leaves, state, cfg.power_iters)
        bounds = bcp_forward(net, x, eps, sigmas=gsig, params=leaves) if bcp else ibp_forward(net, x, eps, leaves)
        masks = freeze["masks"] if freeze is not None else compute_masks(bounds.values(), net)
        n = len(y)
        if cfg.bound == "local":
            sig = []
            for i, layer in enumerate(net.layers):
                mi, mo = masks.operator_masks(i, len(net.layers))
                if freeze is not None:
                    u, v = freeze["local"][i]
                else:
                    if cfg.u_cache == "saved":
                        u0 = state.cache.get_batch(ids, i, layer.in_shape)
                    else:
                        u0 = rng.standard_normal((n,) + tuple(layer.in_shape))
                    _, u, v = spectral.masked_spectral_norm(layer, mi, mo, u0=u0, n_iter=cfg.power_iters,
                                                            sample_ids=ids, layer_index=i)
                    if cfg.u_cache == "saved":
                        state.cache.put_batch(ids, i, u, state.epoch)
                sig.append(ad.masked_sigma(layer, leaves[i]["weight"], u, v, mi, mo))
        else:
            sig = gsig
        lip = ad.prod(sig)
        info["L"] = ad.value_of(lip)
        info["varying"] = [m.varying_fraction() for m in masks]
        if cfg.loss_mode in ("simple", "gloro"):
            worst = worst_logits_simple(logits, y, eps, lip)
        else:
            rho = ad.mul(ad.prod(sig[:-1]), eps) if len(sig) > 1 else eps
            worst = worst_logits_bcp(bounds, net.layers[-1], logits, y, rho=rho,
                                     params=leaves[len(net.layers) - 1], x=x)
        if cfg.loss_mode.startswith("gloro"):
            worst = worst_logits_gloro(logits, y, base=worst)
        if cfg.lambda_sparse > 0:
            sparsity = sparsity_terms(bounds, net, cfg.lambda_theta, leaves)
    loss = total_loss(logits, worst, y, lam if worst is not None else 0.0, cfg.lambda_sparse, sparsity)
    info["clean_loss"] = float(np.mean(ad.cross_entropy(ad.value_of(logits), y)))
    info["robust_loss"] = float(np.mean(ad.cross_entropy(ad.value_of(worst.worst), y))) if worst else math.nan
    info["sparsity_loss"] = float(np.mean(ad.value_of(sparsity))) if sparsity is not None else 0.0
    return loss, leaves, info


def freeze_linearization(net, x, y, ids, eps, state, tol=1e-12):
    """Masks and converged power-iteration vectors for :func:`batch_objective`'s ``freeze``.

    With these held fixed the loss is smooth in the parameters away from
    activation kinks, so it can be compared against finite differences.
    """
    cfg = state.cfg
    n = len(y)
    glob, gsig = {}, []
    for i, layer in enumerate(net.layers):
        s, u, v = spectral.masked_spectral_norm(layer, tol=tol, sample_ids=[GLOBAL_ID], layer_index=i)
        glob[i] = (np.reshape(u, (1,) + tuple(layer.in_shape)), np.reshape(v, (1,) + tuple(layer.out_shape)))
        gsig.append(s)
    bcp = "bcp" in cfg.loss_mode
    bounds = bcp_forward(net, x, eps, sigmas=gsig) if bcp else ibp_forward(net, x, eps)
    masks = compute_masks(bounds, net)
    local = {}
    for i, layer in enumerate(net.layers):
        mi, mo = masks.operator_masks(i, len(net.layers))
        _, u, v = spectral.masked_spectral_norm(layer, mi, mo, tol=tol, sample_ids=ids, layer_index=i)
        local[i] = (np.reshape(u, (n,) + tuple(layer.in_shape)), np.reshape(v, (n,) + tuple(layer.out_shape)))
    return {"masks": masks, "global": glob, "local": local}


def train_step(net, x, y, ids, eps, lam, lr, state, rng):
    loss, leaves, info = batch_objective(net, x, y, ids, eps, lam, state, rng)
    if not np.isfinite(loss.value):
        raise FloatingPointError(f"non-finite loss {loss.value} at epoch {state.epoch} (eps={eps}, lambda={lam})")
    grads = ad.backward(loss)
    flat = _flat_params(net)
    g = {(i, k): grads.get(leaves[i][k]) for i in leaves for k in leaves[i]}
    new, state.adam = adam_step(flat, g, state.adam, lr)
    _apply_params(net, new)
    info["loss"] = float(loss.value)
    return info


def train_epoch(net, data, cfg, cache=None, epoch=1, state=None):
    """Run one epoch; returns ``(net, stats)``. ``net`` is updated in place."""
    if state is None:
        state = TrainState(cfg, cache if cache is not None else spectral.PowerIterCache())
    state.epoch = epoch
    x, y, ids = data.x, data.y, data.ids
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(y))
    lr, eps, lam = lr_schedule(epoch, cfg), eps_schedule(epoch, cfg), lambda_schedule(epoch, cfg)
    acc = {"clean_loss": [], "robust_loss": [], "sparsity_loss": [], "L": [], "varying": []}
    weights = []
    t0 = time.perf_counter()
    for start in range(0, len(order), cfg.batch_size):
        b = order[start : start + cfg.batch_size]
        info = train_step(net, x[b], y[b], ids[b], eps, lam, lr, state, rng)
        weights.append(len(b))
        for k in ("clean_loss", "robust_loss", "sparsity_loss"):
            acc[k].append(info[k])
        if "L" in info:
            acc["L"].append(np.asarray(info["L"]).reshape(-1))
            acc["varying"].append(np.stack([np.asarray(v) for v in info["varying"]], axis=1))
    from liplocal.lipschitz import global_lipschitz

    l_glob, _ = global_lipschitz(net, tol=1e-6)
    w = np.asarray(weights, float)
    stats = {
        "epoch": epoch, "lr": lr, "eps": eps, "lambda": lam,
        "clean_loss": float(np.average(acc["clean_loss"], weights=w)),
        "robust_loss": float(np.average(acc["robust_loss"], weights=w)) if acc["L"] else math.nan,
        "sparsity_loss": float(np.average(acc["sparsity_loss"], weights=w)),
        "mean_L_local": float(np.mean(np.concatenate(acc["L"]))) if acc["L"] else math.nan,
        "L_glob": l_glob,
        "varying_frac": (np.concatenate(acc["varying"]).mean(axis=0).tolist() if acc["varying"]
                         else [math.nan] * (len(net.layers) - 1)),
        "seconds": time.perf_counter() - t0,
    }
    log.info("epoch %d lr=%.3g eps=%.4g lambda=%.3g clean=%.4f robust=%.4f L_local=%.4g L_glob=%.4g",
             epoch, lr, eps, lam, stats["clean_loss"], stats["robust_loss"], stats["mean_L_local"], l_glob)
    return net, stats


METRIC_FIELDS = ("epoch", "lr", "eps", "lambda", "clean_loss", "robust_loss", "sparsity_loss",
                 "mean_L_local", "L_glob")


def format_metrics(stats):
    vals = [repr(stats[k]) if isinstance(stats[k], float) else str(stats[k]) for k in METRIC_FIELDS]
    vals += [repr(float(v)) for v in stats["varying_frac"]]
    return ", ".join(vals)


def metrics_header(n_hidden):
    return "# " + ", ".join(list(METRIC_FIELDS) + [f"varying_frac_layer_{i + 1}" for i in range(n_hidden)])


def train(net, data, cfg, metrics_path=None, state=None, on_epoch=None):
    """Train for ``cfg.epochs`` epochs (warm-up included); returns ``(net, history, state)``."""
    state = state or TrainState(cfg)
    history = []
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        if fh:
            fh.write(metrics_header(len(net.layers) - 1) + "\n")
        for epoch in range(1, cfg.epochs + 1):
            net, stats = train_epoch(net, data, cfg, epoch=epoch, state=state)
            history.append(stats)
            if fh:
                fh.write(format_metrics(stats) + "\n")
                fh.flush()
            if on_epoch is not None:
                on_epoch(net, stats)
    finally:
        if fh:
            fh.close()
    return net, history, state

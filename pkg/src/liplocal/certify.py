"""l2 PGD falsification and three-tier certification.

Tier 1 certifies with the global Lipschitz bound, tier 2 attacks what is
left with PGD, and tier 3 computes local bounds only for the survivors.
"""

import time
from dataclasses import dataclass

import numpy as np

from liplocal import autodiff as ad
from liplocal import network
from liplocal.bounds import bcp_forward, ibp_forward
from liplocal.errors import DomainError
from liplocal.lipschitz import global_lipschitz, local_lipschitz
from liplocal.robust_loss import worst_logits_bcp, worst_logits_gloro, worst_logits_simple

VERDICTS = ("certified_global", "certified_local", "falsified_pgd", "undecided")
MODES = ("simple", "bcp", "gloro", "gloro+bcp")
SAFETY = 1.0 + 1e-2


@dataclass
class CertResult:
    sample_id: int
    clean_correct: bool
    verdict: str
    margin: float
    L_glob: float = float("nan")
    L_local: float = float("nan")
    attack_iters: int = 0
    tiers_run: str = ""

    @property
    def certified(self):
        return self.verdict.startswith("certified")

    def record(self):
        return (f"{self.sample_id}, {self.verdict}, {self.margin!r}, {self.L_local!r}, {self.L_glob!r}, "
                f"{self.tiers_run}")


def _input_grad(net, x, y):
    xv = ad.leaf(x)
    loss = ad.sum(ad.cross_entropy(network.forward(net, xv), y))
    return ad.backward(loss).get(xv, np.zeros_like(x))


def _project(delta, eps):
    n = np.sqrt(np.sum(delta.reshape(len(delta), -1) ** 2, axis=1))
    scale = np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)
    return delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))


def pgd_batch(net, x, y, eps, steps=100, step_size=None, restarts=0, seed=0):
    """l2 PGD on a batch; returns ``(x_adv, found, iters)``.

    Each step moves by ``step_size`` (default eps / 4) along the normalised
    input gradient of the cross-entropy and projects back onto the ball. The
    first misclassifying iterate is kept. Restarts begin at a uniformly random
    point of the ball; the first run starts at ``x``.
    """
    if eps < 0:
        raise DomainError("eps must be non-negative")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.intp)
    step_size = eps / 4 if step_size is None else step_size
    adv = x.copy()
    found = np.zeros(len(y), bool)
    iters = np.zeros(len(y), int)
    rng = np.random.default_rng(seed)
    for run in range(restarts + 1):
        cur = x.copy()
        if run > 0:
            from liplocal.bounds import sample_l2_ball

            cur = np.stack([sample_l2_ball(xi, eps, 1, rng)[0] for xi in x])
        for it in range(steps + 1):
            pred = np.argmax(network.forward(net, cur), axis=1)
            hit = (pred != y) & ~found
            adv[hit] = cur[hit]
            iters[hit] = it
            found |= hit
            if it == steps or found.all() or eps == 0:
                break
            act = ~found
            g = _input_grad(net, cur[act], y[act])
            gn = np.sqrt(np.sum(g.reshape(len(g), -1) ** 2, axis=1))
            g = g / np.where(gn > 0, gn, 1.0).reshape((-1,) + (1,) * (g.ndim - 1))
            cur[act] = x[act] + _project(cur[act] + step_size * g - x[act], eps)
        iters[~found] = steps
    return adv, found, iters


def pgd_attack(net, x, y, eps, steps=100, step_size=None, restarts=0, seed=0):
    """Adversarial example inside the l2 ball, or ``None``."""
    adv, found, _ = pgd_batch(net, np.asarray(x)[None], [y], eps, steps, step_size, restarts, seed)
    return adv[0] if found[0] else None


def worst_logits(mode, net, x, logits, y, eps, sigmas, bounds=None):
    """Worst logits for certification from per-layer (per-sample) norms.

    ``sigmas`` is (n_layers,) or (N, n_layers).
    """
    sig = np.asarray(sigmas, dtype=float)
    lip = sig.prod(axis=-1)
    if mode in ("simple", "gloro"):
        base = worst_logits_simple(logits, y, eps, lip)
    else:
        if bounds is None:
            bounds = bcp_forward(net, x, eps, sigmas=list(np.atleast_2d(sig).max(axis=0)))
        rho = eps * sig[..., :-1].prod(axis=-1)
        base = worst_logits_bcp(bounds, net.layers[-1], logits, y, rho=rho, x=x)
    return worst_logits_gloro(logits, y, base=base) if mode.startswith("gloro") else base


def certify_batch(net, x, y, eps, mode="simple", tiers=("global", "pgd", "local"), ids=None,
                  glob=None, safety=SAFETY, tol=1e-3, pgd_steps=100, pgd_restarts=0, seed=0, bounds_mode=None):
    """Run the tier pipeline on a batch; returns (results, per-tier seconds)."""
    if eps < 0:
        raise DomainError("eps must be non-negative")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.intp)
    n = len(y)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    if glob is None:
        _, glob = global_lipschitz(net, tol=1e-6)
    gsig = np.asarray(glob) * safety
    l_glob = float(gsig.prod())
    logits = network.forward(net, x)
    correct = np.argmax(logits, axis=1) == y
    verdict = np.where(correct, "undecided", "falsified_pgd").astype(object)
    margin = np.full(n, np.nan)
    l_local = np.full(n, np.nan)
    iters = np.zeros(n, int)
    ran = [[] for _ in range(n)]
    seconds = {"global": 0.0, "pgd": 0.0, "local": 0.0}
    bcp_bounds = None

    if "global" in tiers:
        t0 = time.perf_counter()
        if "bcp" in mode:
            bcp_bounds = bcp_forward(net, x, eps, sigmas=list(gsig))
        w = worst_logits(mode, net, x, logits, y, eps, gsig, bcp_bounds)
        margin = w.margin
        ok = correct & w.certified
        verdict[ok] = "certified_global"
        for i in range(n):
            ran[i].append("global")
        seconds["global"] = time.perf_counter() - t0

    if "pgd" in tiers:
        t0 = time.perf_counter()
        todo = np.flatnonzero(verdict == "undecided")
        if len(todo):
            _, found, it = pgd_batch(net, x[todo], y[todo], eps, pgd_steps, restarts=pgd_restarts, seed=seed)
            verdict[todo[found]] = "falsified_pgd"
            iters[todo] = it
            for i in todo:
                ran[i].append("pgd")
        seconds["pgd"] = time.perf_counter() - t0

    if "local" in tiers:
        t0 = time.perf_counter()
        todo = np.flatnonzero(verdict == "undecided")
        if len(todo):
            xs = x[todo]
            bm = bounds_mode or "bcp"
            if bm == "bcp":
                bounds = bcp_forward(net, xs, eps, sigmas=list(gsig))
            else:
                bounds = ibp_forward(net, xs, eps)
            _, sig, _ = local_lipschitz(net, xs, eps, bounds=bounds, sample_ids=ids[todo], tol=tol,
                                        safety=safety, cap=np.asarray(glob))
            w = worst_logits(mode, net, xs, logits[todo], y[todo], eps, sig,
                             bounds if bm == "bcp" else None)
            l_local[todo] = sig.prod(axis=1)
            margin[todo] = w.margin
            verdict[todo[w.certified]] = "certified_local"
            for i in todo:
                ran[i].append("local")
        seconds["local"] = time.perf_counter() - t0

    results = [
        CertResult(int(ids[i]), bool(correct[i]), str(verdict[i]), float(margin[i]), l_glob, float(l_local[i]),
                   int(iters[i]), "+".join(ran[i]) or "none")
        for i in range(n)
    ]
    return results, seconds


def certify_sample(net, x, y, eps, mode="simple", tiers=("global", "pgd", "local"), sample_id=0, **kw):
    res, _ = certify_batch(net, np.asarray(x)[None], [y], eps, mode, tiers, ids=[sample_id], **kw)
    return res[0]


def summarize(results, seconds=None):
    n = len(results)
    count = {v: sum(r.verdict == v for r in results) for v in VERDICTS}
    clean = sum(r.clean_correct for r in results)
    tier3 = sum("local" in r.tiers_run for r in results)
    return {
        "n": n,
        "clean_acc": clean / n,
        "pgd_acc": (n - count["falsified_pgd"]) / n,
        "certified_global_acc": count["certified_global"] / n,
        "certified_acc": (count["certified_global"] + count["certified_local"]) / n,
        "frac_certified_global": count["certified_global"] / n,
        "frac_falsified": count["falsified_pgd"] / n,
        "frac_tier3": tier3 / n,
        "frac_certified_local": count["certified_local"] / n,
        "frac_undecided": count["undecided"] / n,
        "seconds": dict(seconds or {}),
    }


def evaluate_dataset(net, data, eps, mode="simple", tiers=("global", "pgd", "local"), batch_size=256,
                     pool=None, records_path=None, **kw):
    """Certify every sample of ``data``; returns ``(summary, results)``.

    ``pool`` is an optional executor owned by the caller; batches are mapped
    over it and merged in input order.
    """
    _, glob = global_lipschitz(net, tol=1e-6)
    chunks = [np.arange(i, min(i + batch_size, len(data))) for i in range(0, len(data), batch_size)]

    def run(idx):
        return certify_batch(net, data.x[idx], data.y[idx], eps, mode, tiers, ids=data.ids[idx], glob=glob, **kw)

    parts = list(pool.map(run, chunks)) if pool is not None else [run(c) for c in chunks]
    results = [r for part, _ in parts for r in part]
    seconds = {k: sum(s[k] for _, s in parts) for k in ("global", "pgd", "local")}
    if records_path:
        with open(records_path, "w") as f:
            f.write("# id, verdict, margin, L_local, L_glob, tiers_run\n")
            for r in results:
                f.write(r.record() + "\n")
    return summarize(results, seconds), results

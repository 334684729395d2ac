"""Command-line entry point: train, certify, attack, eval and the toy walkthrough.

Exit codes: 0 success, 1 verification failure or runtime error, 2 usage error.
Every flag can also be given as an environment variable ``LIPLOCAL_<FLAG>``
(upper case, dashes as underscores); explicit flags win.
"""

import argparse
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from liplocal import io_formats, network
from liplocal.bounds import ibp_forward
from liplocal.certify import MODES, evaluate_dataset, pgd_batch
from liplocal.errors import ContractError, FormatError, ParseError, ShapeError
from liplocal.lipschitz import compute_masks, global_lipschitz, global_lipschitz_oracle, local_lipschitz
from liplocal.trainer import train

ENV_PREFIX = "LIPLOCAL_"
TIERS = ("global", "pgd", "local")


class UsageError(Exception):
    pass


def _eps(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v >= 0 or math.isinf(v):
        raise argparse.ArgumentTypeError(f"eps must be a finite non-negative number, got {text}")
    return v


def _tiers(text):
    tiers = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [t for t in tiers if t not in TIERS]
    if bad or not tiers:
        raise argparse.ArgumentTypeError(f"tiers must be a comma list drawn from {','.join(TIERS)}")
    return tiers


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _data_flags(p):
    p.add_argument("--model", required=True, help="model file written by `train`")
    p.add_argument("--data", required=True, help="IDX image file, cifar10:<path> or synth:<kind>:<n>[:<seed>]")
    p.add_argument("--labels", help="IDX label file matching --data")
    p.add_argument("--limit", type=_positive, help="use only the first N samples")
    p.add_argument("--eps", type=_eps, required=True, help="l2 radius")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive, default=os.cpu_count() or 1)
    p.add_argument("--records", help="write one line per sample to this path")


def build_parser():
    parser = argparse.ArgumentParser(prog="liplocal", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a run configuration")
    p.add_argument("--config", required=True, help="run configuration (key = value lines)")
    p.add_argument("--seed", type=int, help="override the config seed")

    for name, help_text in (("certify", "three-tier certification"), ("eval", "certify with tiers global,pgd")):
        p = sub.add_parser(name, help=help_text)
        _data_flags(p)
        p.add_argument("--mode", choices=MODES, default="simple", help="worst-logit rule")
        if name == "certify":
            p.add_argument("--tiers", type=_tiers, default=TIERS)
        p.add_argument("--pgd-steps", type=_positive, default=100)
        p.add_argument("--restarts", type=int, default=0)
        p.add_argument("--tol", type=float, default=1e-3, help="power-iteration tolerance for the local tier")

    p = sub.add_parser("attack", help="l2 PGD attack only")
    _data_flags(p)
    p.add_argument("--steps", type=_positive, default=100)
    p.add_argument("--restarts", type=int, default=0)

    sub.add_parser("toy", help="print and verify the three-neuron walkthrough")
    return parser


def _apply_env(parser, environ):
    """Turn ``LIPLOCAL_*`` variables into defaults on every subparser."""
    subs = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    for sp in [parser] + [c for s in subs for c in s.choices.values()]:
        for action in sp._actions:
            if not action.option_strings or action.dest in ("help", "command"):
                continue
            raw = environ.get(ENV_PREFIX + action.dest.upper())
            if raw is None:
                continue
            if action.nargs == 0:
                action.default = raw.lower() not in ("", "0", "false", "no")
            else:
                try:
                    action.default = action.type(raw) if action.type else raw
                except (argparse.ArgumentTypeError, ValueError) as e:
                    sp.error(f"{ENV_PREFIX}{action.dest.upper()}: {e}")
            action.required = False


# toy walkthrough


def toy_walkthrough(out=print):
    """Print the three-neuron example and return the list of mismatching quantities."""
    net = network.make_toy_network()
    x, eps = np.array([1.0, -1.0, 0.0]), 0.1
    bad = []

    def check(name, got, want, rtol=1e-9, atol=1e-9):
        ok = np.allclose(got, want, rtol=rtol, atol=atol)
        if not ok:
            bad.append(f"{name}: got {np.round(got, 12).tolist()}, expected {np.asarray(want).tolist()}")
        return ok

    out(f"network: W1 = W2 = diag(3,2,1), W3 = [1,1,1], ReLU-theta with theta = 1; x = {x.tolist()}, eps = {eps}")
    y = network.forward(net, x)
    out(f"F(x) = {float(y[0]):.6f}")
    check("F(x)", y, [1.0])

    b = ibp_forward(net, x, eps)
    want_pre = [np.array([[2.7, 3.3], [-2.2, -1.8], [-0.1, 0.1]]), np.array([[3.0, 3.0], [0.0, 0.0], [0.0, 0.1]])]
    for i in range(2):
        lo, hi = b.lb[i][0], b.ub[i][0]
        out(f"layer {i + 1} pre-activation intervals: " + ", ".join(f"[{l:.6g}, {h:.6g}]" for l, h in zip(lo, hi)))
        check(f"layer {i + 1} intervals", np.stack([lo, hi], 1), want_pre[i])

    masks = compute_masks(b, net)
    want = {"I_C": [0, 1, 0], "I_theta": [1, 0, 0], "I_V": [0, 0, 1]}
    for i, m in enumerate(masks):
        got = {"I_C": m.constant_zero[0], "I_theta": m.constant_theta[0], "I_V": m.varying[0]}
        for k, v in got.items():
            out(f"layer {i + 1} {k} = diag({', '.join(str(int(t)) for t in v)})")
            check(f"layer {i + 1} {k}", v, want[k])

    exact = 9 * math.sqrt(3)
    l_oracle, _ = global_lipschitz_oracle(net)
    l_power, _ = global_lipschitz(net, tol=1e-6)
    out(f"global bound (exact SVD)      = {l_oracle:.9f}   (9 sqrt 3 = {exact:.9f})")
    out(f"global bound (power iteration) = {l_power:.9f}")
    check("global bound (oracle)", l_oracle, exact)
    check("global bound (power iteration)", l_power, exact, rtol=1e-3)

    l_local, sig, _ = local_lipschitz(net, x, eps, masks=masks, tol=1e-9)
    out(f"local factors = {', '.join(f'{s:.6f}' for s in sig)}")
    out(f"local bound = {l_local:.6f}")
    check("local bound", l_local, 1.0)
    return bad


# commands


def _load_data(args):
    try:
        return io_formats.load_dataset(args.data, args.labels, args.limit)
    except (ContractError, OSError) as e:
        raise UsageError(str(e)) from None


def cmd_toy(args):
    t0 = time.perf_counter()
    bad = toy_walkthrough()
    print(f"elapsed {time.perf_counter() - t0:.3f} s")
    if bad:
        print("MISMATCH:\n  " + "\n  ".join(bad))
        return 1
    print("all values match")
    return 0


def cmd_train(args):
    try:
        run = io_formats.load_run_config(args.config)
    except OSError as e:
        raise UsageError(f"cannot read config: {e}") from None
    if args.seed is not None:
        run["seed"] = args.seed
    cfg = io_formats.train_config_from(run)
    data = io_formats.load_dataset(run["data"], run.get("labels"), run.get("n_samples"))
    n_classes = int(data.y.max()) + 1
    net = network.parse_architecture(run["arch"], data.input_shape, n_classes,
                                     activation=run.get("activation", "relu_theta"),
                                     theta_init=cfg.theta_init, seed=cfg.seed)
    print(f"training {network.render(net)} on {len(data)} samples for {cfg.epochs} epochs")

    def report(_, s):
        print(f"epoch {s['epoch']}: lr={s['lr']:.3g} eps={s['eps']:.4g} loss={s['clean_loss']:.4f} "
              f"L_local={s['mean_L_local']:.4g} L_glob={s['L_glob']:.4g}")

    net, _, state = train(net, data, cfg, metrics_path=run.get("metrics_out"), on_epoch=report)
    net.eps_trained = cfg.eps_target
    io_formats.save_model(run["model_out"], net)
    if run.get("cache_out"):
        state.cache.save(run["cache_out"])
    print(f"model written to {run['model_out']}")
    return 0


def _certify(args, tiers):
    net = io_formats.load_model(args.model)
    data = _load_data(args)
    if data.input_shape != tuple(net.input_shape):
        raise UsageError(f"data shape {data.input_shape} does not match model input {tuple(net.input_shape)}")
    with ThreadPoolExecutor(args.threads) as pool:
        summary, _ = evaluate_dataset(net, data, args.eps, mode=args.mode, tiers=tiers, pool=pool,
                                            records_path=args.records, tol=args.tol, pgd_steps=args.pgd_steps,
                                            pgd_restarts=args.restarts, seed=args.seed)
    print(f"samples                {summary['n']}")
    for k in ("clean_acc", "pgd_acc", "certified_global_acc", "certified_acc"):
        print(f"{k:<22} {summary[k]:.4f}")
    for k in ("frac_certified_global", "frac_falsified", "frac_tier3", "frac_certified_local", "frac_undecided"):
        print(f"{k:<22} {summary[k]:.4f}")
    for k, v in summary["seconds"].items():
        print(f"seconds_{k:<14} {v:.3f}")
    ordered = summary["clean_acc"] >= summary["pgd_acc"] >= summary["certified_acc"]
    if not ordered:
        print("VERIFICATION FAILURE: accuracies are out of order")
        return 1
    return 0


def cmd_certify(args):
    return _certify(args, args.tiers)


def cmd_eval(args):
    return _certify(args, ("global", "pgd"))


def cmd_attack(args):
    net = io_formats.load_model(args.model)
    data = _load_data(args)
    _, found, iters = pgd_batch(net, data.x, data.y, args.eps, args.steps, restarts=args.restarts, seed=args.seed)
    print(f"samples  {len(data)}")
    print(f"pgd_acc  {1 - found.mean():.4f}")
    if args.records:
        with open(args.records, "w") as f:
            f.write("# id, falsified, iterations\n")
            for i, ok, it in zip(data.ids, found, iters):
                f.write(f"{i}, {int(ok)}, {it}\n")
    return 0


COMMANDS = {"train": cmd_train, "certify": cmd_certify, "eval": cmd_eval, "attack": cmd_attack, "toy": cmd_toy}


def main(argv=None, environ=None):
    parser = build_parser()
    _apply_env(parser, os.environ if environ is None else environ)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stdout,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"liplocal {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (FormatError, ParseError, ContractError, ShapeError, OSError, FloatingPointError) as e:
        print(f"liplocal {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

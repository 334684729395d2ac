"""Interval and box-constrained bounds on a small random network, and the
activation masks they induce.

Shows how the varying fraction (and with it the local Lipschitz bound)
grows with the radius while staying below the global bound.
"""
import argparse

import numpy as np

from liplocal.bounds import bcp_forward, ibp_forward
from liplocal.lipschitz import compute_masks, global_lipschitz, local_lipschitz
from liplocal.network import parse_architecture

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--arch", default="C(4,3,1,1)-F(32)-F(32)-F(3)")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

net = parse_architecture(args.arch, (2, 8, 8), activation="relu_theta", seed=args.seed)
rng = np.random.default_rng(args.seed)
for layer in net.layers:
    layer.bias = 0.3 * rng.standard_normal(layer.bias.shape)
x = rng.standard_normal(net.input_shape)

l_glob, _ = global_lipschitz(net)
print(f"global bound {l_glob:.4f}")
print(f"{'eps':>6} {'ibp width':>10} {'bcp width':>10} {'varying':>8} {'L_local':>9}")
for eps in (0.0, 0.01, 0.05, 0.1, 0.5, 1.0):
    ib, bb = ibp_forward(net, x, eps), bcp_forward(net, x, eps)
    masks = compute_masks(bb, net)
    lip, _, _ = local_lipschitz(net, x, eps, bounds=bb, masks=masks, tol=1e-6)
    print(f"{eps:6.2f} {np.mean(ib.ub[-1] - ib.lb[-1]):10.4f} {np.mean(bb.ub[-1] - bb.lb[-1]):10.4f} "
          f"{np.mean([m.varying.mean() for m in masks]):8.3f} {float(lip):9.4f}")

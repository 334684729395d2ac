"""Train a small MLP on two Gaussian blobs with the local-bound robust loss
and print the per-epoch log.
"""
import argparse
import logging

from liplocal.io_formats import synth_dataset
from liplocal.network import parse_architecture
from liplocal.trainer import TrainConfig, train

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--eps", type=float, default=0.5)
parser.add_argument("--epochs", type=int, default=20)
parser.add_argument("--mode", default="bcp", choices=["simple", "bcp", "gloro", "gloro+bcp"])
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

data = synth_dataset("gaussian_blobs", 500, seed=0)
net = parse_architecture("F(32)-F(32)-F(2)", (2,), 2)
cfg = TrainConfig(eps_target=args.eps, epochs=args.epochs, lr_decay_epoch=args.epochs // 2,
                  eps_sched_epochs=args.epochs // 2, initial_lr=1e-2, end_lr=1e-3, batch_size=50,
                  loss_mode=args.mode, lambda_sparse=0.01, lambda_theta=0.1)
net, history, _ = train(net, data, cfg)
last = history[-1]
print(f"final: L_local {last['mean_L_local']:.3f} vs L_glob {last['L_glob']:.3f}")

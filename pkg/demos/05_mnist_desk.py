"""Desk-scale MNIST run: C(8,4,2,1)-F(64)-F(10) on 2000 training images at
eps = 0.3, then certification of 500 held-out images.

Uses the 5000-image MNIST subset shipped with mlxtend (a test extra),
written to IDX files so the normal loader is exercised. Takes about a minute.
"""
import argparse
import os
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "tests"))
from helpers import mnist_subset, split  # noqa: E402

from liplocal.certify import evaluate_dataset  # noqa: E402
from liplocal.network import parse_architecture  # noqa: E402
from liplocal.trainer import TrainConfig, train  # noqa: E402

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--epochs", type=int, default=30)
parser.add_argument("--mode", default="bcp")
args = parser.parse_args()

got = mnist_subset(tempfile.mkdtemp())
if got is None:
    sys.exit("mlxtend is not installed; pip install mlxtend")
train_set, test_set = split(got[0], 2000, 500)
cfg = TrainConfig(eps_target=0.3, epochs=args.epochs, lr_decay_epoch=args.epochs // 2,
                  eps_sched_epochs=args.epochs // 2, initial_lr=1e-3, end_lr=1e-4, batch_size=64,
                  loss_mode=args.mode, lambda_sparse=1e-3, lambda_theta=0.1)
net, _, _ = train(parse_architecture("C(8,4,2,1)-F(64)-F(10)", (1, 28, 28), 10), train_set, cfg,
                  on_epoch=lambda _, s: print(f"epoch {s['epoch']:2d} clean loss {s['clean_loss']:.3f} "
                                              f"L_local {s['mean_L_local']:.3g} L_glob {s['L_glob']:.3g}"))
summary, _ = evaluate_dataset(net, test_set, 0.3, args.mode)
for k in ("clean_acc", "pgd_acc", "certified_global_acc", "certified_acc", "frac_certified_local"):
    print(f"{k:<22} {summary[k]:.3f}")

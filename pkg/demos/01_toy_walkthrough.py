"""Three-neuron walkthrough: global bound 9*sqrt(3) versus local bound 1.

Every printed quantity is checked against its hand-derived value.
"""
import sys

from liplocal.cli import toy_walkthrough

if __name__ == "__main__":
    bad = toy_walkthrough()
    print("ok" if not bad else "mismatch: " + "; ".join(bad))
    sys.exit(1 if bad else 0)

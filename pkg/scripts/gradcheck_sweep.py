#!/usr/bin/env python3
"""Gradient-check sweep over cell types, output variants and finite-difference steps.

Prints the worst relative error per configuration. Errors should sit well
below 1e-4 for epsilon near 1e-5 and grow for coarse steps.
"""
import argparse

from lstm_postfilter import network as nn
from lstm_postfilter.cli import gradcheck


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--dims", type=nn.parse_dims, default=(2, 3, 2))
    ap.add_argument("--T", type=int, default=5)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7, 8, 9])
    args = ap.parse_args()

    print(f"{'cell':<6} {'variant':<8} {'epsilon':>8} {'seed':>5} {'worst':>10}  tensor")
    for kind in (nn.LSTM, nn.RNN):
        for literal in ((False, True) if kind == nn.LSTM else (False,)):
            for eps in (1e-3, 1e-5, 1e-7):
                for seed in args.seeds:
                    report = gradcheck(args.dims, seed, args.T, eps, kind, literal)
                    name, worst = max(report.items(), key=lambda kv: kv[1])
                    variant = "literal" if literal else "standard"
                    print(f"{kind:<6} {variant:<8} {eps:>8.0e} {seed:>5} {worst:>10.2e}  {name}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Plot test-accuracy traces and sigma-vs-eps sweeps written by `dpd`.

    scripts/plot.py traces out/np/trace.csv out/zcdp1/trace.csv -o acc.png
    scripts/plot.py sweep sweep.csv -o sigma.png
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def plot_traces(paths, out):
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in paths:
        df = pd.read_csv(p)
        ax.plot(df["epoch"], df["test_accuracy"], label=Path(p).parent.name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_sweep(path, out):
    df = pd.read_csv(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for col, label in [("sigma_ac", "AC"), ("sigma_zcdp", "zCDP")]:
        if df[col].notna().any():
            ax.plot(df["eps"], df[col], marker="o", label=label)
    ax.set_xlabel("epsilon")
    ax.set_ylabel("sigma")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="kind", required=True)
    t = sub.add_parser("traces")
    t.add_argument("csv", nargs="+")
    t.add_argument("-o", "--out", default="accuracy.png")
    s = sub.add_parser("sweep")
    s.add_argument("csv")
    s.add_argument("-o", "--out", default="sigma.png")
    args = ap.parse_args()
    if args.kind == "traces":
        plot_traces(args.csv, args.out)
    else:
        plot_sweep(args.csv, args.out)


if __name__ == "__main__":
    main()

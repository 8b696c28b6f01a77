"""Plot the sweep CSVs written by `latentlm experiment`.

Usage: python scripts/plot.py [OUT_DIR]

Reads convergence.csv, understanding.csv and icl.csv from OUT_DIR (default
"out") and writes a PNG next to each one that exists.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def convergence(df, path):
    fig, (ax_ce, ax_tv) = plt.subplots(1, 2, figsize=(10, 4))
    for k, g in df.groupby("k"):
        ax_ce.plot(g.n_symbols, g.heldout_cross_entropy, "o-", label=f"k={k}")
        ax_tv.plot(g.n_symbols, g.mean_tv_gap, "o-", label=f"k={k}")
    ax_ce.axhline(df.oracle_entropy.iloc[0], color="k", ls="--", label="oracle")
    ax_ce.set(xscale="log", xlabel="training symbols", ylabel="held-out cross-entropy (nats)")
    ax_tv.set(xscale="log", yscale="log", xlabel="training symbols", ylabel="mean TV gap")
    ax_ce.legend()
    ax_tv.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def understanding(df, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    h = df.horizon.max()
    for (backend, direction), g in df[(df.horizon == h) & (df.method == "monte_carlo")].groupby(["backend", "direction"]):
        ax.errorbar(g.level, g.kl, yerr=g.standard_error, fmt="o-", label=f"{backend} ({direction})")
    ax.set_xticks(sorted(df.level.unique()))
    ax.set_xticklabels([f"{e:.0e}" for e in df.groupby("level").target_epsilon.first()])
    ax.set(xlabel="target ambiguity", ylabel=f"KL over {h} symbols (nats)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def icl(df, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    for (eta, backend), g in df.groupby(["eta", "backend"]):
        style = "o-" if backend == "oracle-clamped" else "x--"
        ax.plot(g.m, g.kl, style, label=f"eta={eta} {backend}")
    ax.set(xlabel="in-context messages m", ylabel="KL (nats)", yscale="symlog")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "out")
    for name, draw in [("convergence", convergence), ("understanding", understanding), ("icl", icl)]:
        csv = out / f"{name}.csv"
        if csv.exists():
            draw(pd.read_csv(csv), out / f"{name}.png")
            print(f"wrote {out / (name + '.png')}")


if __name__ == "__main__":
    main()

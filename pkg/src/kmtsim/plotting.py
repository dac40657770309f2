"""Figures for the report command (files only, Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def plot_tail_curves(summary: dict, path, baseline: dict | None = None) -> None:
    x = np.asarray(summary["x_grid"])
    tails = np.asarray(summary["tails"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for row in tails:
        ax.semilogy(x, np.where(row > 0, row, np.nan), color="0.7", lw=0.8)
    top = tails.max(axis=0)
    ax.semilogy(x, np.where(top > 0, top, np.nan), color="C0", lw=2, label="construction, battery max")
    if baseline is not None:
        btop = np.asarray(baseline["tails"]).max(axis=0)
        ax.semilogy(x, np.where(btop > 0, btop, np.nan), color="C3", lw=2, ls="--",
                    label="independent baseline")
    ax.set_xlabel(r"$x$")
    ax.set_ylabel(r"$\hat P(|S_n(f)| > x \log^2 n / \lambda_n)$")
    ax.set_title(f"tail curves, R = {summary['R']}")
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_mgf(summary: dict, path, c: float) -> None:
    t = np.asarray(summary["t_grid"])
    mgf = np.asarray(summary["mgf"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for row in mgf:
        ax.plot(t, row, color="C0", lw=0.8, alpha=0.6)
    tt = np.linspace(t.min(), t.max(), 200)
    ax.plot(tt, np.exp(c * tt * tt), color="k", ls="--", label=rf"$e^{{{c:g} t^2}}$")
    ax.set_yscale("log")
    ax.set_xlabel(r"$t$")
    ax.set_ylabel(r"$\hat E \exp(t S_n(f) / \log^2 n)$")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_scaling(table: dict, path) -> None:
    rows = table["rows"]
    n = np.array([r["n"] for r in rows], dtype=float)
    con = np.array([r["median_battery_max"] for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(n, con, "o-", color="C0",
              label=f"construction, slope {table['construction']['exponent']:.3f}")
    if table.get("baseline"):
        base = np.array([r["baseline_median_battery_max"] for r in rows])
        ax.loglog(n, base, "s--", color="C3",
                  label=f"independent, slope {table['baseline']['exponent']:.3f}")
    ax.set_xlabel(r"$n$")
    ax.set_ylabel(r"median $\max_f |S_n(f)|$")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)

"""Static figures for the CLI reports.

Rendering uses the Agg backend and never opens a window. Figures are
written with stripped metadata so identical data gives identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "lines.linewidth": 1.2,
}


def _figure(width=4.5, height=3.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_alpha_sweep(rows, path, *, title=None):
    """Held-out RMSE against alpha with the selected value marked.

    ``rows`` are mappings with ``alpha``, ``rmse`` (``None`` for failed
    fits) and a boolean ``selected``.
    """
    ok = [r for r in rows if r.get("rmse") is not None]
    fig, ax = _figure()
    if ok:
        a = np.array([r["alpha"] for r in ok])
        e = np.array([r["rmse"] for r in ok])
        ax.plot(a, e, marker="o", markersize=3, color="0.2")
        sel = [r for r in ok if r.get("selected")]
        if sel:
            ax.plot([sel[0]["alpha"]], [sel[0]["rmse"]], marker="*", markersize=10, color="C3", linestyle="none",
                    label=f"selected alpha = {sel[0]['alpha']:g}")
            ax.legend(frameon=False)
    ax.set_xlabel("alpha")
    ax.set_ylabel("test RMSE")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_bound_report(reports, path, *, title=None):
    """Measured divergence against the data-dependent bound, one point per trial."""
    ok = [r for r in reports if r.get("measured_divergence") is not None]
    fig, ax = _figure()
    if ok:
        t = np.array([r["trial"] for r in ok])
        d = np.array([r["measured_divergence"] for r in ok])
        b = np.array([r["theorem2_value"] for r in ok])
        v = np.array([bool(r["violation"]) for r in ok])
        ax.plot(t, b, color="0.6", linewidth=0.8, label="bound")
        ax.plot(t[~v], d[~v], marker=".", linestyle="none", color="C0", label="divergence")
        if v.any():
            ax.plot(t[v], d[v], marker="x", linestyle="none", color="C3", label="violation")
        positive = np.concatenate([d[d > 0], b[b > 0]])
        if positive.size and positive.max() / max(positive.min(), 1e-300) > 1e3:
            ax.set_yscale("log")
        ax.legend(frameon=False)
    ax.set_xlabel("trial")
    ax.set_ylabel("divergence")
    if title:
        ax.set_title(title)
    _save(fig, path)

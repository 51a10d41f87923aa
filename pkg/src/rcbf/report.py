"""Figure rendering for sweep and synthesis results.

Renders matplotlib figures to files next to the delimited output; the
CSV files remain the canonical record. Everything draws through the Agg
backend so headless runs work.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_RC = {
    "figure.figsize": (6.4, 4.2),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _axes():
    plt.rcParams.update(_RC)
    fig, ax = plt.subplots()
    return fig, ax


def sweep_figure(rows: list[dict], path: str, oracle: list[tuple[float, float]] | None = None):
    """Lower bound versus parameter for a verification sweep (k = 1)."""
    fig, ax = _axes()
    thetas = [r["theta"][0] for r in rows]
    rhos = [r["rho"] for r in rows]
    ax.plot(thetas, rhos, "o--", color="tab:blue", label="moment lower bound")
    ok = [r["status"] == "verified" for r in rows]
    if any(ok):
        ax.plot(
            [t for t, v in zip(thetas, ok) if v],
            [r for r, v in zip(rhos, ok) if v],
            "o",
            color="tab:green",
            label="verified",
        )
    if oracle:
        ax.plot(*zip(*oracle), ":", color="black", label="boundary-grid oracle")
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.set_xlabel("theta")
    ax.set_ylabel("value")
    ax.legend()
    fig.savefig(path)
    plt.close(fig)
    return path


def synthesis_curves_figure(
    grids: dict[int, tuple[np.ndarray, np.ndarray]],
    maximizers: dict[int, list],
    path: str,
    oracle: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Lower-bound curves per level with their maximizers (k = 1)."""
    fig, ax = _axes()
    for nu, (ts, vs) in sorted(grids.items()):
        ax.plot(ts, vs, label=f"level {nu}")
    for nu, points in sorted(maximizers.items()):
        for th in points:
            t0 = float(np.atleast_1d(th)[0])
            vs = grids[nu][1]
            ts = grids[nu][0]
            ax.plot(t0, float(np.interp(t0, ts, vs)), "r*", ms=10)
    if oracle is not None:
        ax.plot(oracle[0], oracle[1], "b:", label="value oracle")
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.set_xlabel("theta")
    ax.set_ylabel("lower bound")
    ax.legend()
    fig.savefig(path)
    plt.close(fig)
    return path


def synthesis_scatter_figure(
    thetas: np.ndarray, values: np.ndarray, maximizers: list, nu: int, path: str
):
    """Nonnegative-bound region colored by value (k = 3 parameter sets)."""
    plt.rcParams.update(_RC)
    fig = plt.figure(figsize=(6.4, 5.2))
    ax = fig.add_subplot(projection="3d")
    keep = values >= 0
    if keep.any():
        pts = thetas[keep]
        sc = ax.scatter(
            pts[:, 0], pts[:, 1], pts[:, 2], c=values[keep], cmap="viridis", s=8, alpha=0.7
        )
        fig.colorbar(sc, ax=ax, shrink=0.7, label="lower bound")
    for th in maximizers:
        ax.scatter([th[0]], [th[1]], [th[2]], color="red", marker="*", s=120)
    ax.set_xlabel("t1")
    ax.set_ylabel("t2")
    ax.set_zlabel("t3")
    ax.set_title(f"certified region, level {nu}")
    fig.savefig(path)
    plt.close(fig)
    return path

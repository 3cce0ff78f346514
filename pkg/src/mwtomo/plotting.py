"""Report figures rendered off-screen."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mesh import IN, HybridMesh  # noqa: E402


def plot_convergence(history: list, path) -> Path:
    """Functional and gradient norm per iteration, one line per level."""
    path = Path(path)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    levels = sorted({row.get("level", 0) for row in history})
    for lev in levels:
        rows = [r for r in history if r.get("level", 0) == lev]
        it = [r["iteration"] for r in rows]
        axes[0].semilogy(it, [r["J"] for r in rows], marker="o", label=f"level {lev}")
        axes[1].semilogy(it, [r["grad_norm"] for r in rows], marker="o", label=f"level {lev}")
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("J")
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("gradient norm")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_eps_slice(mesh: HybridMesh, eps_p0, path, axis: int = 2, position: float | None = None,
                   truth=None) -> Path:
    """Element values of eps near a coordinate plane through the IN box.

    Elements whose centroids lie within half a grid spacing of the plane
    are drawn as points coloured by eps.
    """
    path = Path(path)
    inside = mesh.fe.region == IN
    xc = mesh.fe.centroids
    if position is None:
        position = 0.5 * (mesh.in_box.lo[axis] + mesh.in_box.hi[axis])
    h = float(mesh.fd.spacing[axis])
    sel = inside & (np.abs(xc[:, axis] - position) <= 0.5 * h)
    a, b = [d for d in range(3) if d != axis]
    fields = [("reconstruction", np.asarray(eps_p0))]
    if truth is not None:
        fields.insert(0, ("truth", np.asarray(truth)))
    fig, axes = plt.subplots(1, len(fields), figsize=(4.2 * len(fields), 3.6), squeeze=False)
    vmax = max(float(np.max(v[sel])) if sel.any() else 1.0 for _, v in fields)
    for ax, (name, v) in zip(axes[0], fields):
        sc = ax.scatter(xc[sel, a], xc[sel, b], c=v[sel], s=18, vmin=1.0, vmax=max(vmax, 1.0 + 1e-9))
        ax.set_title(name)
        ax.set_xlabel(f"x{a + 1}")
        ax.set_ylabel(f"x{b + 1}")
        ax.set_aspect("equal")
        fig.colorbar(sc, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_traces(obs, path, component: int = 1) -> Path:
    """Space-time image of one field component on the observation face."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    im = ax.imshow(obs.values[:, :, component].T, aspect="auto", origin="lower",
                   extent=(0.0, obs.T, 0, len(obs.nodes)), cmap="RdBu_r")
    ax.set_xlabel("t")
    ax.set_ylabel("observation node")
    ax.set_title(f"E{component + 1}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path

"""Matplotlib rendering of run directories.

Figures are written next to the delimited outputs; the CSV/field exports
stay the primary data contract and nothing here feeds back into a solve.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

plt.rcParams["figure.figsize"] = (6.0, 3.8)
plt.rcParams["font.size"] = 9
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3

from .grid import read_field


def _save(fig, outdir, name, written):
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)


def render_run(rundir, outdir=None) -> list:
    """Render density evolution, dual potential, convergence history and
    certificate summary for a solved run directory.  Returns written paths."""
    outdir = outdir or rundir
    os.makedirs(outdir, exist_ok=True)
    written = []
    grid, _, (m,) = read_field(os.path.join(rundir, "m.field"))
    _, _, (u,) = read_field(os.path.join(rundir, "u.field"))
    _, _, (alpha,) = read_field(os.path.join(rundir, "alpha.field"))

    if grid.d == 1:
        xs = grid.x_centers
        fig, ax = plt.subplots()
        im = ax.imshow(m, aspect="auto", origin="lower",
                       extent=(-grid.R, grid.R, 0.0, 1.0), cmap="viridis")
        fig.colorbar(im, ax=ax, label="density")
        ax.set_xlabel("x")
        ax.set_ylabel("t")
        _save(fig, outdir, "density_spacetime.png", written)

        fig, ax = plt.subplots()
        for k in np.linspace(0, grid.nt, 5).astype(int):
            ax.plot(xs, m[k], label=f"t={k / grid.nt:.2f}")
        ax.set_xlabel("x")
        ax.set_ylabel("m")
        ax.legend(fontsize=7)
        _save(fig, outdir, "density_slices.png", written)

        fig, ax = plt.subplots()
        im = ax.imshow(u, aspect="auto", origin="lower",
                       extent=(-grid.R, grid.R, 0.0, 1.0), cmap="coolwarm")
        fig.colorbar(im, ax=ax, label="potential u")
        ax.set_xlabel("x")
        ax.set_ylabel("t")
        _save(fig, outdir, "potential.png", written)
    else:
        fig, axes = plt.subplots(1, 3, figsize=(9, 3))
        for ax, k, lab in zip(axes, (0, grid.nt // 2, grid.nt),
                              ("t=0", "t=1/2", "t=1")):
            im = ax.imshow(m[k].T, origin="lower",
                           extent=(-grid.R, grid.R, -grid.R, grid.R))
            ax.set_title(lab)
        fig.colorbar(im, ax=axes.ravel().tolist(), label="density")
        _save(fig, outdir, "density_snapshots.png", written)

    hist_path = os.path.join(rundir, "history.csv")
    if os.path.exists(hist_path):
        rows = np.genfromtxt(hist_path, delimiter=",", names=True)
        fig, ax = plt.subplots()
        ax.plot(rows["iteration"], rows["b"], label="primal value")
        ax.plot(rows["iteration"], rows["a"], label="dual value")
        ax.set_xlabel("iteration")
        ax.legend()
        _save(fig, outdir, "convergence_values.png", written)

        fig, ax = plt.subplots()
        gap = np.maximum(np.abs(rows["rel_gap"]), 1e-16)
        ax.semilogy(rows["iteration"], gap, label="|relative gap|")
        ax.semilogy(rows["iteration"],
                    np.maximum(rows["primal_residual"], 1e-16),
                    label="coupling residual")
        ax.set_xlabel("iteration")
        ax.legend()
        _save(fig, outdir, "convergence_residuals.png", written)

    rep_path = os.path.join(rundir, "report.json")
    if os.path.exists(rep_path):
        with open(rep_path) as fh:
            rep = json.load(fh)
        keys = ["gap", "yh_integral", "yf_integral", "hj_violation_support",
                "defect_mass", "continuity_residual_max"]
        vals = [max(abs(rep[k]), 1e-18) for k in keys]
        fig, ax = plt.subplots()
        ax.bar(range(len(keys)), vals)
        ax.set_yscale("log")
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys, rotation=30, ha="right", fontsize=7)
        ax.set_ylabel("certificate magnitude")
        _save(fig, outdir, "certificates.png", written)
    return written


def render_paths(rundir, paths_csv, outdir=None, max_paths: int = 200) -> list:
    """Overlay traced characteristics on the density background (d=1)."""
    outdir = outdir or rundir
    written = []
    grid, _, (m,) = read_field(os.path.join(rundir, "m.field"))
    if grid.d != 1:
        return written
    data = np.genfromtxt(paths_csv, delimiter=",", names=True)
    ids = np.unique(data["id"]).astype(int)[:max_paths]
    fig, ax = plt.subplots()
    ax.imshow(m, aspect="auto", origin="lower",
              extent=(-grid.R, grid.R, 0.0, 1.0), cmap="Greys")
    for pid in ids:
        sel = data["id"] == pid
        ax.plot(data["x0"][sel], data["t"][sel], lw=0.4, alpha=0.4, color="tab:red")
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    _save(fig, outdir, "characteristics.png", written)
    return written

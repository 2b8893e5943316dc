"""Lagrangian viewpoint: characteristics of the optimal velocity field.

Particles sampled from the initial density are integrated through the
solved flow with RK4; each path accumulates its kinetic energy and the
movement cost L(x, v) plus the congestion potential alpha along the way.
The ensemble is the empirical stand-in for a measure on path space: its
time marginals must reproduce the solved density, the accumulated cost of
almost every path must match the potential drop u(0, start) - u(1, end),
and smooth perturbations must not beat a traced path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grid as G
from .errors import DomainError, PositivityError
from .grid import GridSpec
from .model import GridCoefficients, ModelSpec


@dataclass
class Trajectory:
    times: np.ndarray       # (steps+1,)
    positions: np.ndarray   # (steps+1, d), clamped to the closed box
    energy: float           # int |velocity|^2 dt
    path_cost: float        # int (L + alpha) dt
    clamped: bool           # touched the box boundary
    masked_fraction: float  # fraction of steps spent below the density floor
    low_confidence: bool    # masked_fraction > 0.1 or clamped


def positivity_check(model: ModelSpec, grid: GridSpec, tol: float = 1e-12) -> None:
    """Path costs are only meaningful for nonnegative f and L; enforce the
    convention f(x,0) >= 0 and min_v L(x,v) = V_H(x) >= 0 on the grid."""
    vf = model.V_f.on_cells(grid)
    vh = model.V_H.on_cells(grid)
    if vf.min() < -tol or vh.min() < -tol:
        raise PositivityError(
            f"model violates nonnegativity: min V_f={vf.min():.3e}, "
            f"min V_H={vh.min():.3e}"
        )


def sample_particles(grid: GridSpec, m0, n: int, seed: int) -> np.ndarray:
    """n i.i.d. samples from the piecewise-constant density; deterministic
    for a fixed seed.  Inverse CDF in d=1, cell-categorical plus in-cell
    uniform in d=2."""
    if n < 1:
        raise DomainError("need at least one particle")
    m0 = np.asarray(m0, dtype=float)
    rng = np.random.default_rng(seed)
    if grid.d == 1:
        from .metrics import _Quantile

        q = _Quantile(grid, m0)
        return q(rng.random(n)).reshape(-1, 1)
    weights = np.maximum(m0, 0.0).ravel()
    total = weights.sum()
    if total <= 0:
        raise DomainError("density has zero total mass")
    cells = rng.choice(weights.size, size=n, p=weights / total)
    ij = np.stack(np.unravel_index(cells, grid.space_shape), axis=-1)
    jitter = rng.random((n, grid.d))
    return -grid.R + (ij + jitter) * grid.dx


class FlowField:
    """Linear-in-time, multilinear-in-space interpolation of the centered
    velocity, the density mask and the congestion potential of a solution."""

    def __init__(self, sol):
        self.grid = sol.grid
        self.v = sol.v
        self.alpha = sol.alpha
        self.mask = sol.v_mask.astype(float)
        self.t_cells = sol.grid.t_cells

    def _time_weights(self, t):
        # linear between cell centers, linear extrapolation over the half
        # cells at t = 0, 1 (keeps smooth fields kink-free for the tracer)
        tc = self.t_cells
        k = np.clip(np.searchsorted(tc, t) - 1, 0, tc.size - 2)
        lam = (t - tc[k]) / (tc[k + 1] - tc[k])
        return k, lam

    def eval(self, field, t, x):
        """field: (nt, nx^d) or (nt, nx^d, d); x: (n, d); returns (n, ...)."""
        grid = self.grid
        k, lam = self._time_weights(t)
        f0 = field[k]
        f1 = field[k + 1]
        pts = np.atleast_2d(x)
        out0 = _space_interp(grid, f0, pts)
        out1 = _space_interp(grid, f1, pts)
        return (1 - lam) * out0 + lam * out1

    def velocity(self, t, x):
        return self.eval(self.v, t, x)

    def potential(self, t, x):
        return self.eval(self.alpha, t, x)

    def on_support(self, t, x):
        return self.eval(self.mask, t, x) >= 0.5


def _space_interp(grid: GridSpec, values: np.ndarray, pts: np.ndarray):
    """Multilinear interpolation of one time slice at points (n, d)."""
    idx, frac = [], []
    for j in range(grid.d):
        s = (pts[:, j] + grid.R) / grid.dx - 0.5
        s = np.clip(s, 0.0, grid.nx - 1.0)
        i0 = np.clip(np.floor(s).astype(int), 0, grid.nx - 2)
        idx.append(i0)
        frac.append(s - i0)
    if grid.d == 1:
        i0, f = idx[0], frac[0]
        lo, hi = values[i0], values[i0 + 1]
        if values.ndim == 1:
            return lo * (1 - f) + hi * f
        return lo * (1 - f)[:, None] + hi * f[:, None]
    (i0, i1), (fx, fy) = idx, frac
    v00, v10 = values[i0, i1], values[i0 + 1, i1]
    v01, v11 = values[i0, i1 + 1], values[i0 + 1, i1 + 1]
    if values.ndim == 2:
        return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
                + v01 * (1 - fx) * fy + v11 * fx * fy)
    wx, wy = fx[:, None], fy[:, None]
    return (v00 * (1 - wx) * (1 - wy) + v10 * wx * (1 - wy)
            + v01 * (1 - wx) * wy + v11 * wx * wy)


def trace_ensemble(sol, x0: np.ndarray, steps: int = 200):
    """RK4-integrate a batch of particles through the solved velocity field.

    Returns positions (steps+1, n, d), per-particle energies, path costs,
    clamp flags and masked-step fractions.  The congestion potential and the
    Lagrangian are accumulated with the trapezoid rule on the step grid.
    """
    model, grid = sol.model, sol.grid
    positivity_check(model, grid)
    coef = GridCoefficients.build(model, grid)
    flow = FlowField(sol)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n = x0.shape[0]
    h = 1.0 / steps
    times = np.linspace(0.0, 1.0, steps + 1)
    pos = np.empty((steps + 1, n, grid.d))
    pos[0] = x0
    clamped = np.zeros(n, dtype=bool)
    masked = np.zeros(n)
    integrand = np.empty((steps + 1, n))
    speed_sq = np.empty((steps + 1, n))

    def f(t, x):
        return flow.velocity(t, x)

    def box(x):
        lo, hi = -grid.R, grid.R
        out = np.clip(x, lo, hi)
        return out

    def lagrangian_cells(x, v):
        g = _space_interp(grid, coef.g, x) if coef.g.ndim else np.full(n, float(coef.g))
        vh = _space_interp(grid, coef.V_H, x) if coef.V_H.ndim else np.full(n, float(coef.V_H))
        shifted = v + coef.z
        return 0.5 * np.sum(shifted**2, axis=-1) / g + vh

    x = x0.copy()
    v0 = f(0.0, x)
    integrand[0] = lagrangian_cells(x, v0) + flow.potential(0.0, x)
    speed_sq[0] = np.sum(v0**2, axis=-1)
    for j in range(steps):
        t = times[j]
        k1 = f(t, x)
        k2 = f(t + 0.5 * h, box(x + 0.5 * h * k1))
        k3 = f(t + 0.5 * h, box(x + 0.5 * h * k2))
        k4 = f(t + h, box(x + h * k3))
        x_new = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        hit = np.any((x_new < -grid.R) | (x_new > grid.R), axis=-1)
        clamped |= hit
        x = box(x_new)
        pos[j + 1] = x
        masked += ~flow.on_support(times[j + 1], x)
        vj = f(times[j + 1], x)
        integrand[j + 1] = lagrangian_cells(x, vj) + flow.potential(times[j + 1], x)
        speed_sq[j + 1] = np.sum(vj**2, axis=-1)

    tw = np.full(steps + 1, h)
    tw[0] *= 0.5
    tw[-1] *= 0.5
    energy = speed_sq.T @ tw
    cost = integrand.T @ tw
    cost_cumulative = np.concatenate([
        np.zeros((1, n)),
        np.cumsum(0.5 * h * (integrand[1:] + integrand[:-1]), axis=0),
    ])
    masked_fraction = masked / steps
    return {
        "times": times,
        "positions": pos,
        "energy": energy,
        "path_cost": cost,
        "cost_cumulative": cost_cumulative,
        "clamped": clamped,
        "masked_fraction": masked_fraction,
        "low_confidence": (masked_fraction > 0.1) | clamped,
    }


def trace_characteristic(x0, sol, steps: int = 200) -> Trajectory:
    """Single-particle wrapper around trace_ensemble."""
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if np.any(np.abs(x0) > sol.grid.R):
        raise DomainError("start point outside the box")
    out = trace_ensemble(sol, x0, steps)
    return Trajectory(
        times=out["times"],
        positions=out["positions"][:, 0, :],
        energy=float(out["energy"][0]),
        path_cost=float(out["path_cost"][0]),
        clamped=bool(out["clamped"][0]),
        masked_fraction=float(out["masked_fraction"][0]),
        low_confidence=bool(out["low_confidence"][0]),
    )


def _w1_distance_1d(grid: GridSpec, samples: np.ndarray, density: np.ndarray) -> float:
    """L^1 distance of CDFs between an empirical sample and a grid density."""
    density = np.maximum(np.asarray(density, dtype=float), 0.0)
    total = density.sum() * grid.dx
    fine = 8
    xs = -grid.R + (np.arange(grid.nx * fine) + 0.5) * (grid.dx / fine)
    cdf_m = np.cumsum(np.repeat(density, fine)) * (grid.dx / fine) / total
    sorted_s = np.sort(samples.ravel())
    cdf_e = np.searchsorted(sorted_s, xs, side="right") / sorted_s.size
    return float(np.sum(np.abs(cdf_m - cdf_e)) * (grid.dx / fine))


def _hist_l1(grid: GridSpec, samples: np.ndarray, density: np.ndarray) -> float:
    """Per-cell histogram L^1 discrepancy (total-variation style, in mass units)."""
    density = np.maximum(np.asarray(density, dtype=float), 0.0)
    mass = density * grid.dx**grid.d
    mass = mass / mass.sum()
    ij = np.clip(((samples + grid.R) / grid.dx).astype(int), 0, grid.nx - 1)
    idx = np.ravel_multi_index(tuple(ij.T), grid.space_shape)
    counts = np.bincount(idx, minlength=mass.size) / samples.shape[0]
    return float(np.abs(counts - mass.ravel()).sum())


def verify_superposition(sol, n: int = 10000, seed: int = 0, steps: int = 200,
                         check_times=(0.25, 0.5, 0.75, 1.0)) -> dict:
    """Compare empirical time marginals of the traced ensemble with the
    solved density slices; report discrepancies next to the n^{-1/2} x
    diameter sampling baseline."""
    grid = sol.grid
    x0 = sample_particles(grid, sol.m[0], n, seed)
    out = trace_ensemble(sol, x0, steps)
    diam = 2 * grid.R * np.sqrt(grid.d)
    baseline = diam / np.sqrt(n)
    rows = []
    for t in check_times:
        j = int(round(t * steps))
        k = int(round(t * grid.nt))
        target = sol.m[k]
        emp = out["positions"][j]
        if grid.d == 1:
            dist = _w1_distance_1d(grid, emp, target)
            metric = "w1"
        else:
            dist = _hist_l1(grid, emp, target)
            metric = "hist_l1"
        rows.append({"t": float(t), "distance": dist, "metric": metric})
    return {
        "n": n,
        "baseline": float(baseline),
        "dx": grid.dx,
        "marginals": rows,
        "mean_energy": float(out["energy"].mean()),
        "low_confidence_fraction": float(out["low_confidence"].mean()),
        "ensemble": out,
    }


def _u_endpoint_values(sol, x_start, x_end):
    """u at t=0 and t=1 along paths, via linear time extrapolation of the
    first/last pair of cell-centered slices."""
    grid = sol.grid
    u0 = 1.5 * sol.u[0] - 0.5 * sol.u[1]
    u1 = 1.5 * sol.u[-1] - 0.5 * sol.u[-2]
    return (_space_interp(grid, u0, np.atleast_2d(x_start)),
            _space_interp(grid, u1, np.atleast_2d(x_end)))


def path_optimality_check(sol, ensemble: dict, n_bumps: int = 20,
                          bump_amplitude: float = 0.05, seed: int = 1,
                          beat_tolerance: float = 1e-3) -> dict:
    """Check the two path-level optimality statements on a traced ensemble.

    (i) cost identity: r = path_cost - [u(0, start) - u(1, end)] vanishes
        along characteristics and is nonnegative for admissible paths;
        reported as median and 95th percentile of |r| over confident paths.
    (ii) local minimality: each traced path is compared against smooth
        sine-bump perturbations (vanishing at both endpoints); the fraction
        of perturbations that beat the traced cost by more than
        beat_tolerance is reported.
    """
    grid, model = sol.grid, sol.model
    coef = GridCoefficients.build(model, grid)
    flow = FlowField(sol)
    pos = ensemble["positions"]
    times = ensemble["times"]
    steps = times.size - 1
    cost = ensemble["path_cost"]
    confident = ~ensemble["low_confidence"]

    u_start, u_end = _u_endpoint_values(sol, pos[0], pos[-1])
    r = cost - (u_start - u_end)
    r_conf = r[confident] if confident.any() else r

    rng = np.random.default_rng(seed)
    n_paths = min(100, pos.shape[1])
    pick = rng.choice(pos.shape[1], size=n_paths, replace=False)
    h = 1.0 / steps
    tw = np.full(steps + 1, h)
    tw[0] *= 0.5
    tw[-1] *= 0.5
    sin_t = np.sin(np.pi * times)
    cos_t = np.pi * np.cos(np.pi * times)

    vel = np.gradient(pos[:, pick, :], h, axis=0)
    beaten = 0
    total = 0
    for _ in range(n_bumps):
        amp = bump_amplitude * rng.random(n_paths)
        direction = rng.standard_normal((n_paths, grid.d))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        bump = amp[:, None] * direction
        new_pos = np.clip(pos[:, pick, :] + sin_t[:, None, None] * bump[None],
                          -grid.R, grid.R)
        new_vel = vel + cos_t[:, None, None] * bump[None]
        integ = np.empty((steps + 1, n_paths))
        for j, t in enumerate(times):
            x = new_pos[j]
            g = _space_interp(grid, coef.g, x) if coef.g.ndim else np.full(n_paths, float(coef.g))
            vh = _space_interp(grid, coef.V_H, x) if coef.V_H.ndim else np.full(n_paths, float(coef.V_H))
            shifted = new_vel[j] + coef.z
            integ[j] = 0.5 * np.sum(shifted**2, axis=-1) / g + vh \
                + flow.potential(t, x)
        new_cost = integ.T @ tw
        conf = confident[pick]
        beaten += int(np.sum((cost[pick] - new_cost > beat_tolerance) & conf))
        total += int(conf.sum())

    return {
        "median_abs_r": float(np.median(np.abs(r_conf))),
        "p95_abs_r": float(np.quantile(np.abs(r_conf), 0.95)),
        "median_cost": float(np.median(cost[confident])) if confident.any()
        else float(np.median(cost)),
        "mean_cost": float(cost[confident].mean()) if confident.any()
        else float(cost.mean()),
        "r_values": r,
        "confident_fraction": float(confident.mean()),
        "perturbations_tried": total,
        "perturbations_beating": beaten,
        "beat_fraction": beaten / max(total, 1),
    }


def transport_plan_summary(sol, ensemble: dict, bins: int = None) -> dict:
    """Empirical endpoint-pair coupling of the ensemble.

    d=1: 2-D histogram over (start, end) positions; d=2: histogram over
    (start cell, end cell) indices.  The start marginal equals the sampled
    initial density by construction.
    """
    grid = sol.grid
    pos = ensemble["positions"]
    start, end = pos[0], pos[-1]
    if bins is None:
        bins = grid.nx
    if grid.d == 1:
        hist, xe, ye = np.histogram2d(start[:, 0], end[:, 0], bins=bins,
                                      range=[[-grid.R, grid.R]] * 2)
        hist /= start.shape[0]
        return {"hist": hist, "x_edges": xe, "y_edges": ye,
                "marginal_start": hist.sum(axis=1),
                "marginal_end": hist.sum(axis=0)}
    def cells(x):
        ij = np.clip(((x + grid.R) / grid.dx).astype(int), 0, grid.nx - 1)
        return np.ravel_multi_index(tuple(ij.T), grid.space_shape)
    ncells = grid.nx**grid.d
    hist = np.zeros((ncells, ncells))
    np.add.at(hist, (cells(start), cells(end)), 1.0)
    hist /= start.shape[0]
    return {"hist": hist, "marginal_start": hist.sum(axis=1),
            "marginal_end": hist.sum(axis=0)}

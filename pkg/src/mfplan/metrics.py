"""Optimal-transport reference computations.

d = 1 Wasserstein distances and displacement interpolation are computed
through the quantile calculus of piecewise-constant densities: both quantile
functions are linear on the merged breakpoint partition, so two-point
Gauss-Legendre quadrature per segment integrates every quadratic quantity
exactly and the displacement-convexity inequalities hold at rounding level
by plain pointwise convexity.

The Kantorovich-Lebesgue cost family delegates to the planning solver with
the matching kinetic/congestion model; the heat connector is the exact
reflecting-boundary heat semigroup in the cosine basis.
"""

from __future__ import annotations

import numpy as np
from scipy.fft import dctn, idctn

from . import grid as G
from .errors import DomainError, UnsupportedStrategyError
from .grid import GridSpec


# ---------------------------------------------------------------------------
# quantile calculus (d = 1)
# ---------------------------------------------------------------------------


class _Quantile:
    """Quantile function of a piecewise-constant density on the grid cells."""

    def __init__(self, grid: GridSpec, m: np.ndarray):
        if grid.d != 1:
            raise UnsupportedStrategyError("quantile calculus needs d = 1")
        m = np.asarray(m, dtype=float)
        if m.ndim != 1 or m.shape[0] != grid.nx:
            raise DomainError(f"expected a spatial slice of {grid.nx} cells")
        if np.any(m < -1e-14):
            raise DomainError("density must be nonnegative")
        m = np.maximum(m, 0.0)
        total = m.sum() * grid.dx
        if total <= 0:
            raise DomainError("density has zero total mass")
        self.grid = grid
        self.density = m / total
        self.edges = -grid.R + np.arange(grid.nx + 1) * grid.dx
        self.cum = np.concatenate([[0.0], np.cumsum(self.density) * grid.dx])
        self.cum[-1] = 1.0

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        idx = np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0,
                      self.grid.nx - 1)
        span = self.cum[idx + 1] - self.cum[idx]
        frac = np.where(span > 0, (s - self.cum[idx]) / np.where(span > 0, span, 1.0), 0.0)
        return self.edges[idx] + np.clip(frac, 0.0, 1.0) * self.grid.dx


def _merged_segments(q0: _Quantile, q1: _Quantile):
    """Breakpoints, Gauss points and per-segment data shared by both quantiles."""
    s = np.unique(np.concatenate([q0.cum, q1.cum]))
    s = s[(s >= 0.0) & (s <= 1.0)]
    ds = np.diff(s)
    keep = ds > 1e-300
    a, b = s[:-1][keep], s[1:][keep]
    ds = ds[keep]
    off = 0.5 / np.sqrt(3.0)
    g1 = a + ds * (0.5 - off)
    g2 = a + ds * (0.5 + off)
    return a, b, ds, g1, g2


def w2_1d(grid: GridSpec, m0, m1) -> float:
    """Exact L^2 transport distance of two grid densities via quantiles."""
    q0 = _Quantile(grid, m0)
    q1 = _Quantile(grid, m1)
    _, _, ds, g1, g2 = _merged_segments(q0, q1)
    d1 = q0(g1) - q1(g1)
    d2 = q0(g2) - q1(g2)
    val = 0.5 * np.sum(ds * (d1**2 + d2**2))
    return float(np.sqrt(max(val, 0.0)))


def displacement_interpolation_1d(grid: GridSpec, m0, m1, t: float) -> np.ndarray:
    """Density of the constant-speed geodesic at time t, rendered on the grid.

    Pushforward of the piecewise-constant model through the monotone map
    (1-t) Q0 + t Q1; endpoints reproduce the inputs exactly.
    """
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0,1], got {t}")
    q0 = _Quantile(grid, m0)
    q1 = _Quantile(grid, m1)
    if t == 0.0:
        return q0.density.copy()
    if t == 1.0:
        return q1.density.copy()
    a, b, ds, _, _ = _merged_segments(q0, q1)
    # one-sided quantile values inside each segment (jumps live on the nodes)
    qa = (1 - t) * q0(np.nextafter(a, 1.0)) + t * q1(np.nextafter(a, 1.0))
    qb = (1 - t) * q0(np.nextafter(b, 0.0)) + t * q1(np.nextafter(b, 0.0))
    qa, qb = np.minimum(qa, qb), np.maximum(qa, qb)
    edges = q0.edges
    # mass below each cell edge: sum the linear-segment contributions
    run = np.where(qb > qa, qb - qa, 1.0)
    below = np.empty(edges.size)
    for i, x in enumerate(edges):
        fr = np.where(qb <= x, 1.0, np.where(qa >= x, 0.0, (x - qa) / run))
        below[i] = np.sum(ds * fr)
    mass = np.diff(below)
    mass[0] += below[0]
    mass[-1] += 1.0 - below[-1]
    return np.maximum(mass, 0.0) / grid.dx


def quantile_moment(grid: GridSpec, m) -> float:
    """Second moment of the piecewise-constant measure, exact via quantiles."""
    q = _Quantile(grid, m)
    ds = np.diff(q.cum)
    keep = ds > 0
    a = q.cum[:-1][keep]
    ds = ds[keep]
    off = 0.5 / np.sqrt(3.0)
    g1 = q(a + ds * (0.5 - off))
    g2 = q(a + ds * (0.5 + off))
    return float(0.5 * np.sum(ds * (g1**2 + g2**2)))


def displacement_moment(grid: GridSpec, m0, m1, t: float) -> float:
    """Second moment along the geodesic, computed in quantile coordinates."""
    q0 = _Quantile(grid, m0)
    q1 = _Quantile(grid, m1)
    _, _, ds, g1, g2 = _merged_segments(q0, q1)
    v1 = (1 - t) * q0(g1) + t * q1(g1)
    v2 = (1 - t) * q0(g2) + t * q1(g2)
    return float(0.5 * np.sum(ds * (v1**2 + v2**2)))


def displacement_lp_norm(grid: GridSpec, m0, m1, t: float, p: float) -> float:
    """||m_t||_p^p along the geodesic, exact for the piecewise-linear model.

    Uses int (Q_t')^{1-p} ds with Q_t' = (1-t) Q0' + t Q1' constant per
    merged segment, so the displacement convexity inequality is inherited
    from the pointwise convexity of r -> r^(1-p).
    """
    q0 = _Quantile(grid, m0)
    q1 = _Quantile(grid, m1)
    a, b, ds, g1, _ = _merged_segments(q0, q1)
    def slope(q):
        idx = np.clip(np.searchsorted(q.cum, g1, side="right") - 1, 0, grid.nx - 1)
        rho = q.density[idx]
        return 1.0 / np.maximum(rho, 1e-300)
    st = (1 - t) * slope(q0) + t * slope(q1)
    return float(np.sum(ds * st ** (1.0 - p)))


# ---------------------------------------------------------------------------
# Kantorovich-Lebesgue costs
# ---------------------------------------------------------------------------


def kl_model(a: float, p: float, d: int):
    """Planning model whose optimum is the KL cost with parameter a:
    kinetic term a|v|^2 m / 2 and congestion (m + m^p) / (2a)."""
    from .model import ModelSpec

    if a <= 0:
        raise DomainError("KL parameter a must be positive")
    return ModelSpec(d=d, p_exponent=p, g=1.0 / a, a=p / (2 * a), V_f=1.0 / (2 * a))


def kl_cost(grid: GridSpec, m0, m1, a: float, p: float = 2.0, config=None,
            return_solution: bool = False):
    """Dynamic Kantorovich-Lebesgue cost: converged planning value for the
    matching kinetic/congestion model."""
    from .primal import SolverConfig, solve_planning

    model = kl_model(a, p, grid.d)
    if config is None:
        config = SolverConfig(max_iters=2000, stop_gap=1e-4,
                              init_strategy="displacement" if grid.d == 1
                              else "linear-blend")
    sol = solve_planning(model, grid, m0, m1, config)
    cost = sol.history.b[-1]
    return (cost, sol) if return_solution else cost


def kl_upper_bound(grid: GridSpec, m0, m1, a: float, p: float = 2.0) -> float:
    """Closed-form ceiling 1/(2a) + int [a|x|^2 (m0+m1) + (m0^p+m1^p)/(4a)]."""
    if a <= 0:
        raise DomainError("KL parameter a must be positive")
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    vol = grid.dx**grid.d
    xsq = grid.radius_sq()
    quad = float(((m0 + m1) * xsq).sum() * vol)
    lp = float(((m0**p + m1**p)).sum() * vol)
    return 1.0 / (2 * a) + a * quad + lp / (4 * a)


def kl_distance(grid: GridSpec, m0, m1, a_grid, p: float = 2.0, config=None,
                refine: bool = False, refine_iters: int = 4) -> dict:
    """Infimum of the KL cost over the finite a-grid, with optional
    golden-section refinement around the best grid point."""
    a_grid = [float(a) for a in a_grid]
    if not a_grid:
        raise DomainError("a_grid must be nonempty")
    costs = {a: kl_cost(grid, m0, m1, a, p, config) for a in a_grid}
    best_a = min(costs, key=costs.get)
    best = costs[best_a]
    if refine:
        ordered = sorted(costs)
        i = ordered.index(best_a)
        lo = ordered[max(i - 1, 0)] if i > 0 else best_a / 2
        hi = ordered[min(i + 1, len(ordered) - 1)] if i < len(ordered) - 1 else best_a * 2
        phi = (np.sqrt(5.0) - 1) / 2
        x1 = hi - phi * (hi - lo)
        x2 = lo + phi * (hi - lo)
        f1 = kl_cost(grid, m0, m1, x1, p, config)
        f2 = kl_cost(grid, m0, m1, x2, p, config)
        for _ in range(refine_iters):
            if f1 <= f2:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - phi * (hi - lo)
                f1 = kl_cost(grid, m0, m1, x1, p, config)
            else:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + phi * (hi - lo)
                f2 = kl_cost(grid, m0, m1, x2, p, config)
            costs[x1 if f1 < f2 else x2] = min(f1, f2)
        if min(f1, f2) < best:
            best_a = x1 if f1 < f2 else x2
            best = min(f1, f2)
    return {"costs": costs, "d_kl": best, "argmin_a": best_a}


# ---------------------------------------------------------------------------
# heat semigroup with reflecting boundary
# ---------------------------------------------------------------------------


def heat_connector(grid: GridSpec, m, t: float) -> np.ndarray:
    """Reflecting-boundary heat flow at time t, exact in the cosine basis.

    Matches free-space Gaussian smoothing with kernel variance 2t while the
    mass stays away from the box boundary; conserves total mass to rounding.
    """
    if t <= 0:
        raise DomainError("heat time must be positive")
    m = np.asarray(m, dtype=float)
    if m.shape != grid.space_shape:
        raise DomainError(f"density shape {m.shape} != {grid.space_shape}")
    axes = tuple(range(grid.d))
    mhat = dctn(m, type=2, norm="ortho", axes=axes, workers=G.FFT_WORKERS)
    k = np.pi * np.arange(grid.nx) / (2 * grid.R)
    for ax in range(grid.d):
        sh = [1] * grid.d
        sh[ax] = -1
        mhat = mhat * np.exp(-(k.reshape(sh) ** 2) * t)
    return idctn(mhat, type=2, norm="ortho", axes=axes, workers=G.FFT_WORKERS)


def fisher_information(grid: GridSpec, m: np.ndarray, floor_ratio: float = 1e-12) -> float:
    """Discrete int |Dm|^2 / m with centered differences; near-vacuum cells
    below floor_ratio * max(m) are skipped."""
    m = np.asarray(m, dtype=float)
    grads = np.gradient(m, grid.dx) if grid.d == 1 else np.gradient(m, grid.dx, grid.dx)
    if grid.d == 1:
        grads = [grads]
    gsq = sum(g**2 for g in grads)
    floor = floor_ratio * m.max()
    mask = m > floor
    vol = grid.dx**grid.d
    return float((gsq[mask] / m[mask]).sum() * vol)


def heat_path_estimates(grid: GridSpec, m, ts, p: float = 2.0) -> dict:
    """Norm decay and Fisher-information profile of the heat flow.

    For every t: the L^p and L^2 norms of S_t m, the Fisher information with
    its d/(8 pi t) ceiling, the boundary-layer mass, and a `resolved` flag
    (kernel width above three cells, boundary mass below 1%).  The log-log
    slope of the L^2 norm is fitted over the resolved range.
    """
    ts = np.asarray(ts, dtype=float)
    if np.any(ts <= 0):
        raise DomainError("heat times must be positive")
    vol = grid.dx**grid.d
    rows = []
    for t in ts:
        mt = heat_connector(grid, m, float(t))
        l2 = float(np.sqrt((mt**2).sum() * vol))
        lp = float(((np.maximum(mt, 0.0) ** p).sum() * vol) ** (1.0 / p))
        fisher = fisher_information(grid, mt)
        bmass = float(G.boundary_mass(grid, mt[None])[0])
        sigma = np.sqrt(2 * t)
        resolved = bool(sigma >= 3 * grid.dx and bmass < 0.01)
        rows.append({
            "t": float(t), "l2": l2, "lp": lp, "fisher": fisher,
            "fisher_bound": grid.d / (8 * np.pi * t),
            "boundary_mass": bmass, "resolved": resolved,
        })
    res = [r for r in rows if r["resolved"]]
    slope = None
    if len(res) >= 2:
        lt = np.log([r["t"] for r in res])
        ln = np.log([r["l2"] for r in res])
        slope = float(np.polyfit(lt, ln, 1)[0])
    return {"rows": rows, "l2_slope_resolved": slope,
            "expected_slope": -grid.d / 4.0}

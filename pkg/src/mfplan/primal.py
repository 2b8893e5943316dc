"""Primal solver: minimize the action-entropy functional over the discrete
continuity set by proximal convex splitting.

Two engines share every contract:

* ``alg2`` (default): augmented-Lagrangian splitting on the dual pair.  The
  potential block solves one space-time Poisson problem per sweep (exact, in
  a mixed cosine basis), the conjugate block is a cellwise monotone scalar
  solve that simultaneously yields the local density estimate, and the
  multiplier of the affine coupling is the flow itself.  The potential is a
  splitting variable, so no separate Hamilton-Jacobi solve ever happens, and
  the resulting certificates are quadrature-floor accurate.

* ``pdhg``: Chambolle-Pock iteration on the saddle form with the constraint
  multiplier as the dual ascent variable.  Every update is a local stencil,
  which makes lattice-shift equivariance exact; certificates converge like
  the first-order duality gap.

Both engines are deterministic: identical inputs and config reproduce the
history bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct, idct

from . import dual as _dual
from . import grid as G
from .errors import (
    DomainError,
    MassMismatchError,
    ProxNewtonError,
    StepSizeError,
    UnsupportedStrategyError,
)
from .grid import GridSpec
from .model import GridCoefficients, ModelSpec

INIT_STRATEGIES = ("linear-blend", "displacement", "heat-connector")
ALGORITHMS = ("alg2", "pdhg")


@dataclass
class SolverConfig:
    max_iters: int = 3000
    tau_primal: float = None  # pdhg: primal step (default 0.95/||K||); alg2: see below
    tau_dual: float = None    # pdhg: dual step; alg2: penalty = tau_dual/tau_primal
    theta: float = 1.0        # over-relaxation knob in [0, 1]
    stop_gap: float = 1e-3    # relative duality-gap target
    stop_residual: float = 1e-5  # fixed-point / constraint-coupling residual target
    init_strategy: str = "linear-blend"
    density_floor: float = None  # default 1e-8 * max(m)
    algorithm: str = "alg2"
    history_every: int = 1
    power_iters: int = 50

    def __post_init__(self):
        if self.init_strategy not in INIT_STRATEGIES:
            raise UnsupportedStrategyError(
                f"init_strategy must be one of {INIT_STRATEGIES}"
            )
        if self.algorithm not in ALGORITHMS:
            raise UnsupportedStrategyError(f"algorithm must be one of {ALGORITHMS}")
        if not 0.0 <= self.theta <= 1.0:
            raise DomainError("theta must lie in [0, 1]")

    @property
    def penalty(self) -> float:
        """Augmented-Lagrangian penalty used by the alg2 engine."""
        if self.tau_primal is not None and self.tau_dual is not None:
            return self.tau_dual / self.tau_primal
        return 1.0

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_json(obj: dict) -> "SolverConfig":
        known = {k: obj[k] for k in obj if k in SolverConfig.__dataclass_fields__}
        return SolverConfig(**known)


@dataclass
class History:
    b: list = field(default_factory=list)
    a: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    rel_gap: list = field(default_factory=list)
    primal_residual: list = field(default_factory=list)
    dual_residual: list = field(default_factory=list)
    continuity_residual: list = field(default_factory=list)
    iteration: list = field(default_factory=list)

    COLUMNS = ("iteration", "b", "a", "gap", "rel_gap", "primal_residual",
               "dual_residual", "continuity_residual")

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in zip(*(getattr(self, c) for c in self.COLUMNS)):
                fh.write(",".join(repr(v) for v in row) + "\n")


@dataclass
class Solution:
    grid: GridSpec
    model: ModelSpec
    m: np.ndarray                 # (nt+1, nx^d) density on time nodes
    w: tuple                      # face-staggered momentum
    v: np.ndarray                 # (nt, nx^d, d) centered velocity, 0 off support
    v_mask: np.ndarray            # True where centered density > density_floor
    u: np.ndarray                 # physical, gauge-fixed HJ potential (cells)
    alpha: np.ndarray             # clamped coupling value f(x, m)
    multiplier: np.ndarray        # raw multiplier of the splitting (cells)
    multiplier_scale: float       # u_physical = multiplier_scale * multiplier
    history: History
    config: SolverConfig
    density_floor: float
    iterations: int
    converged: bool
    stop_reason: str
    wall_time: float
    potential_nodes: np.ndarray = None  # alg2 potential on time nodes, pre-gauge

    @property
    def m0(self) -> np.ndarray:
        return self.m[0]

    @property
    def m1(self) -> np.ndarray:
        return self.m[-1]

    def centered_density(self) -> np.ndarray:
        return G.time_node_to_cell(self.m)

    def centered_momentum(self) -> np.ndarray:
        return np.stack(G.interp_face_to_center(self.grid, self.w), axis=-1)


# ---------------------------------------------------------------------------
# cellwise proximal map of  m L(x, w/m) + F(x, m)
# ---------------------------------------------------------------------------


def _prox_psi(m, coef, wz_sq, zw_dot, zsq, tau, m_tilde):
    """Reduced stationarity function psi(m); strictly increasing in m."""
    s = coef.g * m + tau
    return (
        coef.V_H
        + (zw_dot + zsq * m) / s
        - 0.5 * coef.g * (wz_sq + 2 * zw_dot * m + zsq * m * m) / s**2
        + coef.a * m ** (coef.p - 1.0)
        + coef.V_f
        + (m - m_tilde) / tau
    )


def _prox_psi_prime(m, coef, num_sq, tau):
    curv = coef.a * (coef.p - 1.0) * m ** (coef.p - 2.0) if coef.p != 2.0 else coef.a
    return num_sq / (coef.g * m + tau) ** 3 + curv + 1.0 / tau


def prox_action(model_or_coef, grid: GridSpec, m_tilde, w_tilde, tau: float,
                tol: float = 1e-11, max_newton: int = 100):
    """argmin over {m >= 0, w} of  m L(x,w/m) + F(x,m)
                                  + (|m - m_tilde|^2 + |w - w_tilde|^2)/(2 tau).

    Vectorized over cells.  The optimal momentum is the closed form
    w = m (g w_tilde - tau z)/(g m + tau) and the density solves a strictly
    increasing scalar equation by safeguarded Newton (bisection fallback).
    The output satisfies the stationarity system to ~1e-10; non-convergence
    raises ProxNewtonError naming the offending cells.
    """
    coef = model_or_coef if isinstance(model_or_coef, GridCoefficients) \
        else GridCoefficients.build(model_or_coef, grid)
    if tau <= 0:
        raise DomainError("prox step tau must be positive")
    m_tilde = np.asarray(m_tilde, dtype=float)
    w_tilde = np.asarray(w_tilde, dtype=float)  # (..., d)

    z = coef.z
    zsq = float(z @ z)
    zw_dot = w_tilde @ z
    wz_sq = np.sum(w_tilde * w_tilde, axis=-1)
    num = tau * z - coef.g[..., None] * w_tilde
    num_sq = np.sum(num * num, axis=-1)

    psi0 = _prox_psi(np.zeros_like(m_tilde), coef, wz_sq, zw_dot, zsq, tau, m_tilde)
    active = psi0 < 0.0  # zero is the joint minimizer wherever psi(0+) >= 0

    m = np.zeros_like(m_tilde)
    if np.any(active):
        lo = np.zeros_like(m_tilde)
        hi = np.maximum(m_tilde, 1.0)
        bad = active
        for _ in range(200):
            bad = active & (_prox_psi(hi, coef, wz_sq, zw_dot, zsq, tau, m_tilde) <= 0)
            if not bad.any():
                break
            hi = np.where(bad, 2.0 * hi, hi)
        else:
            raise ProxNewtonError("prox bracket expansion failed",
                                  cells=np.argwhere(bad)[:8])

        mcur = np.where(active, 0.5 * hi, 0.0)
        converged = ~active
        for _ in range(max_newton):
            val = _prox_psi(mcur, coef, wz_sq, zw_dot, zsq, tau, m_tilde)
            lo = np.where(active & (val < 0), mcur, lo)
            hi = np.where(active & (val > 0), mcur, hi)
            slope = _prox_psi_prime(np.maximum(mcur, 1e-300), coef, num_sq, tau)
            nxt = mcur - val / slope
            outside = (nxt <= lo) | (nxt >= hi)
            nxt = np.where(outside, 0.5 * (lo + hi), nxt)
            newly = active & (~converged) & (
                (np.abs(val) <= tol * (1.0 + 1.0 / tau))
                | (np.abs(nxt - mcur) <= 1e-15 * np.maximum(1.0, mcur))
            )
            converged |= newly
            mcur = np.where(active & ~converged, nxt, mcur)
            if converged.all():
                break
        else:
            raise ProxNewtonError(
                f"prox Newton did not converge in {max_newton} iterations",
                cells=np.argwhere(active & ~converged)[:8],
            )
        m = np.where(active, mcur, 0.0)
        if not np.isfinite(m).all():
            raise ProxNewtonError("non-finite prox output (bad scaling?)",
                                  cells=np.argwhere(~np.isfinite(m))[:8])

    s = coef.g * m + tau
    w = m[..., None] * (coef.g[..., None] * w_tilde - tau * z) / s[..., None]
    return m, w


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------


def primal_energy(model: ModelSpec, grid: GridSpec, m, w, support=None) -> float:
    """Midpoint-rule quadrature of  m L(x, w/m) + F(x, m)  over Q.

    +inf whenever a cell carries momentum without mass; `support` restricts
    that infinity branch (iterate histories where stray face noise off the
    density support is algorithmic, not physical).
    """
    coef = GridCoefficients.build(model, grid)
    mc = G.time_node_to_cell(np.asarray(m, dtype=float))
    wc = np.stack(G.interp_face_to_center(grid, w), axis=-1)
    cell = coef.perspective(mc, wc, support=support) + coef.F(mc)
    return float(cell.sum() * grid.cell_volume)


def kinetic_energy(model: ModelSpec, grid: GridSpec, m, w, support=None) -> float:
    """Quadrature of the action part m L(x, w/m) alone."""
    coef = GridCoefficients.build(model, grid)
    mc = G.time_node_to_cell(np.asarray(m, dtype=float))
    wc = np.stack(G.interp_face_to_center(grid, w), axis=-1)
    return float(coef.perspective(mc, wc, support=support).sum() * grid.cell_volume)


# ---------------------------------------------------------------------------
# initial flows
# ---------------------------------------------------------------------------


def initialize_flow(strategy: str, grid: GridSpec, m0, m1, heat_time: float = 0.02):
    """Feasible starting pair (zero continuity residual, endpoints exact).

    linear-blend     m_t = (1-t) m0 + t m1.
    displacement     quantile displacement interpolation (d = 1 only).
    heat-connector   blend of heat-flowed endpoints, mass preserving.
    The momentum is reconstructed slice by slice from d_t m, so every
    strategy returns an exactly feasible pair.
    """
    m0 = np.asarray(m0, dtype=float)
    m1 = np.asarray(m1, dtype=float)
    vol = grid.dx**grid.d
    if abs(np.sum(m0) * vol - np.sum(m1) * vol) > 1e-12:
        raise MassMismatchError("endpoint masses differ")
    ts = grid.t_nodes
    if strategy == "linear-blend":
        m = (1 - ts)[:, None] * m0.reshape(1, -1) + ts[:, None] * m1.reshape(1, -1)
        m = m.reshape(grid.density_shape())
    elif strategy == "displacement":
        if grid.d != 1:
            raise UnsupportedStrategyError("displacement initialization needs d = 1")
        from .metrics import displacement_interpolation_1d

        m = np.empty(grid.density_shape())
        for k, t in enumerate(ts):
            m[k] = displacement_interpolation_1d(grid, m0, m1, float(t))
    elif strategy == "heat-connector":
        from .metrics import heat_connector

        m = np.empty(grid.density_shape())
        for k, t in enumerate(ts):
            s0 = heat_time * t
            s1 = heat_time * (1.0 - t)
            a = heat_connector(grid, m0, s0) if s0 > 0 else m0
            b = heat_connector(grid, m1, s1) if s1 > 0 else m1
            m[k] = (1 - t) * a + t * b
    else:
        raise UnsupportedStrategyError(f"unknown strategy {strategy!r}")
    # renormalize slices so the momentum reconstruction is compatible;
    # skipped at rounding level to keep lattice-shift equivariance exact
    masses = m.reshape(grid.nt + 1, -1).sum(axis=1) * vol
    target = float(np.sum(m0) * vol)
    if np.abs(masses - target).max() > 1e-13:
        m = m * (target / masses).reshape((-1,) + (1,) * grid.d)
    m[0] = m0
    m[-1] = m1
    w = G.momentum_from_density_path(grid, m)
    return m, w


def recover_velocity(grid: GridSpec, m, w, floor: float):
    """v = w/m on cells with centered density above the floor; 0 elsewhere.

    Returns (v, mask); masked cells are excluded from every density-weighted
    diagnostic downstream.
    """
    if floor < 0:
        raise DomainError("density floor must be nonnegative")
    mc = G.time_node_to_cell(np.asarray(m, dtype=float))
    wc = np.stack(G.interp_face_to_center(grid, w), axis=-1)
    mask = mc > floor
    safe = np.where(mask, mc, 1.0)
    v = np.where(mask[..., None], wc / safe[..., None], 0.0)
    return v, mask


# ---------------------------------------------------------------------------
# coupling-operator norms (pdhg stability condition)
# ---------------------------------------------------------------------------


def continuity_norm(grid: GridSpec) -> float:
    """Exact spectral norm of the pinned-endpoint continuity operator."""
    lam_t = (4.0 / grid.dt**2) * np.sin(np.pi * (grid.nt - 1) / (2 * grid.nt)) ** 2
    lam_x = (4.0 / grid.dx**2) * np.sin(np.pi * (grid.nx - 1) / (2 * grid.nx)) ** 2
    return float(np.sqrt(lam_t + grid.d * lam_x))


def _apply_K(grid, z_m, z_w, rho):
    mc = G.time_node_to_cell(z_m)
    wc = G.interp_face_to_center(grid, z_w)
    r = G.time_derivative(grid, z_m) + G.divergence(grid, z_w)
    return mc, wc, -rho * r


def _apply_Kt(grid, y_m, y_w, y_u, rho):
    zm = G.time_cell_to_node(grid, y_m) - rho * G.time_derivative_adjoint(grid, y_u)
    back = G.interp_center_to_face(grid, y_w)
    corr = G.divergence_adjoint(grid, y_u)
    zw = tuple(b - rho * c for b, c in zip(back, corr))
    return zm, zw


def _pin(grid, z_m, z_w, m0, m1, clip=True):
    if clip:
        np.maximum(z_m, 0.0, out=z_m)
    z_m[0] = m0
    z_m[-1] = m1
    for j, comp in enumerate(z_w):
        sl0 = [slice(None)] * (1 + grid.d)
        sl1 = [slice(None)] * (1 + grid.d)
        sl0[1 + j] = 0
        sl1[1 + j] = -1
        comp[tuple(sl0)] = 0.0
        comp[tuple(sl1)] = 0.0


def estimate_K_norm(grid: GridSpec, rho: float, iters: int = 50) -> float:
    """Power iteration (deterministic seed) for the stacked operator
    [staggered-to-centered interpolation; -rho * continuity]."""
    zeros = np.zeros(grid.space_shape)
    z_m = np.random.default_rng(0).standard_normal(grid.density_shape())
    z_w = tuple(np.random.default_rng(j + 1).standard_normal(sh)
                for j, sh in enumerate(grid.momentum_shapes()))
    _pin(grid, z_m, list(z_w), zeros, zeros, clip=False)
    norm = 1.0
    for _ in range(iters):
        y_m, y_w, y_u = _apply_K(grid, z_m, z_w, rho)
        z_m, z_w = _apply_Kt(grid, y_m, y_w, y_u, rho)
        _pin(grid, z_m, list(z_w), zeros, zeros, clip=False)
        norm = np.sqrt(np.sum(z_m**2) + sum(np.sum(c**2) for c in z_w))
        if norm == 0:
            return 1.0
        z_m = z_m / norm
        z_w = tuple(c / norm for c in z_w)
    return float(np.sqrt(norm))


# ---------------------------------------------------------------------------
# alg2 engine: operators and the conjugate cell solve
# ---------------------------------------------------------------------------


class _PotentialOperators:
    """Coupling operator between the node potential and cell-collocated
    gradients, with the exact mixed-cosine-basis inverse of its Gram."""

    def __init__(self, grid: GridSpec):
        self.grid = grid
        nt, nx = grid.nt, grid.nx
        qt = np.arange(nt + 1)
        lam_t = (4.0 / grid.dt**2) * np.sin(np.pi * qt / (2 * nt)) ** 2
        c2 = np.cos(np.pi * qt / (2 * nt)) ** 2
        nu = (np.sin(np.pi * np.arange(nx) / nx) / grid.dx) ** 2
        sym = np.zeros((nt + 1,) + grid.space_shape)
        sym += lam_t.reshape((-1,) + (1,) * grid.d)
        for ax in range(grid.d):
            sh = [1] * (1 + grid.d)
            sh[1 + ax] = -1
            sym += c2.reshape((-1,) + (1,) * grid.d) * nu.reshape(sh)
        self.symbol = sym
        self.symbol[(0,) * (1 + grid.d)] = 1.0
        self.end_weight = np.ones(nt + 1)
        self.end_weight[0] = self.end_weight[-1] = 0.5

    def d_t(self, phi):
        return np.diff(phi, axis=0) / self.grid.dt

    def a_t(self, phi):
        return 0.5 * (phi[:-1] + phi[1:])

    def s_x(self, c):
        """Filtered centered spatial gradient per axis: face difference
        averaged back to cells, reflecting (zero) boundary faces."""
        grid = self.grid
        out = []
        for ax in range(grid.d):
            a = 1 + ax
            f = np.diff(c, axis=a) / grid.dx
            comp = np.zeros_like(c)
            sl_lo = [slice(None)] * c.ndim
            sl_hi = [slice(None)] * c.ndim
            sl_lo[a] = slice(None, -1)
            sl_hi[a] = slice(1, None)
            comp[tuple(sl_lo)] += 0.5 * f
            comp[tuple(sl_hi)] += 0.5 * f
            out.append(comp)
        return np.stack(out, axis=-1)

    def s_x_T(self, qx):
        grid = self.grid
        out = np.zeros(qx.shape[:-1])
        for ax in range(grid.d):
            c = qx[..., ax]
            a = 1 + ax
            sl_lo = [slice(None)] * c.ndim
            sl_hi = [slice(None)] * c.ndim
            sl_lo[a] = slice(None, -1)
            sl_hi[a] = slice(1, None)
            f = 0.5 * (c[tuple(sl_lo)] + c[tuple(sl_hi)])
            out[tuple(sl_lo)] -= f / grid.dx
            out[tuple(sl_hi)] += f / grid.dx
        return out

    def forward(self, phi):
        """Lambda phi = (time gradient, time-averaged filtered space gradient)."""
        return self.d_t(phi), self.a_t(self.s_x(phi))

    def adjoint(self, qt, qx):
        grid = self.grid
        out = np.zeros((grid.nt + 1,) + grid.space_shape)
        out[:-1] -= qt / grid.dt
        out[1:] += qt / grid.dt
        sx = self.s_x_T(qx)
        out[:-1] += 0.5 * sx
        out[1:] += 0.5 * sx
        return out

    def solve_gram(self, rhs):
        """Solve Lambda^T Lambda phi = rhs (rhs mean-compatible); the zero
        mode of phi is pinned to zero."""
        grid = self.grid
        r2 = rhs / self.end_weight.reshape((-1,) + (1,) * grid.d)
        rh = dct(r2, type=1, axis=0)
        for ax in range(grid.d):
            rh = dct(rh, type=2, axis=1 + ax, norm="ortho")
        rh /= self.symbol
        rh[(0,) * (1 + grid.d)] = 0.0
        for ax in range(grid.d):
            rh = idct(rh, type=2, axis=1 + ax, norm="ortho")
        return idct(rh, type=1, axis=0)


def prox_conjugate_cell(coef: GridCoefficients, abar, bbar, r: float,
                        max_newton: int = 100, tol: float = 1e-12):
    """Cellwise minimizer of  F*(x, -q_t + H(x, q_x)) + (r/2)|q - (abar,bbar)|^2.

    Reduces to a monotone scalar equation for the local density estimate
    mu = (F*)'(s); returns (q_t, q_x, mu, s).  mu is exactly zero on the
    vacuum branch s <= f(x, 0).
    """
    g = coef.g
    z = coef.z
    p, q = coef.p, coef.q
    cst = coef.a ** (-q / p)

    def H(b):
        return 0.5 * g * np.sum(b * b, axis=-1) + b @ z - coef.V_H

    def fstar_prime(s):
        return cst * np.maximum(s - coef.V_f, 0.0) ** (q - 1.0)

    s0 = -abar + H(bbar)
    mu0 = fstar_prime(s0)
    active = mu0 > 0.0
    mu = np.zeros_like(abar)
    if active.any():
        lo = np.zeros_like(abar)
        hi = mu0 + 1.0
        mu = np.where(active, 0.5 * hi, 0.0)
        converged = ~active
        for _ in range(max_newton):
            shrink = 1.0 + mu * g / r
            qx = (bbar - (mu / r)[..., None] * z) / shrink[..., None]
            s = -abar - mu / r + H(qx)
            val = mu - fstar_prime(s)
            lo = np.where(active & (val < 0), mu, lo)
            hi = np.where(active & (val > 0), mu, hi)
            hp = g[..., None] * qx + z
            dsdmu = -1.0 / r - np.sum(hp * hp, axis=-1) / (r * shrink)
            pos = np.maximum(s - coef.V_f, 0.0)
            if q == 2.0:
                curv = np.where(pos > 0, cst, 0.0)
            else:
                curv = cst * (q - 1.0) * np.maximum(pos, 1e-300) ** (q - 2.0)
                curv = np.where(pos > 0, curv, 0.0)
            dval = 1.0 - curv * dsdmu
            nxt = mu - val / dval
            outside = (nxt <= lo) | (nxt >= hi)
            nxt = np.where(outside, 0.5 * (lo + hi), nxt)
            newly = active & ~converged & (
                (np.abs(val) <= tol * (1.0 + np.abs(mu)))
                | (np.abs(nxt - mu) <= 1e-15 * np.maximum(1.0, mu))
            )
            converged |= newly
            mu = np.where(active & ~converged, nxt, mu)
            if converged.all():
                break
        else:
            raise ProxNewtonError(
                f"conjugate cell solve did not converge in {max_newton} iterations",
                cells=np.argwhere(active & ~converged)[:8],
            )
        mu = np.where(active, np.maximum(mu, 0.0), 0.0)
    shrink = 1.0 + mu * g / r
    qx = (bbar - (mu / r)[..., None] * z) / shrink[..., None]
    qt = abar + mu / r
    s = -abar - mu / r + H(qx)
    return qt, qx, mu, s


# ---------------------------------------------------------------------------
# the solver
# ---------------------------------------------------------------------------


def solve_planning(model: ModelSpec, grid: GridSpec, m0, m1,
                   config: SolverConfig | None = None) -> Solution:
    """Minimize the discrete action-entropy functional over flows joining m0
    to m1 and assemble the dual pair from the splitting's own multiplier."""
    config = config or SolverConfig()
    m0 = np.asarray(m0, dtype=float).reshape(grid.space_shape)
    m1 = np.asarray(m1, dtype=float).reshape(grid.space_shape)
    vol = grid.dx**grid.d
    if abs(np.sum(m0) * vol - np.sum(m1) * vol) > 1e-10:
        raise MassMismatchError(
            f"endpoint masses {np.sum(m0) * vol:.15f} vs {np.sum(m1) * vol:.15f}"
        )
    if model.d != grid.d:
        raise DomainError(f"model dimension {model.d} != grid dimension {grid.d}")
    if config.algorithm == "alg2":
        return _solve_alg2(model, grid, m0, m1, config)
    return _solve_pdhg(model, grid, m0, m1, config)


def _history_push(hist, it, b_val, a_val, res_primal, res_dual, res_cont):
    gap = b_val - a_val
    hist.iteration.append(it)
    hist.b.append(b_val)
    hist.a.append(a_val)
    hist.gap.append(gap)
    hist.rel_gap.append(gap / max(1.0, abs(b_val)))
    hist.primal_residual.append(res_primal)
    hist.dual_residual.append(res_dual)
    hist.continuity_residual.append(res_cont)


def _solve_alg2(model, grid, m0, m1, config) -> Solution:
    t_start = time.perf_counter()
    coef = GridCoefficients.build(model, grid)
    ops = _PotentialOperators(grid)
    omega = grid.cell_volume
    r = config.penalty
    relax = 1.0 + 0.8 * config.theta
    nt = grid.nt

    # multiplier warm start: the initial feasible flow (with reversed sign,
    # matching the constraint orientation of the augmented Lagrangian)
    m_init, w_init = initialize_flow(config.init_strategy, grid, m0, m1)
    sigma_t = -G.time_node_to_cell(m_init)
    sigma_x = -np.stack(G.interp_face_to_center(grid, w_init), axis=-1)

    phi = np.zeros((nt + 1,) + grid.space_shape)
    q_t = np.zeros(grid.scalar_shape())
    q_x = np.zeros(grid.scalar_shape() + (grid.d,))
    mu = -sigma_t.copy()
    b_vec = np.zeros_like(phi)
    b_vec[0] = m0 / (r * grid.dt)
    b_vec[-1] = -m1 / (r * grid.dt)

    hist = History()
    stop_reason = "max_iters"
    converged = False
    it = 0
    scale = 1.0 + float(np.abs(m0).max())

    for it in range(1, config.max_iters + 1):
        rhs = ops.adjoint(q_t - sigma_t / r, q_x - sigma_x / r) + b_vec
        phi = ops.solve_gram(rhs)
        lt, lx = ops.forward(phi)
        xt = relax * lt + (1.0 - relax) * q_t
        xx = relax * lx + (1.0 - relax) * q_x
        q_t_new, q_x_new, mu, s = prox_conjugate_cell(
            coef, xt + sigma_t / r, xx + sigma_x / r, r)
        sigma_t = sigma_t + r * (xt - q_t_new)
        sigma_x = sigma_x + r * (xx - q_x_new)
        dq = np.sqrt(np.sum((q_t_new - q_t) ** 2) + np.sum((q_x_new - q_x) ** 2))
        q_t, q_x = q_t_new, q_x_new

        if it % config.history_every == 0 or it == config.max_iters:
            v = -(coef.g[..., None] * q_x + coef.z)
            w_c = mu[..., None] * v
            lag = 0.5 * np.sum((v + coef.z) ** 2, axis=-1) / coef.g + coef.V_H
            b_val = float(((lag * mu) + coef.F(mu)).sum() * omega)
            alpha = np.maximum(coef.f(mu), coef.f(np.zeros_like(mu)))
            u_cells = ops.a_t(phi)
            a_val = _dual.dual_energy_arrays(coef, grid, u_cells, alpha, m0, m1)
            res_primal = float(np.sqrt(np.sum((lt - q_t) ** 2)
                                       + np.sum((lx - q_x) ** 2))) / scale
            res_dual = float(r * dq) / scale
            # weak-form continuity residual of the running multiplier flow:
            # interior rows of Lambda^T sigma vanish at the saddle point
            weak = ops.adjoint(sigma_t, sigma_x)
            res_cont = float(np.abs(weak[1:-1]).max()) if nt > 1 else 0.0
            _history_push(hist, it, b_val, a_val, res_primal, res_dual, res_cont)
            if not np.isfinite(b_val):
                raise ProxNewtonError("primal energy became non-finite (bad scaling?)")
            if (abs(hist.rel_gap[-1]) <= config.stop_gap
                    and max(res_primal, res_dual) <= config.stop_residual):
                converged = True
                stop_reason = "gap"
                break

    # assemble the staggered flow: nonnegative node density interpolated
    # from the multiplier flow, flux corrected exactly per slice so the
    # residual sits at rounding level without touching the density
    v = -(coef.g[..., None] * q_x + coef.z)
    w_c = mu[..., None] * v
    m_st = np.empty(grid.density_shape())
    m_st[0] = m0
    m_st[-1] = m1
    m_st[1:-1] = np.maximum(0.5 * (mu[:-1] + mu[1:]), 0.0)
    vol = grid.dx**grid.d
    masses = m_st.reshape(grid.nt + 1, -1).sum(axis=1) * vol
    m_st = m_st / (masses / masses[0]).reshape((-1,) + (1,) * grid.d)
    m_st[0] = m0
    m_st[-1] = m1
    if grid.d == 1:
        # in one dimension the no-flux flux is determined by the density path
        w_st = G.momentum_from_density_path(grid, m_st)
    else:
        w_st = _faces_from_centered(grid, w_c)
        resid = G.continuity_residual(m_st, w_st, grid)
        corr = G.flux_correction(grid, resid)
        w_st = tuple(a + b for a, b in zip(w_st, corr))

    floor = config.density_floor
    if floor is None:
        floor = 1e-8 * float(m_st.max())
    v_rec, mask = recover_velocity(grid, m_st, w_st, floor)

    sol = Solution(
        grid=grid, model=model, m=m_st, w=tuple(w_st),
        v=v_rec, v_mask=mask,
        u=np.zeros(grid.scalar_shape()), alpha=np.zeros(grid.scalar_shape()),
        multiplier=ops.a_t(phi), multiplier_scale=1.0,
        history=hist, config=config, density_floor=floor,
        iterations=it, converged=converged, stop_reason=stop_reason,
        wall_time=time.perf_counter() - t_start,
        potential_nodes=phi,
    )
    sol.u, sol.alpha = _dual.recover_dual(model, sol)
    return sol


def _faces_from_centered(grid, w_c):
    out = []
    for j in range(grid.d):
        comp = np.zeros(grid.momentum_shapes()[j])
        c = w_c[..., j]
        sl = [slice(None)] * (1 + grid.d)
        sl[1 + j] = slice(1, -1)
        lo = [slice(None)] * (1 + grid.d)
        hi = [slice(None)] * (1 + grid.d)
        lo[1 + j] = slice(None, -1)
        hi[1 + j] = slice(1, None)
        comp[tuple(sl)] = 0.5 * (c[tuple(lo)] + c[tuple(hi)])
        out.append(comp)
    return tuple(out)


def _solve_pdhg(model, grid, m0, m1, config) -> Solution:
    t_start = time.perf_counter()
    coef = GridCoefficients.build(model, grid)
    omega = grid.cell_volume
    rho = 1.0 / continuity_norm(grid)
    k_norm = estimate_K_norm(grid, rho, config.power_iters)
    tau = config.tau_primal if config.tau_primal is not None else 0.95 / k_norm
    sigma = config.tau_dual if config.tau_dual is not None else 0.95 / k_norm
    if tau * sigma * k_norm**2 >= 1.0 + 1e-9:
        raise StepSizeError(f"tau*sigma*||K||^2 = {tau * sigma * k_norm**2:.4f} >= 1")
    theta = config.theta

    z_m, z_w = initialize_flow(config.init_strategy, grid, m0, m1)
    z_w = tuple(np.array(c) for c in z_w)
    zb_m, zb_w = z_m.copy(), tuple(c.copy() for c in z_w)
    y_m = np.zeros(grid.scalar_shape())
    y_w = tuple(np.zeros(grid.scalar_shape()) for _ in range(grid.d))
    u = np.zeros(grid.scalar_shape())

    hist = History()
    tau_prox = omega / sigma
    stop_reason = "max_iters"
    converged = False
    it = 0

    for it in range(1, config.max_iters + 1):
        mc_bar = G.time_node_to_cell(zb_m)
        wc_bar = G.interp_face_to_center(grid, zb_w)
        xi_m = y_m + sigma * mc_bar
        xi_w = np.stack([yc + sigma * wb for yc, wb in zip(y_w, wc_bar)], axis=-1)
        pm, pw = prox_action(coef, grid, xi_m / sigma, xi_w / sigma, tau_prox)
        y_m = xi_m - sigma * pm
        y_w = tuple(xi_w[..., j] - sigma * pw[..., j] for j in range(grid.d))
        u = u - sigma * rho * G.continuity_residual(zb_m, zb_w, grid)

        zm_old, zw_old = z_m, z_w
        gm, gw = _apply_Kt(grid, y_m, y_w, u, rho)
        z_m = z_m - tau * gm
        z_w = tuple(c - tau * gc for c, gc in zip(z_w, gw))
        _pin(grid, z_m, z_w, m0, m1, clip=True)
        zb_m = z_m + theta * (z_m - zm_old)
        zb_w = tuple(c + theta * (c - co) for c, co in zip(z_w, zw_old))

        if it % config.history_every == 0 or it == config.max_iters:
            mc = G.time_node_to_cell(z_m)
            b_val = primal_energy(model, grid, z_m, z_w, support=mc > 0)
            alpha = np.maximum(coef.f(mc), coef.f(np.zeros_like(mc)))
            a_val = _dual.dual_energy_arrays(coef, grid, (rho / omega) * u,
                                             alpha, m0, m1)
            res_cont = float(np.abs(G.continuity_residual(z_m, z_w, grid)).max())
            dp = np.sqrt(np.sum((z_m - zm_old) ** 2)
                         + sum(np.sum((c - co) ** 2) for c, co in zip(z_w, zw_old)))
            scale_z = 1.0 + np.sqrt(np.sum(z_m**2) + sum(np.sum(c**2) for c in z_w))
            fp_res = float(dp / (tau * scale_z))
            _history_push(hist, it, b_val, a_val, fp_res, fp_res, res_cont)
            if not np.isfinite(b_val):
                raise ProxNewtonError("primal energy became non-finite (bad scaling?)")
            if (abs(hist.rel_gap[-1]) <= config.stop_gap
                    and fp_res <= config.stop_residual):
                converged = True
                stop_reason = "gap"
                break

    floor = config.density_floor
    if floor is None:
        floor = 1e-8 * float(z_m.max())
    v, mask = recover_velocity(grid, z_m, z_w, floor)

    sol = Solution(
        grid=grid, model=model, m=z_m, w=tuple(z_w),
        v=v, v_mask=mask,
        u=np.zeros(grid.scalar_shape()), alpha=np.zeros(grid.scalar_shape()),
        multiplier=u, multiplier_scale=rho / omega,
        history=hist, config=config, density_floor=floor,
        iterations=it, converged=converged, stop_reason=stop_reason,
        wall_time=time.perf_counter() - t_start,
    )
    sol.u, sol.alpha = _dual.recover_dual(model, sol)
    return sol


# ---------------------------------------------------------------------------
# a-priori sanity report
# ---------------------------------------------------------------------------


def apriori_check(model: ModelSpec, sol: Solution) -> dict:
    """Discrete counterparts of the coercivity estimates.

    Reports the action integral, the L^{2p/(p+1)} momentum norm with its
    Hoelder ceiling  ||m v|| <= ||m||_p^{1/2} (int |v|^2 m)^{1/2},  and the
    per-slice second moments against the structural ceiling built from the
    instance constants.
    """
    grid = sol.grid
    p = model.p_exponent
    mc = sol.centered_density()
    wc = sol.centered_momentum()
    vol = grid.cell_volume
    mask = sol.v_mask
    vsq_m = np.where(mask, np.sum(sol.v**2, axis=-1) * mc, 0.0)
    action = float((vsq_m + np.maximum(mc, 0.0) ** p).sum() * vol)
    rexp = 2 * p / (p + 1)
    w_norm = float((np.linalg.norm(wc, axis=-1) ** rexp).sum() * vol) ** (1 / rexp)
    m_p = float((np.maximum(mc, 0.0) ** p).sum() * vol) ** (1 / p)
    holder_rhs = float(np.sqrt(m_p) * np.sqrt(vsq_m.sum() * vol))

    norms = G.weighted_norms(grid, sol.m, p=p)
    moments = norms["moment"]
    b_val = sol.history.b[-1] if sol.history.b else primal_energy(
        model, grid, sol.m, sol.w, support=mc > 0)
    vf_lo, vf_hi = model.V_f.bounds()
    gamma_f = max(abs(vf_lo), abs(vf_hi))
    area = (2 * grid.R) ** grid.d
    gamma_f_q = gamma_f * area ** (1.0 / model.q_exponent)
    c_big_f = (2 * model.c_f * max(gamma_f_q, 1e-300)) ** model.q_exponent \
        / model.q_exponent
    c3 = c_big_f + 0.5 * model.c_H_plus**2
    ceiling = 1.0 + np.e * np.sqrt(
        moments[0] + moments[-1] + 2 * model.c_H * (c3 + max(b_val, 0.0)))
    mt = 1.0 + np.sqrt(moments)
    return {
        "action_integral": action,
        "momentum_norm_2p_over_p1": w_norm,
        "holder_lhs": w_norm,
        "holder_rhs": holder_rhs,
        "holder_ok": bool(w_norm <= holder_rhs + 1e-9),
        "slice_moments": moments,
        "moment_ceiling": float(ceiling),
        "moments_bounded": bool(np.all(mt <= ceiling)),
        "finite": bool(np.isfinite(action)),
    }

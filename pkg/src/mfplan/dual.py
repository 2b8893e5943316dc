"""Dual pair assembly and optimality certificates.

Given a converged primal flow and the splitting multiplier, this module
builds the Hamilton-Jacobi pair (u, alpha), evaluates the dual functional

    A(u, alpha) = int u(0) m0 - int u(1) m1 - int F*(x, alpha),

and produces the certificate report: duality gap, the two Fenchel-gap
integrals, the positive-part Hamilton-Jacobi residual, and the defect mass,
which by construction closes the identity

    gap = defect_mass + int Y_H m + int Y_F.

Discrete traces at t = 0, 1 are the first/last time slices of u; the grid
multiplier is everywhere defined so no continuum trace machinery is needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import grid as G
from .grid import GridSpec
from .model import GridCoefficients, ModelSpec


@dataclass
class DiagnosticsReport:
    b: float
    a: float
    gap: float
    rel_gap: float
    yh_integral: float
    yf_integral: float
    hj_violation: float
    hj_violation_support: float
    defect_mass: float
    identity_residual: float
    continuity_residual_max: float
    mass_drift_max: float
    boundary_mass_max: float
    per_slice: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "b", "a", "gap", "rel_gap", "yh_integral", "yf_integral",
            "hj_violation", "hj_violation_support", "defect_mass",
            "identity_residual", "continuity_residual_max", "mass_drift_max",
            "boundary_mass_max")}
        out["per_slice"] = {k: list(map(float, v)) for k, v in self.per_slice.items()}
        return out

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)
            fh.write("\n")


def recover_dual(model: ModelSpec, sol) -> tuple:
    """Assemble (u, alpha) from a converged solution.

    alpha is the coupling value f(x, m) on cells, clamped from below by
    f(x, 0) so the conjugate term never pays for values it can reach for
    free.  u is the accumulated constraint multiplier scaled back to
    physical units and shifted so that int u(1) m1 = 0.
    """
    grid = sol.grid
    coef = GridCoefficients.build(model, grid)
    mc = G.time_node_to_cell(sol.m)
    alpha = np.maximum(coef.f(np.maximum(mc, 0.0)), coef.f(np.zeros_like(mc)))
    u = sol.multiplier_scale * sol.multiplier
    vol = grid.dx**grid.d
    shift = float(np.sum(u[-1] * sol.m[-1]) * vol)
    mass1 = float(np.sum(sol.m[-1]) * vol)
    u = u - shift / mass1
    return u, alpha


def dual_energy_arrays(coef: GridCoefficients, grid: GridSpec, u, alpha,
                       m0, m1) -> float:
    vol = grid.dx**grid.d
    endpoint = float(np.sum(u[0] * m0) * vol - np.sum(u[-1] * m1) * vol)
    fstar = float(coef.F_star(alpha).sum() * grid.cell_volume)
    return endpoint - fstar


def dual_energy(model: ModelSpec, grid: GridSpec, u, alpha, m0, m1) -> float:
    """A(u, alpha) with the first/last time slices of u as the traces."""
    coef = GridCoefficients.build(model, grid)
    return dual_energy_arrays(coef, grid, u, alpha, m0, m1)


def _space_gradient(grid: GridSpec, u: np.ndarray) -> np.ndarray:
    """Centered spatial differences of a cell field, second-order one-sided
    at the box boundary; shape (nt, nx^d, d)."""
    comps = []
    for j in range(grid.d):
        ax = 1 + j
        out = np.gradient(u, grid.dx, axis=ax, edge_order=2)
        comps.append(out)
    return np.stack(comps, axis=-1)


def _time_derivative_cells(grid: GridSpec, u: np.ndarray) -> np.ndarray:
    """Centered time differences of a cell field, second-order one-sided at
    the first/last slices (first-order on grids too coarse for that)."""
    order = 2 if grid.nt >= 3 else 1
    return np.gradient(u, grid.dt, axis=0, edge_order=order)


def hj_residual(model: ModelSpec, grid: GridSpec, u, alpha) -> np.ndarray:
    """Positive part of  -d_t u + H(x, Du) - alpha  per space-time cell."""
    coef = GridCoefficients.build(model, grid)
    du = _space_gradient(grid, u)
    ut = _time_derivative_cells(grid, u)
    lhs = -ut + coef.hamiltonian_cells(du) - alpha
    return np.maximum(lhs, 0.0)


def duality_report(model: ModelSpec, sol, m0=None, m1=None) -> DiagnosticsReport:
    """Full certificate report for a solution.

    defect_mass is the remainder gap - int Y_H m - int Y_F; the assertion
    that re-adding the three pieces reproduces the gap guards implementation
    drift rather than carrying mathematical content.
    """
    grid = sol.grid
    coef = GridCoefficients.build(model, grid)
    m0 = sol.m[0] if m0 is None else np.asarray(m0, dtype=float)
    m1 = sol.m[-1] if m1 is None else np.asarray(m1, dtype=float)
    mc = G.time_node_to_cell(sol.m)
    wc = np.stack(G.interp_face_to_center(grid, sol.w), axis=-1)
    # kinetic terms on cells below the density floor are excluded, per the
    # velocity-mask contract; F(m) is evaluated everywhere
    mask = sol.v_mask
    support = mc > 0
    vol_q = grid.cell_volume

    kinetic = np.where(mask, coef.perspective(mc, wc, support=support), 0.0)
    b_val = float((kinetic + coef.F(mc)).sum() * vol_q)
    a_val = dual_energy_arrays(coef, grid, sol.u, sol.alpha, m0, m1)
    gap = b_val - a_val
    rel_gap = gap / max(1.0, abs(b_val))

    # int Y_H m = int [H m + Du.w + m L(w/m)]; masked cells contribute zero
    du = _space_gradient(grid, sol.u)
    h_cells = coef.hamiltonian_cells(du)
    yh_cells = np.where(
        mask,
        h_cells * mc + np.sum(du * wc, axis=-1) + kinetic,
        0.0,
    )
    yh_integral = float(yh_cells.sum() * vol_q)
    yf_cells = coef.F(mc) - sol.alpha * np.maximum(mc, 0.0) + coef.F_star(sol.alpha)
    yf_integral = float(yf_cells.sum() * vol_q)

    hj = hj_residual(model, grid, sol.u, sol.alpha)
    hj_total = float(hj.sum() * vol_q)
    hj_support = float(np.where(mask, hj, 0.0).sum() * vol_q)

    defect = gap - yh_integral - yf_integral
    identity_residual = abs(defect + yh_integral + yf_integral - gap)
    assert identity_residual <= 1e-9, "defect identity drifted"

    res = G.continuity_residual(sol.m, sol.w, grid)
    norms = G.weighted_norms(grid, sol.m, p=model.p_exponent)
    masses = norms["mass"]
    bmass = G.boundary_mass(grid, sol.m)

    return DiagnosticsReport(
        b=b_val,
        a=a_val,
        gap=gap,
        rel_gap=rel_gap,
        yh_integral=yh_integral,
        yf_integral=yf_integral,
        hj_violation=hj_total,
        hj_violation_support=hj_support,
        defect_mass=defect,
        identity_residual=float(identity_residual),
        continuity_residual_max=float(np.abs(res).max()),
        mass_drift_max=float(np.abs(masses - masses[0]).max()),
        boundary_mass_max=float(bmass.max()),
        per_slice={
            "t": grid.t_nodes,
            "mass": masses,
            "moment": norms["moment"],
            "lp": norms["lp"],
            "boundary_mass": bmass,
        },
    )

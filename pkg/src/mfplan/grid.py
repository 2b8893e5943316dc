"""Staggered space-time grid on (0,1) x [-R,R]^d and its discrete calculus.

Layout (d in {1,2}):
  * densities  m     : time nodes  t_k = k*dt, k=0..nt, cell-centered in space,
                       shape (nt+1, nx, ..).
  * momenta    w     : time cells, face-staggered along their own axis,
                       axis j has nx+1 faces, shape (nt, .., nx+1, ..).
  * scalars  u, alpha: time cells x space cells, shape (nt, nx, ..).

The normal momentum component vanishes on the spatial boundary faces, so the
discrete divergence theorem holds exactly and mass is conserved slice by
slice for any pair with zero continuity residual.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from .errors import MassMismatchError, ShapeMismatchError

# workers handed to scipy.fft by the CLI --threads flag
FFT_WORKERS = 1


@dataclass(frozen=True)
class GridSpec:
    """Space-time discretization of (0,1) x [-R,R]^d."""

    d: int
    nt: int
    nx: int
    R: float

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"d must be 1 or 2, got {self.d}")
        if self.nt < 2 or self.nx < 4:
            raise ValueError("need nt >= 2 and nx >= 4")
        if self.R <= 0:
            raise ValueError("R must be positive")

    @property
    def dt(self) -> float:
        return 1.0 / self.nt

    @property
    def dx(self) -> float:
        return 2.0 * self.R / self.nx

    @property
    def space_shape(self) -> tuple:
        return (self.nx,) * self.d

    @property
    def cell_volume(self) -> float:
        """Space-time cell volume dt * dx^d."""
        return self.dt * self.dx**self.d

    @property
    def x_centers(self) -> np.ndarray:
        return -self.R + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def t_nodes(self) -> np.ndarray:
        return np.arange(self.nt + 1) * self.dt

    @property
    def t_cells(self) -> np.ndarray:
        return (np.arange(self.nt) + 0.5) * self.dt

    def cell_center_mesh(self) -> list:
        """Coordinate arrays of the spatial cell centers, one per axis."""
        axes = [self.x_centers] * self.d
        return list(np.meshgrid(*axes, indexing="ij")) if self.d > 1 else [self.x_centers]

    def radius_sq(self) -> np.ndarray:
        """|x|^2 sampled at spatial cell centers."""
        mesh = self.cell_center_mesh()
        return sum(c**2 for c in mesh)

    def kappa(self) -> np.ndarray:
        """Quadratic weight 1 + |x|^2 at spatial cell centers (always >= 1)."""
        return 1.0 + self.radius_sq()

    def density_shape(self) -> tuple:
        return (self.nt + 1,) + self.space_shape

    def scalar_shape(self) -> tuple:
        return (self.nt,) + self.space_shape

    def momentum_shapes(self) -> list:
        shapes = []
        for j in range(self.d):
            sh = [self.nt] + [self.nx] * self.d
            sh[1 + j] = self.nx + 1
            shapes.append(tuple(sh))
        return shapes

    def to_json(self) -> dict:
        return {"d": self.d, "nt": self.nt, "nx": self.nx, "R": self.R}

    @staticmethod
    def from_json(obj: dict) -> "GridSpec":
        return GridSpec(d=int(obj["d"]), nt=int(obj["nt"]), nx=int(obj["nx"]), R=float(obj["R"]))


# ---------------------------------------------------------------------------
# field containers
# ---------------------------------------------------------------------------


@dataclass
class DensityField:
    """Nonnegative density on time nodes; unit mass per slice up to solver tol."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.density_shape():
            raise ShapeMismatchError(
                f"density shape {self.values.shape} != {self.grid.density_shape()}"
            )

    def slice_masses(self) -> np.ndarray:
        vol = self.grid.dx**self.grid.d
        return self.values.reshape(self.grid.nt + 1, -1).sum(axis=1) * vol


@dataclass
class MomentumField:
    """Face-staggered momentum w = m*v; normal component zero on the boundary."""

    grid: GridSpec
    components: tuple

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float) for c in self.components)
        shapes = self.grid.momentum_shapes()
        if len(comps) != self.grid.d:
            raise ShapeMismatchError(f"expected {self.grid.d} components, got {len(comps)}")
        for j, (c, sh) in enumerate(zip(comps, shapes)):
            if c.shape != sh:
                raise ShapeMismatchError(f"momentum component {j} shape {c.shape} != {sh}")
        self.components = comps

    def boundary_flux_max(self) -> float:
        worst = 0.0
        for j, c in enumerate(self.components):
            first = np.take(c, 0, axis=1 + j)
            last = np.take(c, -1, axis=1 + j)
            worst = max(worst, np.abs(first).max(), np.abs(last).max())
        return worst


@dataclass
class ScalarField:
    """Cell-centered scalar on the nt x nx^d space-time lattice (u, alpha, ...)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.scalar_shape():
            raise ShapeMismatchError(
                f"scalar shape {self.values.shape} != {self.grid.scalar_shape()}"
            )


def zero_momentum(grid: GridSpec) -> tuple:
    return tuple(np.zeros(sh) for sh in grid.momentum_shapes())


# ---------------------------------------------------------------------------
# discrete differential operators
# ---------------------------------------------------------------------------


def time_derivative(grid: GridSpec, m: np.ndarray) -> np.ndarray:
    """Forward difference of a node-centered density, landing on time cells."""
    return np.diff(m, axis=0) / grid.dt


def divergence(grid: GridSpec, w: tuple) -> np.ndarray:
    out = np.zeros(grid.scalar_shape())
    for j, comp in enumerate(w):
        out += np.diff(comp, axis=1 + j) / grid.dx
    return out


def time_derivative_adjoint(grid: GridSpec, u: np.ndarray) -> np.ndarray:
    """Adjoint of time_derivative on interior nodes; zero rows at the pinned ends."""
    out = np.zeros(grid.density_shape())
    out[1:-1] = (u[:-1] - u[1:]) / grid.dt
    return out


def divergence_adjoint(grid: GridSpec, u: np.ndarray) -> tuple:
    """Adjoint of the divergence on interior faces; boundary faces stay zero."""
    out = []
    for j in range(grid.d):
        comp = np.zeros(grid.momentum_shapes()[j])
        sl = [slice(None)] * (1 + grid.d)
        sl[1 + j] = slice(1, -1)
        lo = [slice(None)] * (1 + grid.d)
        hi = [slice(None)] * (1 + grid.d)
        lo[1 + j] = slice(None, -1)
        hi[1 + j] = slice(1, None)
        comp[tuple(sl)] = (u[tuple(lo)] - u[tuple(hi)]) / grid.dx
        out.append(comp)
    return tuple(out)


def continuity_residual(m, w, grid: GridSpec | None = None) -> np.ndarray:
    """Centered discrete d_t m + div w per space-time cell; linear in (m, w)."""
    if isinstance(m, DensityField):
        grid = m.grid
        m = m.values
    if isinstance(w, MomentumField):
        w = w.components
    if grid is None:
        raise ShapeMismatchError("grid required when passing bare arrays")
    if m.shape != grid.density_shape():
        raise ShapeMismatchError(f"density shape {m.shape} != {grid.density_shape()}")
    for j, comp in enumerate(w):
        if comp.shape != grid.momentum_shapes()[j]:
            raise ShapeMismatchError(f"momentum component {j} has shape {comp.shape}")
    return time_derivative(grid, m) + divergence(grid, w)


# ---------------------------------------------------------------------------
# staggered <-> centered transfer
# ---------------------------------------------------------------------------


def interp_face_to_center(grid: GridSpec, w: tuple) -> tuple:
    """Average each face-staggered component to the cell centers."""
    out = []
    for j, comp in enumerate(w):
        lo = [slice(None)] * (1 + grid.d)
        hi = [slice(None)] * (1 + grid.d)
        lo[1 + j] = slice(None, -1)
        hi[1 + j] = slice(1, None)
        out.append(0.5 * (comp[tuple(lo)] + comp[tuple(hi)]))
    return tuple(out)


def interp_center_to_face(grid: GridSpec, s: tuple) -> tuple:
    """Exact adjoint of interp_face_to_center (boundary faces get half weight)."""
    out = []
    for j, comp in enumerate(s):
        target = np.zeros(grid.momentum_shapes()[j])
        lo = [slice(None)] * (1 + grid.d)
        hi = [slice(None)] * (1 + grid.d)
        lo[1 + j] = slice(None, -1)
        hi[1 + j] = slice(1, None)
        target[tuple(hi)] += 0.5 * comp
        target[tuple(lo)] += 0.5 * comp
        out.append(target)
    return tuple(out)


def time_node_to_cell(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m[:-1] + m[1:])


def time_cell_to_node(grid: GridSpec, y: np.ndarray) -> np.ndarray:
    """Adjoint of time_node_to_cell."""
    out = np.zeros(grid.density_shape())
    out[:-1] += 0.5 * y
    out[1:] += 0.5 * y
    return out


# ---------------------------------------------------------------------------
# exact projection onto the discrete continuity constraint
# ---------------------------------------------------------------------------


def _neumann_eigenvalues(n: int, h: float) -> np.ndarray:
    q = np.arange(n)
    return (4.0 / h**2) * np.sin(np.pi * q / (2 * n)) ** 2


def poisson_solve_neumann(grid: GridSpec, rhs: np.ndarray) -> np.ndarray:
    """Solve the space-time Neumann Laplacian L phi = rhs by cosine transforms.

    The mean of rhs must vanish (compatibility); the zero mode of phi is set
    to zero.  L is D_t D_t^T + div div^T for the pinned-endpoint layout, which
    is the reflecting 3-point Laplacian in every axis.
    """
    lam_t = _neumann_eigenvalues(grid.nt, grid.dt)
    lams = [lam_t] + [_neumann_eigenvalues(grid.nx, grid.dx)] * grid.d
    shape = [1] * (1 + grid.d)
    denom = np.zeros(grid.scalar_shape())
    for ax, lam in enumerate(lams):
        sh = list(shape)
        sh[ax] = -1
        denom = denom + lam.reshape(sh)
    rhat = dctn(rhs, type=2, norm="ortho", workers=FFT_WORKERS)
    denom.flat[0] = 1.0  # zero mode handled separately
    phat = rhat / denom
    phat.flat[0] = 0.0
    return idctn(phat, type=2, norm="ortho", workers=FFT_WORKERS)


def project_continuity(grid: GridSpec, m, w, m0, m1, mass_tol: float = 1e-12):
    """Euclidean projection of (m, w) onto the affine continuity set.

    The constraint set pins m(0)=m0, m(1)=m1, zeroes the boundary faces of w
    and imposes d_t m + div w = 0 everywhere.  One cosine-basis Poisson solve
    inverts the normal equations exactly, so the projection is idempotent and
    the output residual sits at the transform's rounding floor.
    """
    vol = grid.dx**grid.d
    mass0 = float(np.sum(m0) * vol)
    mass1 = float(np.sum(m1) * vol)
    if abs(mass0 - mass1) > mass_tol:
        raise MassMismatchError(
            f"endpoint masses differ: {mass0!r} vs {mass1!r} (tol {mass_tol})"
        )
    m = np.array(m, dtype=float, copy=True)
    w = [np.array(c, dtype=float, copy=True) for c in w]
    m[0] = m0
    m[-1] = m1
    for j, comp in enumerate(w):
        sl_first = [slice(None)] * (1 + grid.d)
        sl_last = [slice(None)] * (1 + grid.d)
        sl_first[1 + j] = 0
        sl_last[1 + j] = -1
        comp[tuple(sl_first)] = 0.0
        comp[tuple(sl_last)] = 0.0
    r = continuity_residual(m, tuple(w), grid)
    phi = poisson_solve_neumann(grid, r)
    m -= time_derivative_adjoint(grid, phi)
    corr = divergence_adjoint(grid, phi)
    for comp, c in zip(w, corr):
        comp -= c
    return m, tuple(w)


def flux_correction(grid: GridSpec, r: np.ndarray) -> tuple:
    """Face field dw with div(dw) = -r and zero boundary flux.

    Needs per-slice compatibility sum_x r = 0.  d=1 uses the exact running
    integral; d=2 solves one spatial Neumann Poisson problem per time cell.
    """
    w = zero_momentum(grid)
    if grid.d == 1:
        w[0][:, 1:] = -np.cumsum(r, axis=1) * grid.dx
        w[0][:, -1] = 0.0  # exact once slices are compatible; pin rounding dust
        return w
    lam = _neumann_eigenvalues(grid.nx, grid.dx)
    denom = np.zeros(grid.space_shape)
    for ax in range(grid.d):
        sh = [1] * grid.d
        sh[ax] = -1
        denom = denom + lam.reshape(sh)
    denom_safe = denom.copy()
    denom_safe.flat[0] = 1.0
    rhat = dctn(r, type=2, norm="ortho", axes=tuple(range(1, 1 + grid.d)),
                workers=FFT_WORKERS)
    rhat = rhat / denom_safe
    zero_sl = (slice(None),) + (0,) * grid.d
    rhat[zero_sl] = 0.0
    psi = idctn(rhat, type=2, norm="ortho", axes=tuple(range(1, 1 + grid.d)),
                workers=FFT_WORKERS)
    corr = divergence_adjoint(grid, psi)
    for comp, c in zip(w, corr):
        comp -= c
    return w


def momentum_from_density_path(grid: GridSpec, m: np.ndarray) -> tuple:
    """Build w with d_t m + div w = 0 exactly, without touching m.

    Requires every slice of m to carry the same mass (per-slice
    compatibility)."""
    return flux_correction(grid, time_derivative(grid, m))


# ---------------------------------------------------------------------------
# norms and diagnostics
# ---------------------------------------------------------------------------


def weighted_norms(grid: GridSpec, m: np.ndarray, p: float = 2.0) -> dict:
    """Discrete L^1_kappa, L^p and quadratic-moment norms, per slice and on Q.

    Slice integrals use the spatial midpoint rule; the Q aggregates weight the
    time nodes with the trapezoid rule so endpoints count half.
    """
    if m.shape != grid.density_shape():
        raise ShapeMismatchError(f"density shape {m.shape} != {grid.density_shape()}")
    vol = grid.dx**grid.d
    flat = m.reshape(grid.nt + 1, -1)
    ksq = grid.radius_sq().ravel()
    mass = flat.sum(axis=1) * vol
    moment = flat @ ksq * vol
    l1_kappa = mass + moment
    lp = (np.abs(flat) ** p).sum(axis=1) * vol
    tw = np.full(grid.nt + 1, grid.dt)
    tw[0] *= 0.5
    tw[-1] *= 0.5
    return {
        "mass": mass,
        "moment": moment,
        "l1_kappa": l1_kappa,
        "lp": lp ** (1.0 / p),
        "q_l1_kappa": float(l1_kappa @ tw),
        "q_lp": float((lp @ tw) ** (1.0 / p)),
        "q_moment": float(moment @ tw),
    }


def boundary_mass(grid: GridSpec, m: np.ndarray) -> np.ndarray:
    """Per-slice mass in the outermost cell layer (truncation-artifact probe)."""
    vol = grid.dx**grid.d
    inner = [slice(None)] + [slice(1, -1)] * grid.d
    flat_total = m.reshape(m.shape[0], -1).sum(axis=1)
    flat_inner = m[tuple(inner)].reshape(m.shape[0], -1).sum(axis=1)
    return (flat_total - flat_inner) * vol


# ---------------------------------------------------------------------------
# field file format: float64 payload + JSON sidecar
# ---------------------------------------------------------------------------

_FIELD_KINDS = ("density", "momentum", "scalar")


def write_field(path, grid: GridSpec, kind: str, arrays) -> None:
    """Write little-endian float64 row-major payload(s) with a JSON sidecar."""
    if kind not in _FIELD_KINDS:
        raise ValueError(f"kind must be one of {_FIELD_KINDS}")
    arrays = [np.ascontiguousarray(a, dtype="<f8") for a in (
        arrays if isinstance(arrays, (list, tuple)) else [arrays])]
    header = dict(grid.to_json())
    header["kind"] = kind
    header["shapes"] = [list(a.shape) for a in arrays]
    path = str(path)
    with open(path, "wb") as fh:
        for a in arrays:
            fh.write(a.tobytes())
    with open(path + ".json", "w") as fh:
        json.dump(header, fh, sort_keys=True)
        fh.write("\n")


def read_field(path):
    """Read a field file; returns (grid, kind, arrays)."""
    path = str(path)
    with open(path + ".json") as fh:
        header = json.load(fh)
    grid = GridSpec.from_json(header)
    shapes = [tuple(s) for s in header["shapes"]]
    arrays = []
    with open(path, "rb") as fh:
        for sh in shapes:
            count = int(np.prod(sh))
            buf = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            arrays.append(buf.reshape(sh).astype(float))
    return grid, header["kind"], arrays


def density_to_csv(path, grid: GridSpec, m: np.ndarray) -> None:
    """CSV export of a d=1 density for plotting: one row per (t, x, m)."""
    if grid.d != 1:
        raise ValueError("CSV export is for d=1 fields")
    xs = grid.x_centers
    ts = grid.t_nodes
    with open(path, "w") as fh:
        fh.write("t,x,m\n")
        for k, t in enumerate(ts):
            for i, x in enumerate(xs):
                fh.write(f"{t!r},{x!r},{m[k, i]!r}\n")

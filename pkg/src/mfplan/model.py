"""Analytic ingredients of a planning instance.

One instance bundles a quadratic Hamiltonian H(x,p) = g(x)|p|^2/2 + z(x).p
- V_H(x), its exact conjugate Lagrangian L(x,v) = |v + z(x)|^2/(2 g(x))
+ V_H(x), and a power coupling f(x,m) = a(x) m^(p-1) + V_f(x) with primitive
F and conjugate F*.  All closed forms are Fenchel-exact, so the pointwise
duality gaps Y_H and Y_F vanish identically on their contact sets.

Spatial coefficients are either constants or fields sampled at the spatial
cell centers of a grid (piecewise-linear interpolation off-grid).  All
evaluations are pure and safe to call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GrowthBoundError
from .grid import GridSpec, read_field, write_field


class SpatialCoefficient:
    """Scalar or vector coefficient: constant, or sampled on spatial cells."""

    def __init__(self, value, grid: GridSpec | None = None):
        if np.isscalar(value):
            self.const = float(value)
            self.values = None
            self.grid = None
        else:
            arr = np.asarray(value, dtype=float)
            if grid is None:
                raise ValueError("sampled coefficients need the grid they live on")
            if arr.shape != grid.space_shape:
                raise ValueError(f"sampled shape {arr.shape} != {grid.space_shape}")
            self.const = None
            self.values = arr
            self.grid = grid

    def is_const(self) -> bool:
        return self.const is not None

    def on_cells(self, grid: GridSpec) -> np.ndarray:
        if self.is_const():
            return np.full(grid.space_shape, self.const)
        if self.grid.space_shape != grid.space_shape or self.grid.R != grid.R:
            raise ValueError("coefficient sampled on an incompatible grid")
        return self.values

    def at_points(self, x: np.ndarray) -> np.ndarray:
        """Evaluate at points of shape (..., d) by multilinear interpolation."""
        x = np.asarray(x, dtype=float)
        if self.is_const():
            return np.full(x.shape[:-1], self.const)
        return _interp_cells(self.grid, self.values, x)

    def bounds(self) -> tuple:
        if self.is_const():
            return self.const, self.const
        return float(self.values.min()), float(self.values.max())


def _interp_cells(grid: GridSpec, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a cell-centered spatial field, clamped at
    the outermost cell centers."""
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, grid.d)
    idx = []
    frac = []
    for j in range(grid.d):
        s = (pts[:, j] + grid.R) / grid.dx - 0.5
        s = np.clip(s, 0.0, grid.nx - 1.0)
        i0 = np.clip(np.floor(s).astype(int), 0, grid.nx - 2)
        idx.append(i0)
        frac.append(s - i0)
    if grid.d == 1:
        i0, f = idx[0], frac[0]
        out = values[i0] * (1 - f) + values[i0 + 1] * f
    else:
        i0, i1 = idx
        fx, fy = frac
        out = (
            values[i0, i1] * (1 - fx) * (1 - fy)
            + values[i0 + 1, i1] * fx * (1 - fy)
            + values[i0, i1 + 1] * (1 - fx) * fy
            + values[i0 + 1, i1 + 1] * fx * fy
        )
    return out.reshape(x.shape[:-1])


@dataclass
class ModelSpec:
    """Hamiltonian, Lagrangian and coupling data for one planning problem.

    p_exponent is the coupling growth exponent p > 1; the conjugate exponent
    q = p/(p-1) is derived.  Structural constants c_H, c_H^+/-, c_f bound the
    growth envelopes; when omitted they are derived from the sampled
    coefficient ranges with a safety margin and can be checked a posteriori
    with growth_check.
    """

    d: int = 1
    p_exponent: float = 2.0
    g: SpatialCoefficient = None
    z: object = None  # array (d,) or None for zero drift
    V_H: SpatialCoefficient = None
    a: SpatialCoefficient = None
    V_f: SpatialCoefficient = None
    c_H: float = None
    c_H_plus: float = None
    c_H_minus: float = None
    c_f: float = None

    def __post_init__(self):
        if self.p_exponent <= 1:
            raise DomainError(f"p must exceed 1, got {self.p_exponent}")
        self.g = self._coerce(self.g, 1.0)
        self.V_H = self._coerce(self.V_H, 0.0)
        self.a = self._coerce(self.a, 1.0)
        self.V_f = self._coerce(self.V_f, 0.0)
        if self.z is None:
            self.z = np.zeros(self.d)
        else:
            self.z = np.asarray(self.z, dtype=float)
            if self.z.shape != (self.d,):
                raise ValueError(f"drift z must have shape ({self.d},)")
        g_lo, g_hi = self.g.bounds()
        a_lo, a_hi = self.a.bounds()
        if g_lo <= 0:
            raise DomainError("metric coefficient g must be positive")
        if a_lo <= 0:
            raise DomainError("coupling weight a must be positive")
        if self.c_H is None:
            # strict margin when a drift is present (finite envelopes need
            # room between g and the c_H bounds); an epsilon otherwise so
            # the derived constant survives power round-trips
            margin = 2.0 if np.any(self.z != 0.0) else 1.0 + 1e-9
            self.c_H = max(g_hi, 1.0 / g_lo) * margin
        if self.c_f is None:
            self.c_f = (max(a_hi, 1.0 / a_lo, 1.0) * (1.0 + 1e-9)) \
                ** (1.0 / self.p_exponent)
        if self.c_H_plus is None or self.c_H_minus is None:
            plus, minus = self._derive_drift_envelopes(g_lo, g_hi)
            if self.c_H_plus is None:
                self.c_H_plus = plus
            if self.c_H_minus is None:
                self.c_H_minus = minus

    def _derive_drift_envelopes(self, g_lo, g_hi):
        vh_lo, vh_hi = self.V_H.bounds()
        zsq = float(self.z @ self.z)
        plus = max(-vh_lo, 0.0) + 1e-12
        minus = max(vh_hi, 0.0) + 1e-12
        if zsq > 0:
            # finite envelopes need strict room between g and the c_H bounds
            gap_hi = max(self.c_H - g_hi, 1e-12)
            gap_lo = max(g_lo - 1.0 / self.c_H, 1e-12)
            plus += zsq / (2 * gap_hi)
            minus += zsq / (2 * gap_lo)
        return plus, minus

    @staticmethod
    def _coerce(value, default):
        if value is None:
            return SpatialCoefficient(default)
        if isinstance(value, SpatialCoefficient):
            return value
        return SpatialCoefficient(value)

    @property
    def q_exponent(self) -> float:
        return self.p_exponent / (self.p_exponent - 1.0)

    # -- serialization ------------------------------------------------------

    def to_json(self, field_dir=None) -> dict:
        def enc(coef, name):
            if coef.is_const():
                return coef.const
            if field_dir is None:
                raise ValueError("field_dir required to serialize sampled coefficients")
            path = f"{field_dir}/{name}.field"
            write_field(path, coef.grid, "scalar", coef.values[None])
            return {"file": f"{name}.field"}

        return {
            "d": self.d,
            "p": self.p_exponent,
            "hamiltonian": {
                "g": enc(self.g, "g"),
                "z": list(map(float, self.z)),
                "V_H": enc(self.V_H, "V_H"),
            },
            "coupling": {"a": enc(self.a, "a"), "V_f": enc(self.V_f, "V_f")},
            "constants": {
                "c_H": self.c_H,
                "c_H_plus": self.c_H_plus,
                "c_H_minus": self.c_H_minus,
                "c_f": self.c_f,
            },
        }

    @staticmethod
    def from_json(obj: dict, field_dir=None) -> "ModelSpec":
        def dec(entry):
            if isinstance(entry, dict):
                grid, _, arrays = read_field(f"{field_dir}/{entry['file']}")
                return SpatialCoefficient(arrays[0][0], grid)
            return SpatialCoefficient(float(entry))

        ham = obj.get("hamiltonian", {})
        coup = obj.get("coupling", {})
        consts = obj.get("constants", {})
        d = int(obj.get("d", len(ham.get("z", [0.0]))))
        return ModelSpec(
            d=d,
            p_exponent=float(obj.get("p", 2.0)),
            g=dec(ham.get("g", 1.0)),
            z=np.asarray(ham.get("z", [0.0] * d), dtype=float),
            V_H=dec(ham.get("V_H", 0.0)),
            a=dec(coup.get("a", 1.0)),
            V_f=dec(coup.get("V_f", 0.0)),
            c_H=consts.get("c_H"),
            c_H_plus=consts.get("c_H_plus"),
            c_H_minus=consts.get("c_H_minus"),
            c_f=consts.get("c_f"),
        )

    def save(self, path, field_dir=None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(field_dir=field_dir), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @staticmethod
    def load(path, field_dir=None) -> "ModelSpec":
        with open(path) as fh:
            obj = json.load(fh)
        return ModelSpec.from_json(obj, field_dir=field_dir)


# ---------------------------------------------------------------------------
# pointwise evaluations (x is a point or an array of points of shape (..,d))
# ---------------------------------------------------------------------------


def _pt(x, d):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[-1] != d:
        raise ValueError(f"point dimension {x.shape[-1]} != model d={d}")
    return x


def hamiltonian(model: ModelSpec, x, p) -> float | np.ndarray:
    """H(x,p) = g(x)|p|^2/2 + z.p - V_H(x)."""
    x = _pt(x, model.d)
    p = np.asarray(p, dtype=float)
    g = model.g.at_points(x)
    vh = model.V_H.at_points(x)
    quad = 0.5 * g * np.sum(p * p, axis=-1)
    drift = p @ model.z
    out = quad + drift - vh
    return float(out) if out.ndim == 0 else out


def hamiltonian_grad_p(model: ModelSpec, x, p) -> np.ndarray:
    """dH/dp = g(x) p + z; matches central differences of H to O(h^2)."""
    x = _pt(x, model.d)
    p = np.asarray(p, dtype=float)
    g = model.g.at_points(x)
    return g[..., None] * p + model.z


def lagrangian(model: ModelSpec, x, v) -> float | np.ndarray:
    """L(x,v) = |v + z(x)|^2 / (2 g(x)) + V_H(x), the exact conjugate
    sup_p [-v.p - H(x,p)] of the quadratic family."""
    x = _pt(x, model.d)
    v = np.asarray(v, dtype=float)
    g = model.g.at_points(x)
    vh = model.V_H.at_points(x)
    shifted = v + model.z
    out = 0.5 * np.sum(shifted * shifted, axis=-1) / g + vh
    return float(out) if out.ndim == 0 else out


def coupling_f(model: ModelSpec, x, m) -> float | np.ndarray:
    """f(x,m) = a(x) m^(p-1) + V_f(x) for m >= 0."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise DomainError("coupling_f requires m >= 0")
    x = _pt(x, model.d)
    a = model.a.at_points(x)
    vf = model.V_f.at_points(x)
    out = a * m ** (model.p_exponent - 1.0) + vf
    return float(out) if out.ndim == 0 else out


def F_value(model: ModelSpec, x, m) -> float | np.ndarray:
    """Primitive F(x,m) = a(x) m^p / p + V_f(x) m for m >= 0."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise DomainError("F_value requires m >= 0")
    x = _pt(x, model.d)
    a = model.a.at_points(x)
    vf = model.V_f.at_points(x)
    out = a * m**model.p_exponent / model.p_exponent + vf * m
    return float(out) if out.ndim == 0 else out


def F_star_value(model: ModelSpec, x, alpha) -> float | np.ndarray:
    """Conjugate F*(x,alpha) = a^(-q/p) ((alpha - V_f)_+)^q / q.

    Vanishes exactly on alpha <= f(x,0) = V_f(x) and is nondecreasing."""
    alpha = np.asarray(alpha, dtype=float)
    x = _pt(x, model.d)
    a = model.a.at_points(x)
    vf = model.V_f.at_points(x)
    q = model.q_exponent
    pos = np.maximum(alpha - vf, 0.0)
    out = a ** (-q / model.p_exponent) * pos**q / q
    return float(out) if out.ndim == 0 else out


def perspective_L(model: ModelSpec, x, m, w) -> float | np.ndarray:
    """Perspective m L(x, w/m): 0 at (0,0), +inf at (0, w != 0)."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise DomainError("perspective_L requires m >= 0")
    x = _pt(x, model.d)
    w = np.asarray(w, dtype=float)
    g = model.g.at_points(x)
    vh = model.V_H.at_points(x)
    shifted = w + m[..., None] * model.z
    num = 0.5 * np.sum(shifted * shifted, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(m > 0, num / (g * np.where(m > 0, m, 1.0)) + vh * m, 0.0)
    wsq = np.sum(w * w, axis=-1)
    out = np.where((m == 0) & (wsq > 0), np.inf, out)
    return float(out) if out.ndim == 0 else out


def gap_YH(model: ModelSpec, x, p, v) -> float | np.ndarray:
    """Fenchel gap H(x,p) + p.v + L(x,v) >= 0; zero iff v = -dH/dp(x,p)."""
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    out = hamiltonian(model, x, p) + np.sum(p * v, axis=-1) + lagrangian(model, x, v)
    return float(out) if np.ndim(out) == 0 else out


def gap_YF(model: ModelSpec, x, m, alpha) -> float | np.ndarray:
    """Fenchel gap F(x,m) - alpha m + F*(x,alpha) >= 0; zero iff
    alpha = f(x,m), or m = 0 with alpha <= f(x,0)."""
    m = np.asarray(m, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    out = F_value(model, x, m) - alpha * m + F_star_value(model, x, alpha)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# vectorized grid views used by the solver
# ---------------------------------------------------------------------------


@dataclass
class GridCoefficients:
    """Model coefficients broadcast onto the spatial cells of one grid."""

    g: np.ndarray
    z: np.ndarray  # shape (d,)
    V_H: np.ndarray
    a: np.ndarray
    V_f: np.ndarray
    p: float
    q: float

    @staticmethod
    def build(model: ModelSpec, grid: GridSpec) -> "GridCoefficients":
        if model.d != grid.d:
            raise ValueError(f"model d={model.d} vs grid d={grid.d}")
        return GridCoefficients(
            g=model.g.on_cells(grid),
            z=model.z,
            V_H=model.V_H.on_cells(grid),
            a=model.a.on_cells(grid),
            V_f=model.V_f.on_cells(grid),
            p=model.p_exponent,
            q=model.q_exponent,
        )

    def f(self, m):
        return self.a * np.maximum(m, 0.0) ** (self.p - 1.0) + self.V_f

    def F(self, m):
        mm = np.maximum(m, 0.0)
        return self.a * mm**self.p / self.p + self.V_f * mm

    def F_star(self, alpha):
        pos = np.maximum(alpha - self.V_f, 0.0)
        return self.a ** (-self.q / self.p) * pos**self.q / self.q

    def hamiltonian_cells(self, p_comps):
        """H at cell centers from a stacked gradient array (..., d)."""
        psq = np.sum(p_comps**2, axis=-1)
        drift = p_comps @ self.z
        return 0.5 * self.g * psq + drift - self.V_H

    def perspective(self, m, w_comps, support=None):
        """m L(x, w/m) cellwise; support=False cells contribute zero.

        Cells with m == 0 and w != 0 evaluate to +inf unless masked out by
        `support` (used for iterate histories where stray face noise off the
        density support would otherwise blow up the report).
        """
        wz = w_comps + m[..., None] * self.z
        num = 0.5 * np.sum(wz * wz, axis=-1)
        safe = np.where(m > 0, m, 1.0)
        out = np.where(m > 0, num / (self.g * safe) + self.V_H * m, 0.0)
        bad = (m <= 0) & (np.sum(w_comps**2, axis=-1) > 0)
        if support is not None:
            bad &= support
        out = np.where(bad, np.inf, out)
        return out


# ---------------------------------------------------------------------------
# growth verification
# ---------------------------------------------------------------------------


def growth_check(model: ModelSpec, points: np.ndarray, p_lattice=None,
                 m_lattice=None) -> dict:
    """Verify the structural growth sandwiches at sampled points.

    Checks, for every sample x and every lattice momentum / density value:
      |p|^2/(2 c_H) - c_H^-(1+|x|^2) <= H(x,p) <= c_H |p|^2/2 + c_H^+(1+|x|)
      m^(p-1)/c_f^p - |V_f| <= f(x,m) <= c_f^p m^(p-1) + |V_f|
    plus the metric and coupling coefficient ranges.  Raises GrowthBoundError
    on the first violated bound, otherwise returns the worst slacks.
    """
    pts = _pt(points, model.d).reshape(-1, model.d)
    if pts.shape[0] == 0:
        raise DomainError("growth_check needs a nonempty sample set")
    if p_lattice is None:
        p_lattice = np.linspace(-10.0, 10.0, 21)
    if m_lattice is None:
        m_lattice = np.linspace(0.0, 10.0, 21)

    g = model.g.at_points(pts)
    a = model.a.at_points(pts)
    vf = model.V_f.at_points(pts)
    slacks = {}

    def record(name, slack, where):
        slacks[name] = min(slacks.get(name, np.inf), float(slack.min()))
        if slack.min() < 0:
            k = int(np.argmin(slack))
            raise GrowthBoundError(
                f"{name} violated by {-slack.min():.3e}",
                bound=name, point=list(map(float, where[k])), slack=float(slack.min()),
            )

    record("metric_upper", model.c_H - g, pts)
    record("metric_lower", g - 1.0 / model.c_H, pts)
    cfp = model.c_f**model.p_exponent
    record("coupling_upper", cfp - a, pts)
    record("coupling_lower", a - 1.0 / cfp, pts)

    xa = np.linalg.norm(pts, axis=1)
    gamma_plus = model.c_H_plus * (1.0 + xa)
    gamma_minus = model.c_H_minus * (1.0 + np.sum(pts**2, axis=1))
    for pv in p_lattice:
        pvec = np.full((pts.shape[0], model.d), float(pv))
        H = hamiltonian(model, pts, pvec)
        psq = model.d * pv**2
        record("H_upper", 0.5 * model.c_H * psq + gamma_plus - H, pts)
        record("H_lower", H - (psq / (2 * model.c_H) - gamma_minus), pts)
    for mv in m_lattice:
        fval = a * mv ** (model.p_exponent - 1.0) + vf
        record("f_upper", cfp * mv ** (model.p_exponent - 1.0) + np.abs(vf) - fval, pts)
        record("f_lower", fval - (mv ** (model.p_exponent - 1.0) / cfp - np.abs(vf)), pts)

    return {"ok": True, "worst_slack": slacks}

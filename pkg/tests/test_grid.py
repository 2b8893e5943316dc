import numpy as np
import pytest

from mfplan.errors import MassMismatchError, ShapeMismatchError
from mfplan.grid import (
    DensityField,
    GridSpec,
    MomentumField,
    ScalarField,
    boundary_mass,
    continuity_residual,
    density_to_csv,
    divergence,
    divergence_adjoint,
    interp_center_to_face,
    interp_face_to_center,
    momentum_from_density_path,
    project_continuity,
    read_field,
    time_cell_to_node,
    time_node_to_cell,
    weighted_norms,
    write_field,
    zero_momentum,
)

from conftest import gaussian_density


@pytest.fixture(params=[1, 2])
def grid(request):
    return GridSpec(d=request.param, nt=12, nx=16, R=1.5)


def random_pair(grid, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal(grid.density_shape())
    w = tuple(rng.standard_normal(sh) for sh in grid.momentum_shapes())
    return m, w


class TestResidual:
    def test_uniform_rest_state(self, grid):
        m = np.full(grid.density_shape(), 0.7)
        r = continuity_residual(m, zero_momentum(grid), grid)
        assert np.abs(r).max() == 0.0

    def test_exact_upwind_advection(self):
        # integer-CFL upwind transport cancels the stencils exactly
        grid = GridSpec(d=1, nt=8, nx=32, R=1.0)
        c = grid.dx / grid.dt
        profile = np.zeros(grid.nx)
        profile[4:9] = 1.0
        m = np.stack([np.roll(profile, k) for k in range(grid.nt + 1)])
        w = zero_momentum(grid)
        w[0][:, 1:] = c * m[:-1]
        r = continuity_residual(m, w, grid)
        assert np.abs(r).max() <= 1e-12

    def test_smooth_advection_truncation_decays(self):
        # centered stencils on an advected gaussian: first-order truncation,
        # halving the mesh must cut the residual roughly in half
        errs = []
        for n in (32, 64):
            grid = GridSpec(d=1, nt=n, nx=n, R=2.0)
            xs = grid.x_centers
            c = 0.5
            m = np.stack([np.exp(-((xs - c * t + 0.5) ** 2) / (2 * 0.3**2))
                          for t in grid.t_nodes])
            w = zero_momentum(grid)
            mt_cells = time_node_to_cell(m)
            w[0][:, 1:-1] = c * 0.5 * (mt_cells[:, :-1] + mt_cells[:, 1:])
            errs.append(np.abs(continuity_residual(m, w, grid)).max())
        assert errs[1] <= 0.65 * errs[0]

    def test_shape_mismatch(self, grid):
        m, w = random_pair(grid)
        with pytest.raises(ShapeMismatchError):
            continuity_residual(m[:-1], w, grid)


class TestProjection:
    def endpoints(self, grid):
        m0 = gaussian_density(grid, [-0.4] * grid.d, 0.3)
        m1 = gaussian_density(grid, [0.4] * grid.d, 0.35)
        return m0, m1

    def test_residual_after_projection(self, grid):
        m0, m1 = self.endpoints(grid)
        m, w = random_pair(grid, 1)
        mp, wp = project_continuity(grid, m, w, m0, m1)
        assert np.abs(continuity_residual(mp, wp, grid)).max() <= 1e-10

    def test_idempotent(self, grid):
        m0, m1 = self.endpoints(grid)
        m, w = random_pair(grid, 2)
        mp, wp = project_continuity(grid, m, w, m0, m1)
        mq, wq = project_continuity(grid, mp, wp, m0, m1)
        assert np.abs(mq - mp).max() <= 1e-12
        assert max(np.abs(a - b).max() for a, b in zip(wq, wp)) <= 1e-12

    def test_feasible_input_unchanged(self, grid):
        m0, m1 = self.endpoints(grid)
        ts = grid.t_nodes
        m = ((1 - ts)[:, None] * m0.reshape(1, -1)
             + ts[:, None] * m1.reshape(1, -1)).reshape(grid.density_shape())
        w = momentum_from_density_path(grid, m)
        mp, wp = project_continuity(grid, m, w, m0, m1)
        assert np.abs(mp - m).max() <= 1e-12
        assert max(np.abs(a - b).max() for a, b in zip(wp, w)) <= 1e-12

    def test_nonexpansive(self, grid):
        m0, m1 = self.endpoints(grid)
        ma, wa = random_pair(grid, 3)
        mb, wb = random_pair(grid, 4)
        pa = project_continuity(grid, ma, wa, m0, m1)
        pb = project_continuity(grid, mb, wb, m0, m1)
        before = np.sum((ma - mb) ** 2) + sum(np.sum((a - b) ** 2)
                                              for a, b in zip(wa, wb))
        after = np.sum((pa[0] - pb[0]) ** 2) + sum(np.sum((a - b) ** 2)
                                                   for a, b in zip(pa[1], pb[1]))
        assert after <= before + 1e-9

    def test_mass_mismatch_rejected(self, grid):
        m0, m1 = self.endpoints(grid)
        m, w = random_pair(grid, 5)
        with pytest.raises(MassMismatchError):
            project_continuity(grid, m, w, m0, 1.5 * m1)

    def test_zero_input_uniform_endpoints(self, grid):
        mbar = np.full(grid.space_shape, 1.0 / (2 * grid.R) ** grid.d)
        m = np.zeros(grid.density_shape())
        mp, wp = project_continuity(grid, m, zero_momentum(grid), mbar, mbar)
        assert np.abs(mp - mbar).max() <= 1e-11
        assert max(np.abs(c).max() for c in wp) <= 1e-11

    def test_mass_conserved_per_slice(self, grid):
        m0, m1 = self.endpoints(grid)
        m, w = random_pair(grid, 6)
        mp, _ = project_continuity(grid, m, w, m0, m1)
        masses = DensityField(grid, mp).slice_masses()
        assert np.abs(masses - masses[0]).max() <= 1e-10


class TestInterp:
    def test_constant_preserved(self, grid):
        w = tuple(np.full(sh, 2.5) for sh in grid.momentum_shapes())
        for comp in interp_face_to_center(grid, w):
            assert np.abs(comp - 2.5).max() == 0.0

    def test_linear_exact(self):
        grid = GridSpec(d=1, nt=4, nx=16, R=1.0)
        faces = -grid.R + np.arange(grid.nx + 1) * grid.dx
        w = (np.tile(3.0 * faces + 1.0, (grid.nt, 1)),)
        centered = interp_face_to_center(grid, w)[0]
        assert np.abs(centered - (3.0 * grid.x_centers + 1.0)).max() <= 1e-13

    def test_adjoint_pair(self, grid):
        rng = np.random.default_rng(7)
        w = tuple(rng.standard_normal(sh) for sh in grid.momentum_shapes())
        s = tuple(rng.standard_normal(grid.scalar_shape()) for _ in range(grid.d))
        lhs = sum(np.sum(a * b) for a, b in zip(interp_face_to_center(grid, w), s))
        rhs = sum(np.sum(a * b) for a, b in zip(w, interp_center_to_face(grid, s)))
        assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))

    def test_time_adjoint_pair(self, grid):
        rng = np.random.default_rng(8)
        m = rng.standard_normal(grid.density_shape())
        y = rng.standard_normal(grid.scalar_shape())
        lhs = np.sum(time_node_to_cell(m) * y)
        rhs = np.sum(m * time_cell_to_node(grid, y))
        assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))

    def test_integration_by_parts(self, grid):
        # <div w, s> = -<w, grad s> for no-flux momenta; the discrete
        # gradient pairs faces with the (s_right - s_left) differences
        rng = np.random.default_rng(9)
        w = []
        for j, sh in enumerate(grid.momentum_shapes()):
            comp = rng.standard_normal(sh)
            sl0 = [slice(None)] * (1 + grid.d)
            sl1 = [slice(None)] * (1 + grid.d)
            sl0[1 + j] = 0
            sl1[1 + j] = -1
            comp[tuple(sl0)] = 0.0
            comp[tuple(sl1)] = 0.0
            w.append(comp)
        s = rng.standard_normal(grid.scalar_shape())
        lhs = np.sum(divergence(grid, tuple(w)) * s)
        grads = divergence_adjoint(grid, s)  # equals -grad on interior faces
        rhs = sum(np.sum(a * b) for a, b in zip(w, grads))
        assert abs(lhs - rhs) <= 1e-12 * (1 + abs(lhs))


class TestNorms:
    def test_uniform_quadratic_moment(self):
        grid = GridSpec(d=1, nt=4, nx=64, R=1.0)
        m = np.full(grid.density_shape(), 0.5)  # unit mass on [-1, 1]
        norms = weighted_norms(grid, m)
        assert norms["moment"][0] == pytest.approx(1.0 / 3.0, abs=1e-3)

    def test_point_supported_cell(self):
        grid = GridSpec(d=1, nt=4, nx=16, R=1.0)
        m = np.zeros(grid.density_shape())
        m[:, 3] = 1.0 / grid.dx
        norms = weighted_norms(grid, m)
        assert norms["moment"][0] == pytest.approx(grid.x_centers[3] ** 2)

    def test_weighted_l1_identity(self, grid):
        m0 = gaussian_density(grid, [0.2] * grid.d, 0.3)
        m = np.repeat(m0[None], grid.nt + 1, axis=0)
        norms = weighted_norms(grid, m)
        assert np.allclose(norms["l1_kappa"], norms["mass"] + norms["moment"])
        assert norms["mass"][0] == pytest.approx(1.0, abs=1e-12)

    def test_kappa_at_least_one(self, grid):
        assert grid.kappa().min() >= 1.0

    def test_boundary_mass(self):
        grid = GridSpec(d=1, nt=2, nx=8, R=1.0)
        m = np.zeros(grid.density_shape())
        m[:, 0] = 1.0 / grid.dx
        assert boundary_mass(grid, m)[0] == pytest.approx(1.0)


class TestFieldTypes:
    def test_density_shape_checked(self, grid):
        with pytest.raises(ShapeMismatchError):
            DensityField(grid, np.zeros(grid.scalar_shape()))

    def test_momentum_boundary_flux(self, grid):
        w = MomentumField(grid, zero_momentum(grid))
        assert w.boundary_flux_max() == 0.0

    def test_scalar_shape_checked(self, grid):
        with pytest.raises(ShapeMismatchError):
            ScalarField(grid, np.zeros(grid.density_shape()))


class TestFieldFiles:
    def test_round_trip_density(self, grid, tmp_path):
        m = gaussian_density(grid, [0.0] * grid.d, 0.4)
        m = np.repeat(m[None], grid.nt + 1, axis=0)
        path = tmp_path / "m.field"
        write_field(path, grid, "density", m)
        g2, kind, (back,) = read_field(path)
        assert kind == "density"
        assert g2.to_json() == grid.to_json()
        assert np.array_equal(back, m)

    def test_round_trip_momentum_bytes(self, grid, tmp_path):
        _, w = random_pair(grid, 11)
        path = tmp_path / "w.field"
        write_field(path, grid, "momentum", list(w))
        _, _, back = read_field(path)
        for a, b in zip(w, back):
            assert np.array_equal(a, b)
        write_field(tmp_path / "w2.field", grid, "momentum", list(w))
        assert (tmp_path / "w.field").read_bytes() == (tmp_path / "w2.field").read_bytes()

    def test_csv_export(self, tmp_path):
        grid = GridSpec(d=1, nt=2, nx=4, R=1.0)
        m = np.arange(float((grid.nt + 1) * grid.nx)).reshape(grid.density_shape())
        density_to_csv(tmp_path / "m.csv", grid, m)
        lines = (tmp_path / "m.csv").read_text().strip().split("\n")
        assert lines[0] == "t,x,m"
        assert len(lines) == 1 + (grid.nt + 1) * grid.nx


class TestMomentumFromPath:
    def test_exact_feasibility(self, grid):
        m0 = gaussian_density(grid, [-0.3] * grid.d, 0.3)
        m1 = gaussian_density(grid, [0.3] * grid.d, 0.3)
        ts = grid.t_nodes
        m = ((1 - ts)[:, None] * m0.reshape(1, -1)
             + ts[:, None] * m1.reshape(1, -1)).reshape(grid.density_shape())
        w = momentum_from_density_path(grid, m)
        assert np.abs(continuity_residual(m, w, grid)).max() <= 1e-10
        assert MomentumField(grid, w).boundary_flux_max() == 0.0

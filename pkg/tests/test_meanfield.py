import math

import numpy as np
import pytest

from fiberfield.convolve import ConvolutionKernel, ForceFieldCache, convolution_force, retarded_force_average
from fiberfield.core import DelayKernel, DensityField, InteractionPotential, SpatialGrid
from fiberfield.errors import CacheMismatchError, CflViolation, FiberFieldError, MissingHistoryError
from fiberfield.meanfield import (
    KineticField,
    MeanFieldProblem,
    bezier_interpolate,
    box_initial_field,
    conservation_repair,
    moment_density,
    run_meanfield,
    strang_step,
    transport_step,
    velocity_halfstep,
)
from fiberfield.spheregrid import build_geodesic_grid

U_PAPER = InteractionPotential("smooth_heaviside", C=10.0, R=1.4, k=10.0)


@pytest.fixture(scope="module")
def gv1():
    return build_geodesic_grid(1)


@pytest.fixture(scope="module")
def gv0():
    return build_geodesic_grid(0)


class TestMomentDensity:
    def test_constant_over_velocity(self, gv1):
        gx = SpatialGrid(5, 1.0)
        f = KineticField(gx, gv1, np.full((gv1.n_cells,) + gx.shape, 2.5))
        rho = moment_density(f)
        assert np.allclose(rho.values, 2.5)

    def test_zero(self, gv1):
        gx = SpatialGrid(5, 1.0)
        f = KineticField(gx, gv1, np.zeros((gv1.n_cells,) + gx.shape))
        assert np.all(moment_density(f).values == 0.0)

    def test_single_velocity_cell(self, gv1):
        gx = SpatialGrid(3, 1.0)
        vals = np.zeros((gv1.n_cells,) + gx.shape)
        vals[7] = 3.0
        rho = moment_density(KineticField(gx, gv1, vals))
        assert np.allclose(rho.values, 3.0 * gv1.area[7] / (4 * math.pi))

    def test_mass_consistency(self, gv1):
        gx = SpatialGrid(5, 1.0)
        rng = np.random.default_rng(0)
        f = KineticField(gx, gv1, rng.random((gv1.n_cells,) + gx.shape))
        assert moment_density(f).mass() == pytest.approx(f.mass(), rel=1e-13)


class TestConvolution:
    def test_delta_reproduces_kernel(self):
        g = SpatialGrid(15, 3.0)
        cache = ForceFieldCache(g, U_PAPER, DelayKernel(), 0.1, threshold_frac=0.0)
        rho = np.zeros(g.shape)
        i0 = (3, 7, 11)
        rho[i0] = 1.0 / g.dx**3
        F = convolution_force(DensityField(g, rho), U_PAPER, 0.0, cache)
        pts = g.points().reshape(g.shape + (3,))
        ref = U_PAPER.grad(pts - pts[i0])
        assert np.max(np.abs(np.moveaxis(F, 0, -1) - ref)) < 1e-12

    def test_even_density_zero_force_at_origin(self):
        g = SpatialGrid(15, 3.0)
        cache = ForceFieldCache(g, U_PAPER, DelayKernel(), 0.1, threshold_frac=0.0)
        rho = np.exp(-g.radius() ** 2)
        F = convolution_force(DensityField(g, rho), U_PAPER, 0.0, cache)
        c = (g.n_x - 1) // 2
        assert np.max(np.abs(F[:, c, c, c])) < 1e-12

    def test_threshold_keeps_force_close_to_full_sum(self):
        # frozen regression on the 21-point grid with a unit-mass Gaussian
        g = SpatialGrid(21, 4.2)
        rho = DensityField(g, np.exp(-g.radius() ** 2 / 2.0)).normalized()
        full = ConvolutionKernel(g, U_PAPER, 0.0, "force")
        thr = ConvolutionKernel(g, U_PAPER, 0.001, "force")
        assert thr.n_neighbors < full.n_neighbors
        fa = full.apply(rho.values)
        fb = thr.apply(rho.values)
        rel = math.sqrt(float(np.sum((fa - fb) ** 2)) / float(np.sum(fa * fa)))
        assert rel <= 0.01

    def test_direct_sum_matches_fft(self):
        g = SpatialGrid(7, 2.0)
        rng = np.random.default_rng(3)
        rho = rng.random(g.shape)
        for mode in ("force", "potential"):
            kern = ConvolutionKernel(g, U_PAPER, 0.01, mode)
            assert np.max(np.abs(kern.apply(rho) - kern.apply_direct(rho))) < 1e-11

    def test_cache_mismatch_rejected(self):
        g = SpatialGrid(15, 3.0)
        other = SpatialGrid(15, 2.5)
        cache = ForceFieldCache(g, U_PAPER, DelayKernel(), 0.1)
        rho = DensityField(other, np.ones(other.shape))
        with pytest.raises(CacheMismatchError):
            convolution_force(rho, U_PAPER, cache.force_kernel.threshold_frac, cache)
        with pytest.raises(CacheMismatchError):
            convolution_force(
                DensityField(g, np.ones(g.shape)),
                InteractionPotential("smooth_heaviside", C=9.0, R=1.4, k=10.0),
                cache.force_kernel.threshold_frac,
                cache,
            )


class TestRetardedAverage:
    def _cache(self, H, dt=1.0):
        g = SpatialGrid(7, 2.0)
        return g, ForceFieldCache(g, U_PAPER, DelayKernel(H), dt)

    def test_identical_fields_average_to_themselves(self):
        g, cache = self._cache(math.inf)
        rho = DensityField(g, np.exp(-g.radius() ** 2)).normalized()
        f0 = cache.push(0.0, rho)
        cache.push(1.0, rho)
        avg = retarded_force_average(cache, 1.0, DelayKernel(math.inf))
        assert np.allclose(avg, f0)

    def test_infinite_history_arithmetic_mean(self):
        g, cache = self._cache(math.inf)
        r1 = DensityField(g, np.exp(-g.radius() ** 2)).normalized()
        r2 = DensityField(g, np.exp(-2 * g.radius() ** 2)).normalized()
        f1 = cache.push(0.0, r1)
        f2 = cache.push(1.0, r2)
        avg = retarded_force_average(cache, 1.0, DelayKernel(math.inf))
        assert np.allclose(avg, 0.5 * (f1 + f2))

    def test_zero_cutoff_returns_most_recent(self):
        g, cache = self._cache(0.0)
        r1 = DensityField(g, np.exp(-g.radius() ** 2)).normalized()
        r2 = DensityField(g, np.exp(-2 * g.radius() ** 2)).normalized()
        cache.push(0.0, r1)
        f2 = cache.push(1.0, r2)
        avg = retarded_force_average(cache, 1.0, DelayKernel(0.0))
        assert np.array_equal(avg, f2)

    def test_finite_window_mean(self):
        g, cache = self._cache(2.0)
        fields = []
        for t in range(5):
            r = DensityField(g, np.exp(-(t + 1) * g.radius() ** 2)).normalized()
            fields.append(cache.push(float(t), r))
        # window [2, 4] selects the last three recordings
        avg = retarded_force_average(cache, 4.0, DelayKernel(2.0))
        assert np.allclose(avg, np.mean(fields[2:], axis=0))

    def test_missing_history_errors(self):
        g, cache = self._cache(1.0)
        with pytest.raises(MissingHistoryError):
            cache.average(0.0)


class TestVelocityHalfstep:
    def test_constant_zero_force_unchanged(self, gv1):
        gx = SpatialGrid(3, 1.0)
        f = KineticField(gx, gv1, np.full((gv1.n_cells,) + gx.shape, 0.7))
        out = velocity_halfstep(f, np.zeros((gx.n_points, 3)), 1.0, 0.01)
        assert np.max(np.abs(out.values - 0.7)) < 1e-15

    def test_per_point_conservation(self, gv1):
        gx = SpatialGrid(3, 1.0)
        rng = np.random.default_rng(1)
        f = KineticField(gx, gv1, rng.random((gv1.n_cells,) + gx.shape))
        force = rng.normal(size=(gx.n_points, 3))
        out = velocity_halfstep(f, force, 1.0, 0.004)
        before = np.tensordot(gv1.area, f.values.reshape(gv1.n_cells, -1), axes=(0, 0))
        after = np.tensordot(gv1.area, out.values.reshape(gv1.n_cells, -1), axes=(0, 0))
        assert np.max(np.abs(before - after)) < 1e-12

    def test_pure_diffusion_decays_monotonically_to_average(self):
        gv = build_geodesic_grid(2)
        gx = SpatialGrid(3, 1.0)
        vals = np.zeros((gv.n_cells,) + gx.shape)
        vals[11] = 4 * math.pi / gv.area[11]  # delta-like bump, mass 1 per point
        f = KineticField(gx, gv, vals)
        avg = np.tensordot(gv.area, f.values, axes=(0, 0)) / (4 * math.pi)
        dt = 0.01
        zero_force = np.zeros((gx.n_points, 3))
        dist_first = None
        dist_prev = None
        for n in range(2000):
            f = velocity_halfstep(f, zero_force, 1.0, dt)
            d = math.sqrt(float(np.sum((f.values - avg[None]) ** 2 * gv.area[:, None, None, None])))
            if dist_prev is not None:
                assert d <= dist_prev + 1e-13
            else:
                dist_first = d
            dist_prev = d
        assert dist_prev < 1e-4 * dist_first

    def test_cfl_violation_names_constraint(self, gv1):
        gx = SpatialGrid(3, 1.0)
        f = KineticField(gx, gv1, np.ones((gv1.n_cells,) + gx.shape))
        with pytest.raises(CflViolation, match="force transport"):
            velocity_halfstep(f, np.full((gx.n_points, 3), 50.0), 0.0, 0.1)
        with pytest.raises(CflViolation, match="diffusion"):
            velocity_halfstep(f, np.zeros((gx.n_points, 3)), 4.0, 0.1)


class TestBezier:
    def test_anchor_corner(self):
        rng = np.random.default_rng(0)
        s = rng.random((4, 4, 4))
        assert bezier_interpolate(s, (0.0, 0.0, 0.0), True) == pytest.approx(s[1, 1, 1], abs=1e-15)

    def test_trilinear_exact_with_limiting(self):
        g = np.arange(-1.0, 3.0)

        def tl(x, y, z):
            return 2 + 0.3 * x - 0.7 * y + 0.11 * z

        st = tl(g[:, None, None], g[None, :, None], g[None, None, :])
        xi = (0.3, 0.8, 0.45)
        assert bezier_interpolate(st, xi, True) == pytest.approx(tl(*xi), abs=1e-13)

    def test_cubic_exact_without_limiting(self):
        g = np.arange(-1.0, 3.0)

        def cub(x, y, z):
            return 0.1 * x**3 - y**3 + 0.5 * z**3 + x * y * z + x * x - z

        st = cub(g[:, None, None], g[None, :, None], g[None, None, :])
        for xi in [(0.2, 0.9, 0.5), (0.0, 1.0, 0.3), (0.77, 0.13, 0.99)]:
            assert abs(bezier_interpolate(st, xi, False) - cub(*xi)) < 1e-12

    def test_convex_hull_containment(self):
        rng = np.random.default_rng(42)
        for _ in range(2000):
            s = rng.standard_normal((4, 4, 4))
            xi = rng.random(3)
            v = bezier_interpolate(s, xi, True)
            assert s.min() - 1e-12 <= v <= s.max() + 1e-12


class TestTransport:
    def test_constant_unchanged_in_interior(self, gv0):
        gx = SpatialGrid(11, 2.0)
        f = KineticField(gx, gv0, np.full((gv0.n_cells,) + gx.shape, 1.0))
        with pytest.warns(UserWarning):
            out = transport_step(f, 0.05)
        # zero extension only disturbs a boundary collar; interior is exact up
        # to the global repair factor
        inner = out.values[:, 3:-3, 3:-3, 3:-3]
        assert np.max(np.abs(inner - inner.flat[0])) < 1e-12

    def test_zero_dt_identity(self, gv0):
        gx = SpatialGrid(7, 2.0)
        rng = np.random.default_rng(5)
        f = KineticField(gx, gv0, rng.random((gv0.n_cells,) + gx.shape))
        out = transport_step(f, 0.0)
        assert np.array_equal(out.values, f.values)

    def test_gaussian_translation_second_order(self, gv0):
        errs = {}
        for nx in (21, 41):
            gx = SpatialGrid(nx, 3.8)
            X = gx.points().reshape(gx.shape + (3,))
            tau = gv0.mid[5]
            vals = np.zeros((gv0.n_cells,) + gx.shape)
            vals[5] = np.exp(-np.sum(X * X, axis=-1) / 0.5)
            f = KineticField(gx, gv0, vals)
            o = f
            for _ in range(10):
                o = transport_step(o, 0.05, boundary_tol=np.inf)
            shifted = np.exp(-np.sum((X - 0.5 * tau) ** 2, axis=-1) / 0.5)
            errs[nx] = math.sqrt(float(np.sum((o.values[5] - shifted) ** 2)) * gx.dx**3)
        assert errs[41] < 0.02
        assert errs[21] / errs[41] > 3.2  # at least ~second order under halving

    def test_positivity_preserved_by_limiting(self, gv0):
        gx = SpatialGrid(9, 2.0)
        rng = np.random.default_rng(8)
        vals = np.abs(rng.random((gv0.n_cells,) + gx.shape))
        f = KineticField(gx, gv0, vals)
        out = transport_step(f, 0.07, boundary_tol=np.inf)
        assert out.values.min() >= 0.0


class TestConservationRepair:
    def test_identity_when_equal(self, gv0):
        gx = SpatialGrid(3, 1.0)
        f = KineticField(gx, gv0, np.ones((gv0.n_cells,) + gx.shape))
        out = conservation_repair(f, f.mass())
        assert np.array_equal(out.values, f.values)

    def test_rescale_doubles(self, gv0):
        gx = SpatialGrid(3, 1.0)
        f = KineticField(gx, gv0, np.ones((gv0.n_cells,) + gx.shape))
        out = conservation_repair(f, 2.0 * f.mass())
        assert np.allclose(out.values, 2.0)

    def test_all_mass_lost_errors(self, gv0):
        gx = SpatialGrid(3, 1.0)
        f = KineticField(gx, gv0, np.zeros((gv0.n_cells,) + gx.shape))
        with pytest.raises(FiberFieldError):
            conservation_repair(f, 1.0)

    def test_box_transport_step_keeps_unit_mass(self, gv1):
        gx = SpatialGrid(11, 4.2)
        f = box_initial_field(gx, gv1)
        out = transport_step(f, 0.05)
        assert abs(out.mass() - 1.0) < 1e-12


class TestStrang:
    def test_zero_force_constant_unchanged(self, gv0):
        gx = SpatialGrid(11, 2.0)
        prob = MeanFieldProblem(gx, gv0, A=0.0)
        prob._grad_v = np.zeros((gx.n_points, 3))  # zero-force configuration
        f = KineticField(gx, gv0, np.full((gv0.n_cells,) + gx.shape, 0.3))
        with pytest.warns(UserWarning):
            out = strang_step(f, 0.0, 0.05, prob, None)
        inner = out.values[:, 3:-3, 3:-3, 3:-3]
        assert np.max(np.abs(inner - inner.flat[0])) < 1e-12

    def test_mass_conserved_each_step(self, gv1):
        gx = SpatialGrid(11, 4.2)
        prob = MeanFieldProblem(gx, gv1, A=1.0, U=U_PAPER, kernel=DelayKernel(0.1))
        f = box_initial_field(gx, gv1)
        dt = prob.suggested_dt()
        cache = prob.make_cache(dt)
        cache.push(0.0, moment_density(f))
        for n in range(5):
            f = strang_step(f, n * dt, dt, prob, cache)
            assert abs(f.mass() - 1.0) < 1e-12

    def test_positivity_and_mass_over_run(self):
        # positivity holds wherever the velocity fluxes are in their monotone
        # regime, i.e. the cell Peclet max|F.e| h / (A^2/2) stays below 2;
        # beyond it the Lax-Wendroff-type edge value undershoots like any
        # second-order linear scheme (far-field corners, tiny densities)
        gx = SpatialGrid(9, 2.0)
        gv = build_geodesic_grid(1)
        peclet = 0.5 * gx.L * math.sqrt(3.0) * float(np.max(gv.h)) / 0.5
        assert peclet < 2.0
        prob = MeanFieldProblem(gx, gv, A=1.0, boundary_tol=1.0)
        f = box_initial_field(gx, gv)
        dt = prob.suggested_dt()
        min_f = 0.0
        for n in range(100):
            f = strang_step(f, n * dt, dt, prob, None)
            min_f = min(min_f, float(f.values.min()))
        assert abs(f.mass() - 1.0) < 1e-10
        assert min_f >= -1e-10

    def test_run_meanfield_snapshot_cadence(self, gv0):
        gx = SpatialGrid(9, 4.2)
        prob = MeanFieldProblem(gx, gv0, A=1.0)
        f0 = box_initial_field(gx, gv0)
        final, snaps, masses = run_meanfield(prob, f0, 0.4, snapshot_every=0.2)
        times = [t for (t, _) in snaps]
        assert times == pytest.approx([0.0, 0.2, 0.4])
        assert final.time == pytest.approx(0.4)


class TestKineticCheckpoint:
    def test_roundtrip(self, gv1, tmp_path):
        gx = SpatialGrid(5, 2.0)
        rng = np.random.default_rng(0)
        f = KineticField(gx, gv1, rng.random((gv1.n_cells,) + gx.shape), time=2.5)
        p = tmp_path / "kinetic.npz"
        f.save(p)
        back = KineticField.load(p)
        assert back.grid_x.same_as(gx)
        assert back.grid_v.n_cells == gv1.n_cells
        assert back.time == 2.5
        assert np.array_equal(back.values, f.values)

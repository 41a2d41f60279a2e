"""Strang-split solver for the kinetic mean-field equation on R^3 x S^2.

Velocity space: finite volumes on the geodesic grid with a Lax-Wendroff-type
edge interpolation for the force transport and a two-point flux for the
Laplace-Beltrami diffusion; each velocity stage integrates half of the
(transport - diffusion) operator. Physical space: conservative
semi-Lagrangian step with limited cubic Bezier interpolation and a global
mass repair.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from numba import njit, prange

from .convolve import ForceFieldCache, retarded_force_average
from .core import CoilingPotential, DelayKernel, DensityField, InteractionPotential, SpatialGrid
from .errors import CflViolation, FiberFieldError
from .spheregrid import GeodesicGrid

# cubic Newton interpolant on nodes (-1, 0, 1, 2) re-expressed as Bernstein
# control values on [0, 1]: rows are the control points b0..b3
_NEWTON_TO_BERNSTEIN = np.array(
    [
        [0.0, 1.0, 0.0, 0.0],
        [-1.0 / 9.0, 5.0 / 6.0, 1.0 / 3.0, -1.0 / 18.0],
        [-1.0 / 18.0, 1.0 / 3.0, 5.0 / 6.0, -1.0 / 9.0],
        [0.0, 0.0, 1.0, 0.0],
    ]
)


def bernstein3(xi):
    """The four cubic Bernstein polynomials at xi."""
    om = 1.0 - xi
    return np.array([om**3, 3.0 * xi * om**2, 3.0 * xi**2 * om, xi**3])


def bezier_interpolate(stencil, xi, limiting=True):
    """Cubic Bezier interpolation on a 4x4x4 stencil at local coordinate xi in [0,1]^3.

    Builds the tensor cubic Newton interpolant, changes basis to Bernstein
    control values, optionally shifts control values into [min, max] of the
    stencil, and evaluates. With limiting the result lies in the stencil hull.
    """
    s = np.asarray(stencil, dtype=float)
    if s.shape != (4, 4, 4):
        raise FiberFieldError("stencil must be 4x4x4")
    B = _NEWTON_TO_BERNSTEIN
    ctrl = np.einsum("ia,jb,kc,abc->ijk", B, B, B, s)
    if limiting:
        ctrl = np.clip(ctrl, s.min(), s.max())
    bx, by, bz = bernstein3(xi[0]), bernstein3(xi[1]), bernstein3(xi[2])
    return float(np.einsum("i,j,k,ijk->", bx, by, bz, ctrl))


@njit(cache=True, parallel=True, fastmath=True)
def _advect_cell_kernel(f, sx, sy, sz, wx, wy, wz, limit, out):
    """Semi-Lagrangian shift of one velocity cell's spatial field by (sx,sy,sz) grid units.

    Zero extension outside the box; per-point limited Bezier evaluation with
    precomputed Bernstein weights (the fractional shift is uniform). The
    Newton-to-Bernstein pass per axis only computes the two interior control
    values, the end controls are the grid values themselves.
    """
    nx, ny, nz = f.shape
    bx = int(math.floor(sx))
    by = int(math.floor(sy))
    bz = int(math.floor(sz))
    c18 = 1.0 / 18.0
    for i in prange(nx):
        st = np.empty((4, 4, 4))
        t1 = np.empty((4, 4, 4))
        t2 = np.empty((4, 4, 4))
        for j in range(ny):
            for k in range(nz):
                nonzero = False
                for a in range(4):
                    ia = i + bx - 1 + a
                    inx = 0 <= ia < nx
                    for b in range(4):
                        jb = j + by - 1 + b
                        iny = 0 <= jb < ny
                        for c in range(4):
                            kc = k + bz - 1 + c
                            if inx and iny and 0 <= kc < nz:
                                v = f[ia, jb, kc]
                            else:
                                v = 0.0
                            st[a, b, c] = v
                            if v != 0.0:
                                nonzero = True
                if not nonzero:
                    out[i, j, k] = 0.0
                    continue
                # basis change axis by axis: b0 = f1, b3 = f2,
                # b1 = f1 + (-2 f0 - 3 f1 + 6 f2 - f3)/18, b2 = f2 - (f0 - 6 f1 + 3 f2 + 2 f3)/18
                for b in range(4):
                    for c in range(4):
                        f0 = st[0, b, c]
                        f1 = st[1, b, c]
                        f2 = st[2, b, c]
                        f3 = st[3, b, c]
                        t1[0, b, c] = f1
                        t1[1, b, c] = f1 + (-2.0 * f0 - 3.0 * f1 + 6.0 * f2 - f3) * c18
                        t1[2, b, c] = f2 - (f0 - 6.0 * f1 + 3.0 * f2 + 2.0 * f3) * c18
                        t1[3, b, c] = f2
                for a in range(4):
                    for c in range(4):
                        f0 = t1[a, 0, c]
                        f1 = t1[a, 1, c]
                        f2 = t1[a, 2, c]
                        f3 = t1[a, 3, c]
                        t2[a, 0, c] = f1
                        t2[a, 1, c] = f1 + (-2.0 * f0 - 3.0 * f1 + 6.0 * f2 - f3) * c18
                        t2[a, 2, c] = f2 - (f0 - 6.0 * f1 + 3.0 * f2 + 2.0 * f3) * c18
                        t2[a, 3, c] = f2
                for a in range(4):
                    for b in range(4):
                        f0 = t2[a, b, 0]
                        f1 = t2[a, b, 1]
                        f2 = t2[a, b, 2]
                        f3 = t2[a, b, 3]
                        t1[a, b, 0] = f1
                        t1[a, b, 1] = f1 + (-2.0 * f0 - 3.0 * f1 + 6.0 * f2 - f3) * c18
                        t1[a, b, 2] = f2 - (f0 - 6.0 * f1 + 3.0 * f2 + 2.0 * f3) * c18
                        t1[a, b, 3] = f2
                if limit:
                    lo = st[0, 0, 0]
                    hi = st[0, 0, 0]
                    for a in range(4):
                        for b in range(4):
                            for c in range(4):
                                v = st[a, b, c]
                                if v < lo:
                                    lo = v
                                elif v > hi:
                                    hi = v
                    val = 0.0
                    for a in range(4):
                        for b in range(4):
                            wab = wx[a] * wy[b]
                            for c in range(4):
                                v = t1[a, b, c]
                                if v < lo:
                                    v = lo
                                elif v > hi:
                                    v = hi
                                val += wab * wz[c] * v
                else:
                    val = 0.0
                    for a in range(4):
                        for b in range(4):
                            wab = wx[a] * wy[b]
                            for c in range(4):
                                val += wab * wz[c] * t1[a, b, c]
                out[i, j, k] = val


@njit(cache=True, parallel=True)
def _velocity_flux_kernel(f, force, normals, eci, ecj, elen, h1, h2, hij, inv_area, dth, a2h, out):
    """One half-operator velocity stage for all spatial points.

    f, out: (n_cells, n_pts); force: (n_pts, 3); dth = dt/2 (half operator),
    a2h = A^2/2. Edge value via the two-cell Lax-Wendroff-type interpolation,
    diffusion via the two-point midpoint-arc flux.
    """
    n_pts = f.shape[1]
    n_edges = eci.shape[0]
    n_cells = f.shape[0]
    for p in prange(n_pts):
        for c in range(n_cells):
            out[c, p] = f[c, p]
        for e in range(n_edges):
            i = eci[e]
            j = ecj[e]
            fe = 0.5 * (
                force[p, 0] * normals[e, 0] + force[p, 1] * normals[e, 1] + force[p, 2] * normals[e, 2]
            )
            wi = (h1[e] + dth * fe) / hij[e]
            wj = (h2[e] - dth * fe) / hij[e]
            fedge = wi * f[i, p] + wj * f[j, p]
            flux = elen[e] * (fe * fedge + a2h * (f[j, p] - f[i, p]) / hij[e])
            out[i, p] += dth * flux * inv_area[i]
            out[j, p] -= dth * flux * inv_area[j]


@dataclass
class KineticField:
    """Cell averages of f over spatial grid x geodesic velocity grid.

    values has shape (n_velocity_cells,) + grid_x.shape; the checkpoint order
    flattens velocity cell first, then the lexicographic spatial index.
    """

    grid_x: SpatialGrid
    grid_v: GeodesicGrid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        expected = (self.grid_v.n_cells,) + self.grid_x.shape
        if self.values.shape != expected:
            raise FiberFieldError(f"kinetic field shape {self.values.shape}, expected {expected}")

    def mass(self):
        per_cell = self.values.reshape(self.grid_v.n_cells, -1).sum(axis=1)
        return float(self.grid_v.area @ per_cell) / (4.0 * math.pi) * self.grid_x.dx**3

    def copy(self):
        return KineticField(self.grid_x, self.grid_v, self.values.copy(), self.time)

    def clipped_nonnegative(self):
        """Output view with the limiter's tiny negatives removed (state is never clipped)."""
        return np.maximum(self.values, 0.0)

    def save(self, path):
        np.savez(
            path,
            n_x=self.grid_x.n_x,
            L=self.grid_x.L,
            level=self.grid_v.level,
            time=self.time,
            mass=self.mass(),
            values=self.values.reshape(self.grid_v.n_cells, -1),
        )

    @classmethod
    def load(cls, path):
        from .spheregrid import build_geodesic_grid

        with np.load(path) as z:
            grid_x = SpatialGrid(int(z["n_x"]), float(z["L"]))
            grid_v = build_geodesic_grid(int(z["level"]))
            values = z["values"].reshape((grid_v.n_cells,) + grid_x.shape)
            return cls(grid_x, grid_v, values, float(z["time"]))


def moment_density(f: KineticField) -> DensityField:
    """Zeroth moment over the normalized surface measure: rho = sum_i f_i |T_i| / 4pi."""
    rho = np.tensordot(f.grid_v.area, f.values, axes=(0, 0)) / (4.0 * math.pi)
    return DensityField(f.grid_x, rho, f.time)


def velocity_halfstep(f: KineticField, force_vec, A, dt) -> KineticField:
    """Integrate half the (force transport - diffusion) velocity operator over dt.

    force_vec is gradV + retarded interaction per spatial point, shape
    (n_pts, 3); the half factor 1/2 of the split and the 1/2 projector factor
    of the edge force are applied here.
    """
    g = f.grid_v
    n_pts = f.grid_x.n_points
    force_vec = np.ascontiguousarray(force_vec, dtype=float)
    if force_vec.shape != (n_pts, 3):
        raise FiberFieldError("force must have shape (n_points, 3)")

    fmax = 0.5 * float(np.max(np.linalg.norm(force_vec, axis=1)))  # bound on |F.e|
    min_h12 = float(min(np.min(g.h1), np.min(g.h2)))
    adv = dt * fmax / min_h12
    dif = dt * (0.5 * A * A) / float(np.min(g.h)) ** 2
    if adv > 1.0:
        raise CflViolation(f"velocity CFL violated by the force transport: dt*max|F.e|/min(h1,h2) = {adv:.3g} > 1")
    if dif > 0.5:
        raise CflViolation(f"velocity CFL violated by the diffusion: dt*(A^2/2)/min(h)^2 = {dif:.3g} > 1/2")

    fin = f.values.reshape(g.n_cells, n_pts)
    out = np.empty_like(fin)
    _velocity_flux_kernel(
        fin,
        force_vec,
        g.edge_normal,
        g.edge_cells[:, 0],
        g.edge_cells[:, 1],
        g.edge_len,
        g.h1,
        g.h2,
        g.h,
        1.0 / g.area,
        0.5 * dt,
        0.5 * A * A,
        out,
    )
    return KineticField(f.grid_x, g, out.reshape(f.values.shape), f.time)


def conservation_repair(f_new: KineticField, mass_before) -> KineticField:
    """Rescale globally so the discrete mass returns to mass_before."""
    mass_after = f_new.mass()
    if mass_after == mass_before:
        return f_new
    if mass_after <= 0.0 and mass_before > 0.0:
        raise FiberFieldError("conservation repair impossible: step lost all mass")
    out = f_new.copy()
    out.values *= mass_before / mass_after
    return out


def transport_step(f: KineticField, dt, limiting=True, boundary_tol=1e-6) -> KineticField:
    """Semi-Lagrangian spatial transport: f(t+dt, x, tau_i) = f(t, x - dt tau_i, tau_i).

    Back-traced values come from the limited Bezier interpolant with zero
    extension outside the box; the global conservation repair runs afterwards.
    A warning diagnostic fires when the field is not negligible at the
    boundary (zero extension then leaks mass).
    """
    if dt == 0.0:
        return f.copy()
    g = f.grid_v
    dx = f.grid_x.dx
    mass_before = f.mass()

    peak = float(np.max(np.abs(f.values)))
    if peak > 0.0:
        shell = np.concatenate(
            [
                f.values[:, 0, :, :].ravel(), f.values[:, -1, :, :].ravel(),
                f.values[:, :, 0, :].ravel(), f.values[:, :, -1, :].ravel(),
                f.values[:, :, :, 0].ravel(), f.values[:, :, :, -1].ravel(),
            ]
        )
        boundary_peak = float(np.max(np.abs(shell)))
        if boundary_peak > boundary_tol * peak:
            warnings.warn(
                f"density not negligible at the domain boundary (ratio {boundary_peak / peak:.2e}); "
                "zero extension will leak mass",
                stacklevel=2,
            )

    out = np.empty_like(f.values)
    for c in range(g.n_cells):
        s = -dt * g.mid[c] / dx
        frac = s - np.floor(s)
        wx, wy, wz = bernstein3(frac[0]), bernstein3(frac[1]), bernstein3(frac[2])
        _advect_cell_kernel(f.values[c], s[0], s[1], s[2], wx, wy, wz, limiting, out[c])
    advected = KineticField(f.grid_x, g, out, f.time)
    return conservation_repair(advected, mass_before)


@dataclass
class MeanFieldProblem:
    """Static data of one mean-field evolution."""

    grid_x: SpatialGrid
    grid_v: GeodesicGrid
    A: float
    V: CoilingPotential = dc_field(default_factory=CoilingPotential)
    U: Optional[InteractionPotential] = None
    kernel: DelayKernel = dc_field(default_factory=DelayKernel)
    threshold_frac: float = 0.001
    boundary_tol: float = 1e-6

    def __post_init__(self):
        if self.grid_x.d != 3:
            raise FiberFieldError("the mean-field solver is three-dimensional")
        self._grad_v = self.V.grad(self.grid_x.points())

    def make_cache(self, dt):
        if self.U is None:
            return None
        return ForceFieldCache(self.grid_x, self.U, self.kernel, dt, self.threshold_frac, mode="force")

    def force_vector(self, cache, t):
        """gradV + retarded interaction average at every spatial point, (n_pts, 3)."""
        force = self._grad_v
        if cache is not None:
            G = retarded_force_average(cache, t, self.kernel)
            force = force + G.reshape(3, -1).T
        return force

    def suggested_dt(self, force_bound=None, safety=0.5):
        """Largest dt passing both velocity CFL constraints, times `safety`.

        force_bound defaults to max|gradV| on the grid plus the worst-case
        interaction pull max|gradU| (the convolved force of a unit-mass
        density can never exceed it).
        """
        if force_bound is None:
            force_bound = float(np.max(np.linalg.norm(self._grad_v, axis=1)))
            if self.U is not None:
                r = np.linspace(0.0, self.U.support_radius(), 4096)
                force_bound += float(np.max(np.abs(self.U.grad_factor_r2(r * r) * r)))
        g = self.grid_v
        lim_adv = float(min(np.min(g.h1), np.min(g.h2))) / (0.5 * force_bound) if force_bound > 0 else np.inf
        lim_dif = 0.5 * float(np.min(g.h)) ** 2 / (0.5 * self.A * self.A) if self.A > 0 else np.inf
        lim_trace = self.grid_x.dx
        return safety * min(lim_adv, lim_dif, lim_trace)


def strang_step(f: KineticField, t, dt, prob: MeanFieldProblem, cache) -> KineticField:
    """velocity(dt) o transport(dt) o velocity(dt), then record the new density.

    Each velocity stage integrates half the (S - L) operator; the retarded
    force is frozen over the step and the cache receives the post-step
    density once.
    """
    force = prob.force_vector(cache, t)
    f1 = velocity_halfstep(f, force, prob.A, dt)
    f2 = transport_step(f1, dt, boundary_tol=prob.boundary_tol)
    f3 = velocity_halfstep(f2, force, prob.A, dt)
    f3.time = t + dt
    if cache is not None:
        cache.push(f3.time, moment_density(f3))
    return f3


def run_meanfield(prob: MeanFieldProblem, f0: KineticField, T, dt=None, snapshot_every=None, force_bound=None):
    """Evolve f0 to T with Strang steps; densities are snapshotted on the physical-time cadence.

    dt defaults to the CFL-derived suggestion; when a snapshot cadence is
    given, dt is shrunk to divide it exactly so comparison times never depend
    on dt. Returns (final field, [(t, DensityField)], [(t, mass)]).
    """
    if dt is None:
        dt = prob.suggested_dt(force_bound=force_bound)
    if snapshot_every is not None:
        dt = snapshot_every / math.ceil(snapshot_every / dt)
        every = int(round(snapshot_every / dt))
    else:
        dt = T / math.ceil(T / dt)
        every = None
    n_steps = int(math.ceil(T / dt - 1e-12))

    cache = prob.make_cache(dt)
    if cache is not None:
        cache.push(0.0, moment_density(f0))
    snaps = []
    masses = [(0.0, f0.mass())]
    if every is not None:
        snaps.append((0.0, moment_density(f0)))
    f = f0
    for n in range(n_steps):
        f = strang_step(f, n * dt, dt, prob, cache)
        if every is not None and (n + 1) % every == 0:
            snaps.append((f.time, moment_density(f)))
            masses.append((f.time, f.mass()))
    if every is None:
        snaps.append((f.time, moment_density(f)))
        masses.append((f.time, f.mass()))
    return f, snaps, masses


def box_initial_field(grid_x: SpatialGrid, grid_v: GeodesicGrid, subdiv=4) -> KineticField:
    """Paper initial data: uniform on [-1,1]^3 x upper hemisphere, unit mass.

    Spatial cells carry the exact overlap fraction of their dx-cube with the
    box; velocity cells carry the tau_3 > 0 area fraction from subdivision
    quadrature, so ragged cells at the box face and equator are weighted.
    """
    ax = grid_x.axis()
    half = grid_x.dx / 2.0
    over = np.clip(np.minimum(ax + half, 1.0) - np.maximum(ax - half, -1.0), 0.0, None) / grid_x.dx
    wx = over[:, None, None] * over[None, :, None] * over[None, None, :]

    tri = np.stack([grid_v.vertices[grid_v.cells[:, i]] for i in range(3)], axis=1)
    for _ in range(subdiv):
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        ab = (a + b) / np.linalg.norm(a + b, axis=-1, keepdims=True)
        bc = (b + c) / np.linalg.norm(b + c, axis=-1, keepdims=True)
        ca = (c + a) / np.linalg.norm(c + a, axis=-1, keepdims=True)
        tri = np.concatenate(
            [
                np.stack([a, ab, ca], axis=1),
                np.stack([ab, b, bc], axis=1),
                np.stack([ca, bc, c], axis=1),
                np.stack([ab, bc, ca], axis=1),
            ],
            axis=0,
        )
    n_sub = tri.shape[0] // grid_v.n_cells
    up = (tri.sum(axis=1)[:, 2] > 0).astype(float)
    frac = up.reshape(n_sub, grid_v.n_cells).mean(axis=0)

    values = frac[:, None, None, None] * wx[None]
    fld = KineticField(grid_x, grid_v, values)
    m = fld.mass()
    if m <= 0:
        raise FiberFieldError("box initial condition has no mass on this grid")
    fld.values /= m
    return fld


def gaussian_initial_field(grid_x: SpatialGrid, grid_v: GeodesicGrid, sigma=0.7) -> KineticField:
    """Smooth initial data for convergence studies: Gaussian bump x tilted sphere profile."""
    r2 = grid_x.radius() ** 2
    spat = np.exp(-r2 / (2.0 * sigma * sigma))
    vel = 1.0 + 0.5 * grid_v.mid[:, 2]
    fld = KineticField(grid_x, grid_v, vel[:, None, None, None] * spat[None])
    fld.values /= fld.mass()
    return fld


def isotropic_field(rho: DensityField, grid_v: GeodesicGrid) -> KineticField:
    """Direction-independent field with the given spatial density.

    A density solving the stationary integral equation lifts this way to an
    exact stationary solution of the kinetic equation, which makes it the
    natural start for steady-state comparisons.
    """
    vals = np.broadcast_to(rho.values[None], (grid_v.n_cells,) + rho.values.shape).copy()
    fld = KineticField(rho.grid, grid_v, vals)
    fld.values /= fld.mass()
    return fld

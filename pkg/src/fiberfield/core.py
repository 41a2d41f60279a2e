"""Shared domain types: potentials, delay kernel, tangent projection, spatial grids.

All types here are immutable after construction and safe for concurrent reads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FiberFieldError


@dataclass(frozen=True)
class FiberState:
    """Position x in R^d plus unit tangent tau on the sphere S^{d-1}."""

    x: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        tau = np.asarray(self.tau, dtype=float)
        if x.shape != tau.shape or x.ndim != 1 or x.shape[0] not in (2, 3):
            raise FiberFieldError(f"state must be two d-vectors with d in {{2,3}}, got {x.shape}/{tau.shape}")
        if abs(np.linalg.norm(tau) - 1.0) > 1e-12:
            raise FiberFieldError("tangent must be unit length to 1e-12")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "tau", tau)

    @property
    def d(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class CoilingPotential:
    """Confining potential pulling fibers toward the deposition center.

    Only the quadratic kind V(x) = |x|^2 / 2 is implemented; the enum exists so
    further kinds can be added without changing call sites.
    """

    kind: str = "quadratic"

    def __post_init__(self):
        if self.kind != "quadratic":
            raise FiberFieldError(f"unknown coiling potential kind {self.kind!r}")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * x, axis=-1)

    def grad(self, x):
        return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class InteractionPotential:
    """Repulsive finite-range pair potential, radially symmetric.

    kinds:
      mollifier         U(r) = C exp(-(2R)^2 / ((2R)^2 - r^2)) for r < 2R, else 0
      smooth_heaviside  U(r) = C / (1 + exp(-k (1 - r^2/(2R)^2)))
    """

    kind: str
    C: float
    R: float
    k: float = 0.0

    def __post_init__(self):
        if self.kind not in ("mollifier", "smooth_heaviside"):
            raise FiberFieldError(f"unknown interaction potential kind {self.kind!r}")
        if not (self.C > 0 and self.R > 0):
            raise FiberFieldError("interaction potential needs C > 0 and R > 0")
        if self.kind == "smooth_heaviside" and not self.k > 0:
            raise FiberFieldError("smooth_heaviside needs regularization k > 0")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        return self.value_r2(r2)

    def value_r2(self, r2):
        """Potential as a function of squared radius (radial symmetry)."""
        r2 = np.asarray(r2, dtype=float)
        a2 = (2.0 * self.R) ** 2
        if self.kind == "mollifier":
            out = np.zeros_like(r2)
            inside = r2 < a2
            out[inside] = self.C * np.exp(-a2 / (a2 - r2[inside]))
            return out
        # smooth heaviside: stable sigmoid in the exponent a = k (r^2/a2 - 1)
        a = self.k * (r2 / a2 - 1.0)
        return self.C / (1.0 + np.exp(np.clip(a, -700.0, 700.0)))

    def grad_factor_r2(self, r2):
        """g(r^2) with grad U(x) = g(|x|^2) * x; g <= 0 for repulsive U."""
        r2 = np.asarray(r2, dtype=float)
        a2 = (2.0 * self.R) ** 2
        if self.kind == "mollifier":
            out = np.zeros_like(r2)
            inside = r2 < a2
            q = a2 - r2[inside]
            out[inside] = -2.0 * self.C * a2 * np.exp(-a2 / q) / (q * q)
            return out
        # d/dr2 of the sigmoid; written via cosh for overflow safety
        a = self.k * (r2 / a2 - 1.0)
        c = np.cosh(np.clip(np.abs(a) * 0.5, None, 400.0))
        return -(2.0 * self.C * self.k / a2) / (4.0 * c * c)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        return self.grad_factor_r2(r2)[..., None] * x

    def support_radius(self):
        """Radius beyond which the force is numerically negligible (exactly 2R for the mollifier)."""
        if self.kind == "mollifier":
            return 2.0 * self.R
        # |grad factor| underflows once cosh^2 does; solve k(s-1)/2 = 800
        a2 = (2.0 * self.R) ** 2
        return math.sqrt(a2 * (1.0 + 1600.0 / self.k))


def eval_potential_grad(pot, x):
    """Analytic gradient of a coiling or interaction potential at x (zero at x = 0 for radial U)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise FiberFieldError("potential gradient requested at non-finite point")
    return pot.grad(x)


INF = float("inf")


@dataclass(frozen=True)
class DelayKernel:
    """Look-back window h(t) = min(t, H).

    H = inf reproduces the full-history model, H = 0 the non-retarded limit
    (degenerate window; callers treat it as the instantaneous interaction).
    """

    H: float = INF

    def __post_init__(self):
        if not (self.H >= 0):
            raise FiberFieldError("cut-off H must be >= 0 (inf allowed)")

    def h(self, t):
        return min(t, self.H)

    def window(self, t):
        """(t - h(t), t); degenerate (0, 0) at t = 0."""
        if t < 0:
            raise FiberFieldError("delay window requires t >= 0")
        return (t - self.h(t), t)


def delay_window(t, kernel):
    return kernel.window(t)


def project_tangent(tau, v):
    """Project v onto the tangent space at tau: v - (tau.v) tau. Requires |tau| = 1 to 1e-9."""
    tau = np.asarray(tau, dtype=float)
    v = np.asarray(v, dtype=float)
    nrm = np.linalg.norm(tau, axis=-1)
    if np.any(np.abs(nrm - 1.0) > 1e-9):
        raise FiberFieldError("project_tangent requires unit tau (|tau| within 1e-9 of 1)")
    dot = np.sum(tau * v, axis=-1, keepdims=True)
    return v - dot * tau


@dataclass(frozen=True)
class SpatialGrid:
    """Equidistant point grid on [-L, L]^d, n_x points per axis, lexicographic enumeration.

    The discrete integral convention throughout the toolkit is the midpoint
    rule sum(values) * dx^d over the grid points.
    """

    n_x: int
    L: float
    d: int = 3

    def __post_init__(self):
        if self.n_x < 3:
            raise FiberFieldError("grid needs n_x >= 3 points per axis")
        if not self.L > 0:
            raise FiberFieldError("grid half-width L must be positive")
        if self.d not in (2, 3):
            raise FiberFieldError("grid dimension must be 2 or 3")

    @property
    def dx(self):
        return 2.0 * self.L / (self.n_x - 1)

    @property
    def shape(self):
        return (self.n_x,) * self.d

    @property
    def n_points(self):
        return self.n_x**self.d

    def axis(self):
        return np.linspace(-self.L, self.L, self.n_x)

    def points(self):
        """All grid points, shape (n_x^d, d), lexicographic (last axis fastest)."""
        ax = self.axis()
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def radius(self):
        """|x| at every grid point, shaped like the grid."""
        pts = self.points()
        return np.linalg.norm(pts, axis=-1).reshape(self.shape)

    def same_as(self, other):
        return (self.n_x, self.d) == (other.n_x, other.d) and abs(self.L - other.L) < 1e-12


@dataclass
class DensityField:
    """Spatial density on a SpatialGrid; unit total mass when normalized."""

    grid: SpatialGrid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise FiberFieldError(f"density shape {self.values.shape} does not match grid {self.grid.shape}")

    def mass(self):
        return float(np.sum(self.values)) * self.grid.dx**self.grid.d

    def normalized(self):
        m = self.mass()
        if m <= 0:
            raise FiberFieldError("cannot normalize a field with non-positive mass")
        return DensityField(self.grid, self.values / m, self.time)

    def l2_distance(self, other):
        if not self.grid.same_as(other.grid):
            raise FiberFieldError("L2 distance requires matching grids")
        diff = self.values - other.values
        return math.sqrt(float(np.sum(diff * diff)) * self.grid.dx**self.grid.d)

    def second_radial_moment(self):
        r = self.grid.radius()
        return float(np.sum(r * r * self.values)) * self.grid.dx**self.grid.d

    def save(self, path):
        np.savez(
            path,
            n_x=self.grid.n_x,
            L=self.grid.L,
            d=self.grid.d,
            time=self.time,
            mass=self.mass(),
            values=self.values.ravel(),
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            grid = SpatialGrid(int(z["n_x"]), float(z["L"]), int(z["d"]))
            return cls(grid, z["values"].reshape(grid.shape), float(z["time"]))

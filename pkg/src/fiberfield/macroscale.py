"""Explicit conservative solver for the diffusion-limit drift-diffusion equation.

d_t rho = kappa div[ rho grad( ln rho + V + retarded U*rho ) ],
kappa = 2 / (d (d-1) A^2). Face fluxes combine the exact grad(rho) form of
the entropy part with a logarithmic-mean face density on the potential part:
the logarithmic mean L(a,b) = (b-a)/ln(b/a) satisfies L * (ln b - ln a) =
b - a identically, so a density solving the discrete integral equation
ln rho + V + U*rho = c is annihilated exactly, vanishes with either side
(vacuum-safe, no logarithm is ever taken), and deviates from the arithmetic
mean only at second order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .convolve import ForceFieldCache
from .core import CoilingPotential, DelayKernel, DensityField, InteractionPotential, SpatialGrid
from .errors import CflViolation, FiberFieldError


@dataclass
class MacroConfig:
    grid: SpatialGrid
    A: float
    dt: float
    T: float
    V: CoilingPotential = field(default_factory=CoilingPotential)
    U: Optional[InteractionPotential] = None
    kernel: DelayKernel = field(default_factory=DelayKernel)
    threshold_frac: float = 0.0
    d: int = 3

    def __post_init__(self):
        if not self.A > 0:
            raise FiberFieldError("diffusion limit requires A > 0")
        if self.d != self.grid.d:
            raise FiberFieldError("config dimension does not match the grid")
        self._v_grid = self.V.value(self.grid.points()).reshape(self.grid.shape)

    @property
    def kappa(self):
        return 2.0 / (self.d * (self.d - 1) * self.A**2)

    def make_cache(self):
        if self.U is None:
            return None
        return ForceFieldCache(self.grid, self.U, self.kernel, self.dt, self.threshold_frac, mode="potential")

    def suggested_dt(self, safety=0.5):
        return safety * 0.25 * self.grid.dx**2 / self.kappa


def _log_mean(a, b):
    """(b - a)/ln(b/a), continuously extended: = a at a = b, -> 0 as either -> 0."""
    out = np.zeros_like(a)
    both = (a > 0.0) & (b > 0.0)
    aa, bb = a[both], b[both]
    close = np.abs(bb - aa) <= 1e-12 * np.maximum(aa, bb)
    lm = np.empty_like(aa)
    lm[close] = 0.5 * (aa[close] + bb[close])
    nc = ~close
    lm[nc] = (bb[nc] - aa[nc]) / (np.log(bb[nc]) - np.log(aa[nc]))
    out[both] = lm
    return out


def diffusion_limit_step(rho: DensityField, t, cfg: MacroConfig, cache: Optional[ForceFieldCache]) -> DensityField:
    """One explicit conservative step with zero-flux boundaries.

    Face flux along each axis: kappa [ (rho_Q - rho_P)/dx + L(rho_P, rho_Q)
    (phi_Q - phi_P)/dx ] with phi = V + time-averaged U*rho.
    """
    if not cfg.grid.same_as(rho.grid):
        raise FiberFieldError("density grid does not match the config grid")
    kappa = cfg.kappa
    dx = cfg.grid.dx
    cfl = kappa * cfg.dt / dx**2
    if cfl > 0.25 + 1e-12:
        raise CflViolation(f"macro diffusion CFL violated: kappa*dt/dx^2 = {cfl:.3g} > 1/4")

    phi = cfg._v_grid.copy()
    if cache is not None:
        phi += cache.average(t)

    vals = rho.values
    new = vals.copy()
    for ax in range(cfg.grid.d):
        lo = tuple(slice(None) if a != ax else slice(0, -1) for a in range(cfg.grid.d))
        hi = tuple(slice(None) if a != ax else slice(1, None) for a in range(cfg.grid.d))
        rho_p, rho_q = vals[lo], vals[hi]
        flux = kappa * ((rho_q - rho_p) / dx + _log_mean(rho_p, rho_q) * (phi[hi] - phi[lo]) / dx)
        # interior faces only; the domain boundary carries zero flux
        new[lo] += cfg.dt / dx * flux
        new[hi] -= cfg.dt / dx * flux
    out = DensityField(cfg.grid, new, t + cfg.dt)
    if cache is not None:
        cache.push(out.time, out)
    return out


def run_macro(cfg: MacroConfig, rho0: DensityField, snapshot_every=None):
    """Evolve to T; returns the final density and (t, density) snapshots."""
    n_steps = int(round(cfg.T / cfg.dt))
    cache = cfg.make_cache()
    if cache is not None:
        cache.push(0.0, rho0)
    snaps = []
    every = None
    if snapshot_every is not None:
        every = max(1, int(round(snapshot_every / cfg.dt)))
        snaps.append((0.0, DensityField(cfg.grid, rho0.values.copy(), 0.0)))
    rho = rho0
    for n in range(n_steps):
        rho = diffusion_limit_step(rho, n * cfg.dt, cfg, cache)
        if every is not None and (n + 1) % every == 0:
            snaps.append((rho.time, DensityField(cfg.grid, rho.values.copy(), rho.time)))
    return rho, snaps

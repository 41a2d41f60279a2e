"""Grid convolutions with the interaction potential and their time-averaged history.

The pair potential is translation invariant and the grid equidistant, so the
neighbor structure is one offset stencil shared by every grid point: all
offsets whose kernel weight exceeds threshold_frac of the maximal weight.
The thresholded stencil sum is evaluated through an FFT, which computes the
identical bilinear form in O(n log n).
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np
from scipy.signal import fftconvolve

from .core import DelayKernel, DensityField, InteractionPotential, SpatialGrid
from .errors import CacheMismatchError, FiberFieldError, MissingHistoryError


class ConvolutionKernel:
    """Thresholded offset-lattice weights of U (scalar) or grad U (vector)."""

    def __init__(self, grid: SpatialGrid, U: InteractionPotential, threshold_frac: float, mode: str):
        if not (0.0 <= threshold_frac < 1.0):
            raise FiberFieldError("threshold_frac must lie in [0, 1)")
        if mode not in ("force", "potential"):
            raise FiberFieldError(f"unknown convolution mode {mode!r}")
        self.grid = grid
        self.U = U
        self.threshold_frac = threshold_frac
        self.mode = mode

        n = grid.n_x
        ax = np.arange(-(n - 1), n) * grid.dx
        mesh = np.meshgrid(*([ax] * grid.d), indexing="ij")
        offsets = np.stack(mesh, axis=-1)
        r2 = np.sum(offsets * offsets, axis=-1)
        if mode == "force":
            w = U.grad_factor_r2(r2)[..., None] * offsets  # gradU at each offset
            mag = np.linalg.norm(w, axis=-1)
        else:
            w = U.value_r2(r2)
            mag = np.abs(w)
        keep = mag >= threshold_frac * float(mag.max())
        self.n_neighbors = int(np.count_nonzero(keep))
        if mode == "force":
            w = np.where(keep[..., None], w, 0.0)
            weights = np.moveaxis(w, -1, 0)  # (d, 2n-1, ...)
        else:
            weights = np.where(keep, w, 0.0)
        # crop to the symmetric bounding box of the active offsets; keeping the
        # center preserves the 'same'-mode alignment of the convolution
        if self.n_neighbors:
            active = np.argwhere(keep)
            reach = int(np.max(np.abs(active - (n - 1)))) if active.size else 0
            lo, hi = (n - 1) - reach, (n - 1) + reach + 1
            sl = (slice(None),) * (weights.ndim - grid.d) + (slice(lo, hi),) * grid.d
            weights = weights[sl]
        self.weights = np.ascontiguousarray(weights)

    def matches(self, grid, U, threshold_frac=None):
        same = self.grid.same_as(grid) and self.U == U
        if threshold_frac is not None:
            same = same and abs(self.threshold_frac - threshold_frac) < 1e-15
        return same

    def apply(self, rho_values):
        """Convolve: out(x_i) = sum_l w(x_i - x_l) rho(x_l) dx^d, zero outside the box."""
        rho_values = np.asarray(rho_values, dtype=float)
        if rho_values.shape != self.grid.shape:
            raise CacheMismatchError("density shape does not match the kernel grid")
        scale = self.grid.dx**self.grid.d
        if self.mode == "potential":
            return fftconvolve(rho_values, self.weights, mode="same") * scale
        out = np.empty((self.grid.d,) + self.grid.shape)
        for a in range(self.grid.d):
            out[a] = fftconvolve(rho_values, self.weights[a], mode="same") * scale
        return out

    def apply_direct(self, rho_values):
        """Direct offset-loop evaluation of the same sum (slow reference path)."""
        rho_values = np.asarray(rho_values, dtype=float)
        n = self.grid.n_x
        d = self.grid.d
        scale = self.grid.dx**d
        comps = 1 if self.mode == "potential" else d
        out = np.zeros((comps,) + self.grid.shape)
        for a in range(comps):
            wa = self.weights if self.mode == "potential" else self.weights[a]
            center = (wa.shape[0] - 1) // 2
            idx = np.argwhere(wa != 0.0)
            for off in idx:
                m = off - center
                src = tuple(slice(max(0, -mi), n - max(0, mi)) for mi in m)
                dst = tuple(slice(max(0, mi), n - max(0, -mi)) for mi in m)
                out[(a,) + dst] += wa[tuple(off)] * rho_values[src] * scale
        return out[0] if self.mode == "potential" else out


def convolution_force(rho: DensityField, U, threshold_frac, cache) -> np.ndarray:
    """Midpoint-rule convolution of grad U with rho over the cached neighbor stencil."""
    kern = cache.force_kernel
    if not kern.matches(rho.grid, U, threshold_frac):
        raise CacheMismatchError("cache was built for a different grid, potential, or threshold")
    return kern.apply(rho.values)


class ForceFieldCache:
    """Per-step convolution fields plus their running delay average.

    For H = inf the average is the arithmetic mean of every recorded field
    (kept as a running sum); for finite H a ring buffer holds the window; for
    H = 0 only the latest field is retained.
    """

    def __init__(self, grid, U, kernel: DelayKernel, dt_record, threshold_frac=0.0, mode="force"):
        self.grid = grid
        self.U = U
        self.kernel = kernel
        self.dt_record = dt_record
        self.mode = mode
        self.force_kernel = ConvolutionKernel(grid, U, threshold_frac, mode)
        self._sum = None
        self._count = 0
        self._entries = deque()  # (t, field) newest last
        self._last = None
        self._last_t = None

    def push(self, t, rho: DensityField):
        """Record the convolution field of rho at time t."""
        field = self.force_kernel.apply(rho.values)
        self._last = field
        self._last_t = t
        if not math.isfinite(self.kernel.H):
            if self._sum is None:
                self._sum = np.array(field, copy=True)
            else:
                self._sum += field
            self._count += 1
        elif self.kernel.H > 0:
            self._entries.append((t, field))
            cutoff = t - self.kernel.H - 2.0 * self.dt_record
            while self._entries and self._entries[0][0] < cutoff:
                self._entries.popleft()
        return field

    def average(self, t):
        """Delay-averaged field at time t (equal weights over the recorded window)."""
        if self._last is None:
            raise MissingHistoryError("no convolution fields recorded yet")
        H = self.kernel.H
        if not math.isfinite(H):
            return self._sum / self._count
        if H == 0.0:
            return self._last
        lo = t - self.kernel.h(t) - 1e-9 * max(self.dt_record, 1.0)
        sel = [f for (tk, f) in self._entries if lo <= tk <= t + 1e-12]
        if not sel:
            raise MissingHistoryError(f"no recorded fields inside the delay window at t={t:.6g}")
        out = np.array(sel[0], copy=True)
        for f in sel[1:]:
            out += f
        return out / len(sel)


def retarded_force_average(cache: ForceFieldCache, t, kernel: DelayKernel):
    """Time average of the recorded convolution fields over [t - h(t), t]."""
    if abs(kernel.H - cache.kernel.H) > 1e-15 and not (math.isinf(kernel.H) and math.isinf(cache.kernel.H)):
        raise CacheMismatchError("cache was built for a different delay kernel")
    return cache.average(t)

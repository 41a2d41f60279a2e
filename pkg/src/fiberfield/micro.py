"""Euler-Maruyama integration of the retarded stochastic interacting fiber system.

The ensemble is split into independent groups; fibers interact only within
their group (weak coupling 1/N per group). Noise is drawn from counter-based
Philox streams keyed by (seed, group) with the step index in the counter, so
results are bit-identical regardless of scheduling or thread count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit, prange

from .core import CoilingPotential, DelayKernel, DensityField, InteractionPotential, SpatialGrid, project_tangent
from .errors import FiberFieldError, MissingHistoryError, NonFiniteStateError


@njit(cache=True, parallel=True)
def _mean_force_kernel(x, snaps, kind, C, a2, k, r2cut, out):
    """out[i] = (1/(S*N)) sum_s sum_j gradU(x[i] - snaps[s, j]).

    gradU(y) = g(|y|^2) * y with the repulsive factor g <= 0; pairs beyond
    r2cut contribute exactly zero and are skipped.
    """
    n, d = x.shape
    s_cnt = snaps.shape[0]
    for i in prange(n):
        acc = np.zeros(d)
        for s in range(s_cnt):
            for j in range(n):
                r2 = 0.0
                for a in range(d):
                    t = x[i, a] - snaps[s, j, a]
                    r2 += t * t
                if r2 >= r2cut:
                    continue
                if kind == 0:
                    q = a2 - r2
                    g = -2.0 * C * a2 * math.exp(-a2 / q) / (q * q)
                else:
                    arg = 0.5 * k * (r2 / a2 - 1.0)
                    if arg > 400.0:
                        arg = 400.0
                    elif arg < -400.0:
                        arg = -400.0
                    c = math.cosh(arg)
                    g = -(2.0 * C * k / a2) / (4.0 * c * c)
                for a in range(d):
                    acc[a] += g * (x[i, a] - snaps[s, j, a])
        for a in range(d):
            out[i, a] = acc[a] / (s_cnt * n)


def _potential_kernel_args(U: InteractionPotential):
    kind = 0 if U.kind == "mollifier" else 1
    a2 = (2.0 * U.R) ** 2
    return kind, U.C, a2, U.k, U.support_radius() ** 2


def mean_pair_force(x, snapshots, U):
    """Vectorized (1/(S N)) sum over snapshots and fibers of gradU(x_i - x_s^j)."""
    x = np.ascontiguousarray(x, dtype=float)
    snaps = np.ascontiguousarray(snapshots, dtype=float)
    if snaps.ndim == 2:
        snaps = snaps[None]
    out = np.empty_like(x)
    kind, C, a2, k, r2cut = _potential_kernel_args(U)
    _mean_force_kernel(x, snaps, kind, C, a2, k, r2cut, out)
    return out


class HistoryBuffer:
    """Subsampled ring buffer of past group positions realizing the delay integral.

    Records every `stride`-th step. For finite H the oldest retained entry is
    never older than t - H - stride*dt.
    """

    def __init__(self, stride: int, dt: float, kernel: DelayKernel):
        if stride < 1:
            raise FiberFieldError("buffer stride must be >= 1")
        self.stride = stride
        self.dt = dt
        self.kernel = kernel
        self._steps: list[int] = []
        self._snaps: list[np.ndarray] = []

    def __len__(self):
        return len(self._steps)

    @property
    def times(self):
        return [s * self.dt for s in self._steps]

    def maybe_record(self, step: int, positions: np.ndarray):
        if step % self.stride != 0:
            return
        if self._steps and step <= self._steps[-1]:
            raise FiberFieldError("buffer entries must be recorded with strictly increasing steps")
        self._steps.append(step)
        self._snaps.append(np.array(positions, dtype=float, copy=True))
        if math.isfinite(self.kernel.H):
            # evict entries older than the largest window we will ever query
            cutoff = step - (self.kernel.H / self.dt) - self.stride - 1e-9
            while self._steps and self._steps[0] < cutoff:
                self._steps.pop(0)
                self._snaps.pop(0)

    def window(self, t: float):
        """Stacked snapshots covering [t - h(t), t]; empty array if none qualify."""
        if not self._steps:
            return np.empty((0, 0, 0))
        lo = (t - self.kernel.h(t)) / self.dt - 1e-9
        hi = t / self.dt + 1e-9
        sel = [k for k, s in enumerate(self._steps) if lo <= s <= hi]
        if not sel:
            return np.empty((0, 0, 0))
        return np.stack([self._snaps[k] for k in sel])


def retarded_interaction_force(i, t, current, buffer, U):
    """Time-averaged repulsion on fiber i: (1/N) sum_j of the window-mean gradU.

    The recorded window entries are weighted equally (the normalized form of
    the dt_record / h(t) quadrature weights); an empty window falls back to
    the instantaneous interaction over `current`, which also covers t = 0 and
    the non-retarded limit H = 0.
    """
    current = np.asarray(current, dtype=float)
    if len(buffer) == 0:
        if t > 0:
            raise MissingHistoryError("history buffer empty at t > 0; seed it at step 0")
        snaps = current[None]
    else:
        snaps = buffer.window(t)
        if snaps.shape[0] == 0:
            snaps = current[None]
    return mean_pair_force(current, snaps, U)[i]


@dataclass
class MicroConfig:
    """Parameters of one ensemble run."""

    N: int
    groups: int
    A: float
    dt: float
    T: float
    seed: int
    kernel: DelayKernel = field(default_factory=DelayKernel)
    V: CoilingPotential = field(default_factory=CoilingPotential)
    U: Optional[InteractionPotential] = None
    stride: int = 10
    d: int = 3
    ic: str = "box"
    snapshot_every: Optional[float] = None

    def __post_init__(self):
        if self.N < 1 or self.groups < 1:
            raise FiberFieldError("need N >= 1 and groups >= 1")
        if not (self.dt > 0 and self.T > 0 and self.dt <= self.T):
            raise FiberFieldError("need 0 < dt <= T")
        if self.A < 0:
            raise FiberFieldError("noise amplitude A must be >= 0")
        if self.d not in (2, 3):
            raise FiberFieldError("dimension must be 2 or 3")
        if self.ic not in ("box", "point"):
            raise FiberFieldError(f"unknown initial condition {self.ic!r}")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))


def _philox(seed, group, counter_hi, counter_lo):
    bit = np.random.Philox(
        counter=np.array([0, 0, counter_lo, counter_hi], dtype=np.uint64),
        key=np.array([seed & 0xFFFFFFFFFFFFFFFF, group], dtype=np.uint64),
    )
    return np.random.Generator(bit)


def sample_initial(cfg: MicroConfig, group: int):
    """Paper initial data: x uniform in [-1,1]^d, tau uniform on the upper hemisphere."""
    rng = _philox(cfg.seed, group, 2, 0)
    n, d = cfg.N, cfg.d
    if cfg.ic == "point":
        x = np.zeros((n, d))
    else:
        x = rng.uniform(-1.0, 1.0, size=(n, d))
    if d == 3:
        z = rng.uniform(0.0, 1.0, size=n)
        phi = rng.uniform(0.0, 2.0 * math.pi, size=n)
        r = np.sqrt(1.0 - z * z)
        tau = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    else:
        th = rng.uniform(0.0, math.pi, size=n)
        tau = np.stack([np.cos(th), np.sin(th)], axis=-1)
    return x, tau


def em_step(x, tau, t, cfg: MicroConfig, buffer: Optional[HistoryBuffer], rng):
    """One Euler-Maruyama step of the Ito-form interacting fiber iteration.

    Drift: -(1/(d-1)) P_tau(gradV + retarded interaction) - ((d-1)/2) A^2 tau;
    noise: sqrt(dt) A P_tau(R); tau is renormalized to the sphere afterwards.
    """
    d = cfg.d
    dt = cfg.dt
    if cfg.U is not None:
        if buffer is None or len(buffer) == 0:
            if t > 0:
                raise MissingHistoryError("history buffer empty at t > 0; seed it at step 0")
            snaps = x[None]
        else:
            snaps = buffer.window(t)
            if snaps.shape[0] == 0:
                snaps = x[None]
        force = cfg.V.grad(x) + mean_pair_force(x, snaps, cfg.U)
    else:
        force = cfg.V.grad(x)

    drift = -project_tangent(tau, force) / (d - 1) - 0.5 * (d - 1) * cfg.A**2 * tau
    tau_new = tau + dt * drift
    if cfg.A > 0:
        noise = rng.standard_normal(size=(x.shape[0], d))
        tau_new = tau_new + math.sqrt(dt) * cfg.A * project_tangent(tau, noise)
    x_new = x + dt * tau

    norms = np.linalg.norm(tau_new, axis=-1, keepdims=True)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(tau_new)) and np.all(norms > 0)):
        bad = np.where(~(np.isfinite(x_new).all(axis=1) & np.isfinite(tau_new).all(axis=1) & (norms[:, 0] > 0)))[0]
        idx = int(bad[0]) if bad.size else -1
        raise NonFiniteStateError(f"non-finite fiber state after step at t={t + dt:.6g} (fiber {idx})", fiber=idx, time=t + dt)
    return x_new, tau_new / norms


@dataclass
class EnsembleResult:
    x: np.ndarray  # (groups, N, d) final positions
    tau: np.ndarray  # (groups, N, d) final tangents
    t: float
    snapshots: list  # [(t, positions (groups, N, d))] at the requested cadence

    def positions_flat(self, groups=None):
        sel = self.x if groups is None else self.x[list(groups)]
        return sel.reshape(-1, sel.shape[-1])

    def states(self, group):
        from .core import FiberState

        return [FiberState(self.x[group, i], self.tau[group, i]) for i in range(self.x.shape[1])]


def run_group(cfg: MicroConfig, group: int, snapshot_steps=()):
    """Integrate one interacting group to T; deterministic in (seed, group)."""
    x, tau = sample_initial(cfg, group)
    buffer = None
    if cfg.U is not None:
        buffer = HistoryBuffer(cfg.stride, cfg.dt, cfg.kernel)
    snaps_out = {}
    for n in range(cfg.n_steps):
        t = n * cfg.dt
        if buffer is not None:
            buffer.maybe_record(n, x)
        if n in snapshot_steps:
            snaps_out[n] = x.copy()
        rng = _philox(cfg.seed, group, 1, n)
        x, tau = em_step(x, tau, t, cfg, buffer, rng)
    if cfg.n_steps in snapshot_steps:
        snaps_out[cfg.n_steps] = x.copy()
    return x, tau, snaps_out


def run_ensemble(cfg: MicroConfig) -> EnsembleResult:
    """Run all groups; bitwise reproducible for a fixed (seed, cfg)."""
    snapshot_steps: tuple = ()
    if cfg.snapshot_every is not None:
        every = max(1, int(round(cfg.snapshot_every / cfg.dt)))
        snapshot_steps = tuple(range(0, cfg.n_steps + 1, every))
    xs, taus = [], []
    per_group_snaps = []
    for g in range(cfg.groups):
        x, tau, snaps = run_group(cfg, g, snapshot_steps)
        xs.append(x)
        taus.append(tau)
        per_group_snaps.append(snaps)
    snapshots = []
    for n in snapshot_steps:
        snapshots.append((n * cfg.dt, np.stack([per_group_snaps[g][n] for g in range(cfg.groups)])))
    return EnsembleResult(
        x=np.stack(xs),
        tau=np.stack(taus),
        t=cfg.n_steps * cfg.dt,
        snapshots=snapshots,
    )


@dataclass
class Histogram:
    density: DensityField
    n_total: int
    n_out: int


def build_histogram(positions, grid: SpatialGrid) -> Histogram:
    """Bin positions into dx-cells centered at the grid points.

    Normalization divides by (count_total * dx^d) so the in-domain field
    integrates to one under the midpoint rule; out-of-domain samples are
    counted and reported, never binned.
    """
    positions = np.asarray(positions, dtype=float)
    if positions.size == 0:
        zero = DensityField(grid, np.zeros(grid.shape))
        return Histogram(zero, 0, 0)
    if positions.ndim != 2 or positions.shape[1] != grid.d:
        raise FiberFieldError(f"positions must have shape (n, {grid.d})")
    half = grid.dx / 2.0
    edges = np.linspace(-grid.L - half, grid.L + half, grid.n_x + 1)
    counts, _ = np.histogramdd(positions, bins=[edges] * grid.d)
    n_total = positions.shape[0]
    n_out = n_total - int(counts.sum())
    density = counts / (n_total * grid.dx**grid.d)
    return Histogram(DensityField(grid, density), n_total, n_out)


def write_states_csv(path, result: EnsembleResult, cfg: MicroConfig):
    """Final-state snapshot CSV: t,group,fiber,x1,..,xd,tau1,..,taud."""
    d = cfg.d
    header = ",".join(["t", "group", "fiber"] + [f"x{i+1}" for i in range(d)] + [f"tau{i+1}" for i in range(d)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for g in range(cfg.groups):
            for i in range(cfg.N):
                vals = [f"{result.t:.10g}", str(g), str(i)]
                vals += [f"{v:.17g}" for v in result.x[g, i]]
                vals += [f"{v:.17g}" for v in result.tau[g, i]]
                fh.write(",".join(vals) + "\n")

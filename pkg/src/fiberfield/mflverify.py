"""Numerical verification of the deterministic mean-field limit.

Retarded ODE particle flows, empirical measures, exact truncated
Wasserstein-1 distances via optimal assignment, and the convergence /
stability studies. Correctness beats speed here: distances are exact
assignment solutions, sizes stay at desk scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .core import CoilingPotential, DelayKernel, InteractionPotential
from .errors import FiberFieldError
from .micro import HistoryBuffer, mean_pair_force, _philox


@dataclass
class EmpiricalMeasure:
    """Equal-weight point measure on R^m; fiber states stack (x, tau)."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] < 1:
            raise FiberFieldError("empirical measure needs at least one point")

    @property
    def n(self):
        return self.points.shape[0]

    @classmethod
    def from_states(cls, x, tau):
        return cls(np.concatenate([x, tau], axis=1))


def wasserstein1(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact W1 under the truncated ground cost min(1, |x - y|).

    Equal-weight measures with equal point counts reduce to an optimal
    assignment problem, solved exactly.
    """
    if mu.n != nu.n:
        raise FiberFieldError(f"wasserstein1 needs equal point counts, got {mu.n} and {nu.n}")
    cost = np.minimum(1.0, cdist(mu.points, nu.points))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()) / mu.n


def _project_raw(tau, v):
    # normalization-insensitive projector for off-sphere integrator stages
    dot = np.sum(tau * v, axis=-1, keepdims=True)
    nrm2 = np.sum(tau * tau, axis=-1, keepdims=True)
    return v - (dot / nrm2) * tau


def _rhs(x, tau, V, U, snaps):
    d = x.shape[1]
    force = V.grad(x)
    if U is not None:
        force = force + mean_pair_force(x, snaps, U)
    return tau, -_project_raw(tau, force) / (d - 1)


def deterministic_step(x, tau, t, dt, V, U, kernel, buffer: Optional[HistoryBuffer], method="euler", renormalize=True):
    """One step of the deterministic interacting fiber system (noise-free model).

    The retarded force history is frozen over the step; RK4 re-evaluates the
    frozen-history field at its stages. tau is renormalized afterwards unless
    the caller wants to observe the raw O(dt^2) norm drift.
    """
    if U is not None:
        if buffer is None or len(buffer) == 0:
            if t > 0:
                raise FiberFieldError("history buffer empty at t > 0; seed it at step 0")
            snaps = np.array(x, dtype=float)[None]
        else:
            snaps = buffer.window(t)
            if snaps.shape[0] == 0:
                snaps = np.array(x, dtype=float)[None]
    else:
        snaps = None

    if method == "euler":
        dx, dtau = _rhs(x, tau, V, U, snaps)
        x_new = x + dt * dx
        tau_new = tau + dt * dtau
    elif method == "rk4":
        k1x, k1t = _rhs(x, tau, V, U, snaps)
        k2x, k2t = _rhs(x + 0.5 * dt * k1x, tau + 0.5 * dt * k1t, V, U, snaps)
        k3x, k3t = _rhs(x + 0.5 * dt * k2x, tau + 0.5 * dt * k2t, V, U, snaps)
        k4x, k4t = _rhs(x + dt * k3x, tau + dt * k3t, V, U, snaps)
        x_new = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        tau_new = tau + dt / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t)
    else:
        raise FiberFieldError(f"unknown integration method {method!r}")

    if renormalize:
        tau_new = tau_new / np.linalg.norm(tau_new, axis=-1, keepdims=True)
    return x_new, tau_new


@dataclass
class DeterministicSystem:
    """Driver for the retarded deterministic flow of N fibers."""

    V: CoilingPotential = field(default_factory=CoilingPotential)
    U: Optional[InteractionPotential] = None
    kernel: DelayKernel = field(default_factory=DelayKernel)
    dt: float = 1e-3
    stride: int = 1
    method: str = "euler"

    def run(self, x0, tau0, T, record_times=()):
        """Integrate to T; returns {t: EmpiricalMeasure} at the requested times."""
        x = np.array(x0, dtype=float)
        tau = np.array(tau0, dtype=float)
        tau /= np.linalg.norm(tau, axis=-1, keepdims=True)
        n_steps = int(round(T / self.dt))
        record_steps = {int(round(t / self.dt)): t for t in record_times}
        buffer = HistoryBuffer(self.stride, self.dt, self.kernel) if self.U is not None else None
        out = {}
        for n in range(n_steps + 1):
            if n in record_steps:
                out[record_steps[n]] = EmpiricalMeasure.from_states(x, tau)
            if n == n_steps:
                break
            if buffer is not None:
                buffer.maybe_record(n, x)
            x, tau = deterministic_step(x, tau, n * self.dt, self.dt, self.V, self.U, self.kernel, buffer, self.method)
        return out


def sample_states(n, d, seed, stream=0):
    """i.i.d. initial states: x uniform in [-1,1]^d, tau uniform on S^{d-1}."""
    rng = _philox(seed, stream, 3, 0)
    x = rng.uniform(-1.0, 1.0, size=(n, d))
    tau = rng.standard_normal(size=(n, d))
    tau /= np.linalg.norm(tau, axis=-1, keepdims=True)
    return x, tau


def lipschitz_estimate(system: DeterministicSystem, seed, n_pairs=10_000, d=3):
    """Max finite-difference quotient of the full right-hand side over random state pairs.

    Quotients use the truncated metric 1 ^ |z1 - z2|, matching the stability
    estimate; the interaction is evaluated against a frozen background sample.
    """
    rng = _philox(seed, 0, 4, 0)
    bg_x = rng.uniform(-1.5, 1.5, size=(64, d))
    bg = bg_x[None]

    def rhs_one(x, tau):
        dxs, dts = _rhs(x[None], tau[None], system.V, system.U, bg)
        return np.concatenate([dxs[0], dts[0]])

    worst = 0.0
    for _ in range(n_pairs):
        x1 = rng.uniform(-1.5, 1.5, size=d)
        t1 = rng.standard_normal(d)
        t1 /= np.linalg.norm(t1)
        scale = 10.0 ** rng.uniform(-3, 0)
        x2 = x1 + scale * rng.standard_normal(d)
        t2 = t1 + scale * rng.standard_normal(d)
        t2 /= np.linalg.norm(t2)
        dz = min(1.0, math.sqrt(float(np.sum((x1 - x2) ** 2) + np.sum((t1 - t2) ** 2))))
        if dz == 0.0:
            continue
        q = float(np.linalg.norm(rhs_one(x1, t1) - rhs_one(x2, t2))) / dz
        worst = max(worst, q)
    return worst


@dataclass
class StudyRow:
    N_a: int
    N_b: int
    t: float
    w1: float
    bound: float
    ratio: float


def write_study_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("N_a,N_b,t,W1,bound,ratio\n")
        for r in rows:
            fh.write(f"{r.N_a},{r.N_b},{r.t:.10g},{r.w1:.17g},{r.bound:.17g},{r.ratio:.17g}\n")


def convergence_study(N_list, T, dt, seed, system: Optional[DeterministicSystem] = None, coupled=True):
    """W1 between consecutive-N empirical flows at t in {0, T/2, T}.

    Coupled mode shares the seed prefix of the largest sample; the larger
    flow is subsampled to its first N_a particles for each comparison
    (exchangeable, deterministic). Returns StudyRow entries.
    """
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise FiberFieldError("N_list must be strictly increasing")
    if system is None:
        system = DeterministicSystem(dt=dt)
    system.dt = dt
    times = (0.0, T / 2.0, T)
    d = 3
    runs = {}
    x_max, tau_max = sample_states(max(N_list), d, seed, stream=0)
    for idx, n in enumerate(N_list):
        if coupled:
            x0, tau0 = x_max[:n], tau_max[:n]
        else:
            x0, tau0 = sample_states(n, d, seed, stream=idx + 1)
        runs[n] = system.run(x0, tau0, T, record_times=times)

    c = max(1.0, lipschitz_estimate(system, seed))
    bound = c * (1.0 + T) * math.exp(c * T)
    rows = []
    for n_a, n_b in zip(N_list, N_list[1:]):
        w1s = {}
        for t in times:
            mu_a = runs[n_a][t]
            mu_b_sub = EmpiricalMeasure(runs[n_b][t].points[:n_a])
            w1s[t] = wasserstein1(mu_a, mu_b_sub)
        w0 = w1s[0.0]
        ratio = max(w1s.values()) / w0 if w0 > 0 else float("nan")
        for t in times:
            rows.append(StudyRow(n_a, n_b, t, w1s[t], bound, ratio))
    return rows


def stability_study(N, T, dt, seed_pairs, system: Optional[DeterministicSystem] = None):
    """Stability ratios sup_t W1(mu_t^1, mu_t^2)/W1(mu_0^1, mu_0^2) for same-N seed pairs.

    The two flows start from independent samples, so the initial distance is
    positive and the ratio is checked against c (1+T) e^{cT} with the
    measured Lipschitz constant.
    """
    if system is None:
        system = DeterministicSystem(dt=dt)
    system.dt = dt
    times = (0.0, T / 2.0, T)
    c = max(1.0, lipschitz_estimate(system, seed_pairs[0][0]))
    bound = c * (1.0 + T) * math.exp(c * T)
    rows = []
    for (s1, s2) in seed_pairs:
        r1 = system.run(*sample_states(N, 3, s1, stream=0), T, record_times=times)
        r2 = system.run(*sample_states(N, 3, s2, stream=0), T, record_times=times)
        w1s = {t: wasserstein1(r1[t], r2[t]) for t in times}
        w0 = w1s[0.0]
        ratio = max(w1s.values()) / w0 if w0 > 0 else float("nan")
        for t in times:
            rows.append(StudyRow(N, N, t, w1s[t], bound, ratio))
    return rows

"""Configuration parsing, experiment orchestration, and cross-scale comparison.

One JSON document drives every scale so cross-scale comparisons cannot drift
in parameters. All tabular output is CSV with documented headers; field
states are .npz checkpoints; report figures are rendered alongside the CSVs.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core import CoilingPotential, DelayKernel, DensityField, InteractionPotential, SpatialGrid
from .convolve import ConvolutionKernel
from .errors import ConfigError, FiberFieldError
from .macroscale import MacroConfig, run_macro
from .meanfield import (
    MeanFieldProblem,
    box_initial_field,
    gaussian_initial_field,
    isotropic_field,
    moment_density,
    run_meanfield,
)
from .micro import MicroConfig, build_histogram, run_ensemble, write_states_csv
from .mflverify import DeterministicSystem, convergence_study, stability_study, write_study_csv
from .spheregrid import build_geodesic_grid
from .stationary import StationaryProblem, solve_stationary

MODES = ("micro", "meanfield", "stationary", "macro", "verify", "compare")

PAPER_PRESET = {"kind": "smooth_heaviside", "C": 10.0, "R": 1.4, "k": 10.0}


def _take(src: dict, key, default, types, path, required=False):
    if key not in src:
        if required:
            raise ConfigError(f"missing required key '{path}.{key}'")
        return default
    val = src.pop(key)
    if types is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if not isinstance(val, types if isinstance(types, tuple) else (types,)) or isinstance(val, bool) and types is not bool:
        raise ConfigError(f"key '{path}.{key}' has invalid type {type(val).__name__}")
    return val


def _reject_unknown(src: dict, path):
    if src:
        raise ConfigError(f"unknown key '{path}.{sorted(src)[0]}'")


@dataclass
class ExperimentConfig:
    """Validated, fully defaulted description of one run."""

    mode: str
    d: int = 3
    A: float = 1.0
    H: float = math.inf
    V: CoilingPotential = field(default_factory=CoilingPotential)
    U: Optional[InteractionPotential] = None
    dt: Optional[float] = None
    T: float = 10.0
    n_x: int = 21
    L: float = 4.2
    level: int = 1
    stride: int = 10
    tol: float = 1e-8
    max_iter: int = 500
    relaxation: float = 0.5
    N: int = 500
    groups: int = 20
    seed: int = 0
    threshold_frac: float = 0.001
    ic: str = "box"
    out_dir: str = "out"
    snapshot_every: Optional[float] = 1.0
    plots: bool = True
    n_bins: int = 30
    n_list: tuple = (50, 100, 200, 400)
    seed_pairs: int = 5
    compare_inputs: dict = field(default_factory=dict)
    reference_density: Optional[str] = None

    def spatial_grid(self):
        return SpatialGrid(self.n_x, self.L, self.d)

    def delay_kernel(self):
        return DelayKernel(self.H)

    def to_document(self):
        u = None
        if self.U is not None:
            u = {"kind": self.U.kind, "C": self.U.C, "R": self.U.R}
            if self.U.kind == "smooth_heaviside":
                u["k"] = self.U.k
        doc = {
            "mode": self.mode,
            "physics": {
                "d": self.d,
                "A": self.A,
                "H": "inf" if math.isinf(self.H) else self.H,
                "V": self.V.kind,
                "U": u,
            },
            "numerics": {
                "dt": self.dt,
                "T": self.T,
                "n_x": self.n_x,
                "L": self.L,
                "level": self.level,
                "stride": self.stride,
                "tol": self.tol,
                "max_iter": self.max_iter,
                "relaxation": self.relaxation,
                "N": self.N,
                "groups": self.groups,
                "seed": self.seed,
                "threshold_frac": self.threshold_frac,
                "ic": self.ic,
                "n_list": list(self.n_list),
                "seed_pairs": self.seed_pairs,
            },
            "output": {
                "dir": self.out_dir,
                "snapshot_every": self.snapshot_every,
                "plots": self.plots,
                "n_bins": self.n_bins,
                "reference_density": self.reference_density,
            },
        }
        if self.mode == "compare":
            doc["compare"] = {"inputs": dict(self.compare_inputs)}
        return doc


def serialize_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_document(), indent=2, sort_keys=True)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and fully validate a JSON config document; unknown keys are rejected."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")

    mode = _take(doc, "mode", None, str, "", required=True)
    if mode not in MODES:
        raise ConfigError(f"key '.mode' must be one of {MODES}, got {mode!r}")

    phys = _take(doc, "physics", {}, dict, "")
    d = _take(phys, "d", 3, int, "physics")
    if d not in (2, 3):
        raise ConfigError("key 'physics.d' supports only 2 or 3")
    A = _take(phys, "A", 1.0, float, "physics")
    if A < 0:
        raise ConfigError("key 'physics.A' must be >= 0")
    h_raw = _take(phys, "H", "inf", (str, float, int), "physics")
    if isinstance(h_raw, str):
        if h_raw not in ("inf", "infinity"):
            raise ConfigError("key 'physics.H' must be a number >= 0 or 'inf'")
        H = math.inf
    else:
        H = float(h_raw)
        if H < 0:
            raise ConfigError("key 'physics.H' must be >= 0")
    v_kind = _take(phys, "V", "quadratic", str, "physics")
    try:
        V = CoilingPotential(v_kind)
    except FiberFieldError as e:
        raise ConfigError(f"key 'physics.V': {e}") from e
    u_raw = _take(phys, "U", None, (dict, str, type(None)), "physics")
    if u_raw == "paper":
        u_raw = dict(PAPER_PRESET)
    U = None
    if u_raw is not None:
        kind = _take(u_raw, "kind", None, str, "physics.U", required=True)
        C = _take(u_raw, "C", None, float, "physics.U", required=True)
        R = _take(u_raw, "R", None, float, "physics.U", required=True)
        k = _take(u_raw, "k", 0.0, float, "physics.U")
        _reject_unknown(u_raw, "physics.U")
        try:
            U = InteractionPotential(kind, C=C, R=R, k=k)
        except FiberFieldError as e:
            raise ConfigError(f"key 'physics.U': {e}") from e
    _reject_unknown(phys, "physics")

    num = _take(doc, "numerics", {}, dict, "")
    kwargs = dict(mode=mode, d=d, A=A, H=H, V=V, U=U)
    kwargs["dt"] = _take(num, "dt", None, (float, type(None)), "numerics")
    kwargs["T"] = _take(num, "T", 10.0, float, "numerics")
    kwargs["n_x"] = _take(num, "n_x", 21, int, "numerics")
    kwargs["L"] = _take(num, "L", 4.2, float, "numerics")
    kwargs["level"] = _take(num, "level", 1, int, "numerics")
    kwargs["stride"] = _take(num, "stride", 10, int, "numerics")
    kwargs["tol"] = _take(num, "tol", 1e-8, float, "numerics")
    kwargs["max_iter"] = _take(num, "max_iter", 500, int, "numerics")
    kwargs["relaxation"] = _take(num, "relaxation", 0.5, float, "numerics")
    kwargs["N"] = _take(num, "N", 500, int, "numerics")
    kwargs["groups"] = _take(num, "groups", 20, int, "numerics")
    kwargs["seed"] = _take(num, "seed", 0, int, "numerics")
    kwargs["threshold_frac"] = _take(num, "threshold_frac", 0.001, float, "numerics")
    kwargs["ic"] = _take(num, "ic", "box", str, "numerics")
    kwargs["n_list"] = tuple(_take(num, "n_list", [50, 100, 200, 400], list, "numerics"))
    kwargs["seed_pairs"] = _take(num, "seed_pairs", 5, int, "numerics")
    _reject_unknown(num, "numerics")

    out = _take(doc, "output", {}, dict, "")
    kwargs["out_dir"] = _take(out, "dir", "out", str, "output")
    kwargs["snapshot_every"] = _take(out, "snapshot_every", 1.0, (float, type(None)), "output")
    kwargs["plots"] = _take(out, "plots", True, bool, "output")
    kwargs["n_bins"] = _take(out, "n_bins", 30, int, "output")
    kwargs["reference_density"] = _take(out, "reference_density", None, (str, type(None)), "output")
    _reject_unknown(out, "output")

    cmp_doc = _take(doc, "compare", {}, dict, "")
    inputs = _take(cmp_doc, "inputs", {}, dict, "compare")
    if not all(isinstance(v, str) for v in inputs.values()):
        raise ConfigError("key 'compare.inputs' must map names to file paths")
    kwargs["compare_inputs"] = dict(inputs)
    _reject_unknown(cmp_doc, "compare")
    _reject_unknown(doc, "")

    cfg = ExperimentConfig(**kwargs)
    _validate_ranges(cfg)
    return cfg


def _validate_ranges(cfg: ExperimentConfig):
    checks = [
        (cfg.T > 0, "numerics.T must be > 0"),
        (cfg.dt is None or cfg.dt > 0, "numerics.dt must be > 0 when given"),
        (cfg.n_x >= 3, "numerics.n_x must be >= 3"),
        (cfg.L > 0, "numerics.L must be > 0"),
        (0 <= cfg.level <= 7, "numerics.level must lie in 0..7"),
        (cfg.stride >= 1, "numerics.stride must be >= 1"),
        (cfg.tol > 0, "numerics.tol must be > 0"),
        (cfg.max_iter >= 1, "numerics.max_iter must be >= 1"),
        (0 < cfg.relaxation <= 1, "numerics.relaxation must lie in (0, 1]"),
        (cfg.N >= 1, "numerics.N must be >= 1"),
        (cfg.groups >= 1, "numerics.groups must be >= 1"),
        (0 <= cfg.threshold_frac < 1, "numerics.threshold_frac must lie in [0, 1)"),
        (cfg.ic in ("box", "gaussian", "point", "stationary"), "numerics.ic must be box, gaussian, point, or stationary"),
        (cfg.n_bins >= 2, "output.n_bins must be >= 2"),
        (cfg.snapshot_every is None or cfg.snapshot_every > 0, "output.snapshot_every must be > 0"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(f"key '{msg.split(' ')[0]}' out of range: {msg}")
    if cfg.mode in ("meanfield", "stationary", "macro", "compare") and cfg.d != 3:
        raise ConfigError(f"key 'physics.d': mode {cfg.mode} is three-dimensional only")
    if cfg.mode == "compare" and len(cfg.compare_inputs) < 2:
        raise ConfigError("key 'compare.inputs' needs at least two named density files")


def radial_profile(rho: DensityField, n_bins: int):
    """Shell averages over grid points binned by |x|.

    Returns rows (r_center, mean or None, count); bin centers sit at
    (j + 1/2) L sqrt(3) / n_bins, covering radii up to the box corner.
    """
    if n_bins < 2:
        raise FiberFieldError("radial profile needs n_bins >= 2")
    rmax = rho.grid.L * math.sqrt(3.0)
    r = rho.grid.radius().ravel()
    vals = rho.values.ravel()
    idx = np.minimum((r / rmax * n_bins).astype(int), n_bins - 1)
    rows = []
    for j in range(n_bins):
        sel = idx == j
        cnt = int(np.count_nonzero(sel))
        mean = float(vals[sel].mean()) if cnt else None
        rows.append(((j + 0.5) * rmax / n_bins, mean, cnt))
    return rows


def write_radial_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("r,rho_mean,count\n")
        for (r, mean, cnt) in rows:
            val = "" if mean is None else f"{mean:.17g}"
            fh.write(f"{r:.17g},{val},{cnt}\n")


def l2_distance_series(fields, reference: DensityField):
    """Rows (t, ||rho(t) - reference||_2) with the dx^3-weighted discrete norm."""
    rows = []
    for (t, fld) in fields:
        rows.append((t, fld.l2_distance(reference)))
    return rows


def write_series_csv(path, rows, value_name="l2"):
    with open(path, "w") as fh:
        fh.write(f"t,{value_name}\n")
        for (t, v) in rows:
            fh.write(f"{t:.10g},{v:.17g}\n")


def _write_manifest(out: Path, cfg: ExperimentConfig, extra=None):
    manifest = {
        "config": cfg.to_document(),
        "versions": {"fiberfield": __version__, "numpy": np.__version__},
        "started_unix": time.time(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _finish(out: Path, manifest, t0):
    manifest["wall_seconds"] = time.time() - t0
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "DONE").write_text("ok\n")


def _interaction_force_bound(cfg: ExperimentConfig):
    """Physics-driven bound on |gradV| + |gradU * rho| for CFL time-step selection.

    Uses the worst of the initial and the stationary interaction pull (the
    latter from a quick fixed-point solve) with a 1.5x margin, capped by the
    rigorous max|gradU| bound; every step still asserts the CFL with the
    fields it actually sees.
    """
    grid = cfg.spatial_grid()
    vmax = float(np.max(np.linalg.norm(cfg.V.grad(grid.points()), axis=1)))
    if cfg.U is None:
        return vmax
    r = np.linspace(0.0, cfg.U.support_radius(), 4096)
    gmax_rigorous = float(np.max(np.abs(cfg.U.grad_factor_r2(r * r) * r)))
    kern = ConvolutionKernel(grid, cfg.U, 0.0, "force")
    prob = StationaryProblem(grid, V=cfg.V, U=cfg.U, tol=1e-6, max_iter=300, relaxation=0.5)
    res = solve_stationary(prob)
    g_star = float(np.sqrt((kern.apply(res.rho.values) ** 2).sum(axis=0)).max())
    rho0 = box_density(grid)
    g_init = float(np.sqrt((kern.apply(rho0.values) ** 2).sum(axis=0)).max())
    return vmax + min(gmax_rigorous, 1.5 * max(g_star, g_init))


def box_density(grid: SpatialGrid) -> DensityField:
    """Unit-mass density of the box initial condition (exact cell overlap weights)."""
    ax = grid.axis()
    half = grid.dx / 2.0
    over = np.clip(np.minimum(ax + half, 1.0) - np.maximum(ax - half, -1.0), 0.0, None) / grid.dx
    if grid.d == 3:
        w = over[:, None, None] * over[None, :, None] * over[None, None, :]
    else:
        w = over[:, None] * over[None, :]
    return DensityField(grid, w).normalized()


def run(cfg: ExperimentConfig, out_dir=None, seed=None) -> Path:
    """Dispatch one experiment; returns the output directory."""
    if seed is not None:
        cfg.seed = seed
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    manifest = _write_manifest(out, cfg)

    runner = {
        "micro": _run_micro,
        "meanfield": _run_meanfield,
        "stationary": _run_stationary,
        "macro": _run_macro,
        "verify": _run_verify,
        "compare": _run_compare,
    }[cfg.mode]
    runner(cfg, out, manifest)
    _finish(out, manifest, t0)
    return out


def _maybe_plots(cfg, out, kind, **kw):
    if not cfg.plots:
        return
    from . import plots

    plots.render(kind, out, **kw)


def _run_micro(cfg: ExperimentConfig, out: Path, manifest):
    grid = cfg.spatial_grid()
    mc = MicroConfig(
        N=cfg.N,
        groups=cfg.groups,
        A=cfg.A,
        dt=cfg.dt if cfg.dt is not None else 1e-3,
        T=cfg.T,
        seed=cfg.seed,
        kernel=cfg.delay_kernel(),
        V=cfg.V,
        U=cfg.U,
        stride=cfg.stride,
        d=cfg.d,
        ic="box" if cfg.ic == "box" else "point",
        snapshot_every=cfg.snapshot_every,
    )
    result = run_ensemble(mc)
    write_states_csv(out / "states.csv", result, mc)
    hist = build_histogram(result.positions_flat(), grid)
    hist.density.time = result.t
    hist.density.save(out / "density.npz")
    manifest["histogram"] = {"n_total": hist.n_total, "n_out_of_domain": hist.n_out}
    rows = radial_profile(hist.density, cfg.n_bins)
    write_radial_csv(out / "radial_profile.csv", rows)
    _maybe_plots(cfg, out, "radial", csvs={"micro histogram": out / "radial_profile.csv"})


def _initial_field(cfg, grid, gv):
    if cfg.ic == "gaussian":
        return gaussian_initial_field(grid, gv)
    if cfg.ic == "stationary":
        prob = StationaryProblem(
            grid, V=cfg.V, U=cfg.U, tol=cfg.tol, max_iter=cfg.max_iter,
            threshold_frac=cfg.threshold_frac, relaxation=cfg.relaxation,
        )
        return isotropic_field(solve_stationary(prob).rho, gv)
    return box_initial_field(grid, gv)


def _run_meanfield(cfg: ExperimentConfig, out: Path, manifest):
    grid = cfg.spatial_grid()
    gv = build_geodesic_grid(cfg.level)
    prob = MeanFieldProblem(
        grid, gv, A=cfg.A, V=cfg.V, U=cfg.U, kernel=cfg.delay_kernel(), threshold_frac=cfg.threshold_frac
    )
    f0 = _initial_field(cfg, grid, gv)
    bound = _interaction_force_bound(cfg)
    final, snaps, masses = run_meanfield(
        prob, f0, cfg.T, dt=cfg.dt, snapshot_every=cfg.snapshot_every, force_bound=bound
    )
    final.save(out / "kinetic.npz")
    rho = moment_density(final)
    rho.values = np.maximum(rho.values, 0.0)  # output clip of limiter negatives
    rho.save(out / "density.npz")
    write_series_csv(out / "mass.csv", masses, value_name="mass")
    if cfg.reference_density:
        ref = DensityField.load(cfg.reference_density)
    else:
        ref = snaps[-1][1]
    write_series_csv(out / "decay.csv", l2_distance_series(snaps, ref))
    rows = radial_profile(rho, cfg.n_bins)
    write_radial_csv(out / "radial_profile.csv", rows)
    manifest["meanfield"] = {"final_mass": final.mass(), "min_f": float(final.values.min()), "snapshots": len(snaps)}
    _maybe_plots(cfg, out, "radial", csvs={"mean-field": out / "radial_profile.csv"})
    _maybe_plots(cfg, out, "decay", csvs={"mean-field": out / "decay.csv"})


def _run_stationary(cfg: ExperimentConfig, out: Path, manifest):
    grid = cfg.spatial_grid()
    prob = StationaryProblem(
        grid,
        V=cfg.V,
        U=cfg.U,
        tol=cfg.tol,
        max_iter=cfg.max_iter,
        threshold_frac=cfg.threshold_frac,
        relaxation=cfg.relaxation,
    )
    res = solve_stationary(prob)
    res.rho.save(out / "density.npz")
    res.write_history_csv(out / "residual_history.csv")
    manifest["stationary"] = {
        "converged": res.converged,
        "iterations": res.iterations,
        "residual": res.residual,
        "monotone_energy": res.monotone_energy,
        "second_radial_moment": res.rho.second_radial_moment(),
    }
    if not res.converged:
        manifest["stationary"]["warning"] = "iteration hit max_iter before tolerance"
    rows = radial_profile(res.rho, cfg.n_bins)
    write_radial_csv(out / "radial_profile.csv", rows)
    _maybe_plots(cfg, out, "radial", csvs={"stationary": out / "radial_profile.csv"})
    _maybe_plots(cfg, out, "residual", csvs={"stationary": out / "residual_history.csv"})


def _run_macro(cfg: ExperimentConfig, out: Path, manifest):
    grid = cfg.spatial_grid()
    mc = MacroConfig(
        grid,
        A=cfg.A,
        dt=cfg.dt if cfg.dt is not None else 0.0,
        T=cfg.T,
        V=cfg.V,
        U=cfg.U,
        kernel=cfg.delay_kernel(),
        threshold_frac=cfg.threshold_frac,
        d=cfg.d,
    )
    if mc.dt == 0.0:
        mc.dt = mc.suggested_dt()
    if cfg.snapshot_every is not None:
        mc.dt = cfg.snapshot_every / math.ceil(cfg.snapshot_every / mc.dt)
    if cfg.ic == "box":
        rho0 = box_density(grid)
    else:
        rho0 = StationaryProblem(grid, V=cfg.V, U=None, tol=1e-12).initial_density()
    final, snaps = run_macro(mc, rho0, snapshot_every=cfg.snapshot_every)
    final.save(out / "density.npz")
    if cfg.reference_density:
        ref = DensityField.load(cfg.reference_density)
    else:
        ref = snaps[-1][1] if snaps else final
    if snaps:
        write_series_csv(out / "decay.csv", l2_distance_series(snaps, ref))
    write_radial_csv(out / "radial_profile.csv", radial_profile(final, cfg.n_bins))
    manifest["macro"] = {"final_mass": final.mass(), "dt": mc.dt, "kappa": mc.kappa}
    _maybe_plots(cfg, out, "radial", csvs={"macro": out / "radial_profile.csv"})


def _run_verify(cfg: ExperimentConfig, out: Path, manifest):
    dt = cfg.dt if cfg.dt is not None else 0.01
    system = DeterministicSystem(V=cfg.V, U=cfg.U, kernel=cfg.delay_kernel(), dt=dt, stride=cfg.stride)
    rows = convergence_study(list(cfg.n_list), cfg.T, dt, cfg.seed, system=system)
    pairs = [(cfg.seed + 2 * i, cfg.seed + 2 * i + 1) for i in range(cfg.seed_pairs)]
    rows += stability_study(cfg.N, min(cfg.T, 1.0), dt, pairs, system=system)
    write_study_csv(out / "wasserstein.csv", rows)
    manifest["verify"] = {"rows": len(rows)}
    _maybe_plots(cfg, out, "wasserstein", csvs={"verify": out / "wasserstein.csv"})


def _run_compare(cfg: ExperimentConfig, out: Path, manifest):
    missing = [f"{name}: {path}" for name, path in cfg.compare_inputs.items() if not Path(path).exists()]
    if missing:
        raise FiberFieldError("compare inputs missing: " + "; ".join(sorted(missing)))
    fields = {name: DensityField.load(path) for name, path in cfg.compare_inputs.items()}
    names = sorted(fields)
    base_grid = fields[names[0]].grid
    for name in names[1:]:
        if not fields[name].grid.same_as(base_grid):
            raise FiberFieldError(f"compare input '{name}' lives on a different grid")
    peak = max(float(fields[n].values.max()) for n in names)
    with open(out / "comparison.csv", "w") as fh:
        fh.write("a,b,l2,l2_over_peak\n")
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                l2 = fields[a].l2_distance(fields[b])
                fh.write(f"{a},{b},{l2:.17g},{l2 / peak:.17g}\n")
    manifest["compare"] = {"inputs": names, "peak": peak}
    _maybe_plots(cfg, out, "compare_radial", fields=fields, out_csv=None, n_bins=cfg.n_bins)

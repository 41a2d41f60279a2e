"""Report figures rendered next to the CSV outputs.

Everything here consumes the CSV files (or density fields) the harness just
wrote, so a figure can always be reproduced from the shipped data alone.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _read_csv(path):
    with open(path, newline="") as fh:
        rdr = csv.reader(fh)
        header = next(rdr)
        rows = [r for r in rdr]
    cols = {name: [] for name in header}
    for r in rows:
        for name, val in zip(header, r):
            cols[name].append(float(val) if val != "" else math.nan)
    return {k: np.array(v) for k, v in cols.items()}


def _save(fig, out: Path, name: str):
    fig.tight_layout()
    fig.savefig(out / name, dpi=150)
    plt.close(fig)


def radial_figure(csvs, out: Path, name="radial_profile.png"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, path in csvs.items():
        cols = _read_csv(path)
        ok = ~np.isnan(cols["rho_mean"])
        ax.plot(cols["r"][ok], cols["rho_mean"][ok], marker="o", ms=3, label=label)
    ax.set_xlabel("r")
    ax.set_ylabel("shell-averaged density")
    ax.legend()
    _save(fig, out, name)


def decay_figure(csvs, out: Path, name="decay.png"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, path in csvs.items():
        cols = _read_csv(path)
        pos = cols["l2"] > 0
        ax.semilogy(cols["t"][pos], cols["l2"][pos], label=label)
    ax.set_xlabel("t")
    ax.set_ylabel("L2 distance to equilibrium")
    ax.legend()
    _save(fig, out, name)


def residual_figure(csvs, out: Path, name="residual_history.png"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax2 = ax.twinx()
    for label, path in csvs.items():
        cols = _read_csv(path)
        ax.semilogy(cols["iter"], cols["linf_diff"], label=f"{label} diff")
        ax2.plot(cols["iter"], cols["energy"], ls="--", color="tab:orange", label=f"{label} energy")
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative L-inf successive difference")
    ax2.set_ylabel("energy functional")
    ax.legend(loc="upper right")
    _save(fig, out, name)


def wasserstein_figure(csvs, out: Path, name="wasserstein.png"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, path in csvs.items():
        cols = _read_csv(path)
        pairs = sorted({(int(a), int(b)) for a, b in zip(cols["N_a"], cols["N_b"])})
        for (na, nb) in pairs:
            sel = (cols["N_a"] == na) & (cols["N_b"] == nb)
            ax.plot(cols["t"][sel], cols["W1"][sel], marker="o", ms=3, label=f"N={na} vs {nb}")
    ax.set_xlabel("t")
    ax.set_ylabel("W1")
    ax.legend(fontsize=7)
    _save(fig, out, name)


def compare_radial_figure(fields, n_bins, out: Path, name="comparison_radial.png"):
    from .harness import radial_profile

    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(fields):
        rows = radial_profile(fields[label], n_bins)
        r = [x[0] for x in rows if x[1] is not None]
        v = [x[1] for x in rows if x[1] is not None]
        ax.plot(r, v, marker="o", ms=3, label=label)
    ax.set_xlabel("r")
    ax.set_ylabel("shell-averaged density")
    ax.legend()
    _save(fig, out, name)


def convergence_figure(h_list, err_list, out: Path, name="convergence.png"):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(h_list, err_list, marker="o", label="measured L2 error")
    h = np.asarray(h_list, dtype=float)
    ax.loglog(h, err_list[0] * (h / h[0]), ls=":", label="order 1")
    ax.loglog(h, err_list[0] * (h / h[0]) ** 2, ls="--", label="order 2")
    ax.set_xlabel("grid size h")
    ax.set_ylabel("L2 error")
    ax.legend()
    _save(fig, out, name)


def render(kind, out: Path, csvs=None, fields=None, out_csv=None, n_bins=30):
    out = Path(out)
    if kind == "radial":
        radial_figure(csvs, out)
    elif kind == "decay":
        decay_figure(csvs, out)
    elif kind == "residual":
        residual_figure(csvs, out)
    elif kind == "wasserstein":
        wasserstein_figure(csvs, out)
    elif kind == "compare_radial":
        compare_radial_figure(fields, n_bins, out)
    else:
        raise ValueError(f"unknown figure kind {kind!r}")

"""Static figures for run, analysis and sweep reports (matplotlib, Agg)."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes identical across runs
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def step_response(traj, V_nom, spread_bound: Optional[float], path, title: str = "") -> Path:
    """Voltages, controlled currents and the voltage spread against its bound."""
    fig, axes = plt.subplots(3, 1, figsize=(7.5, 8.5), sharex=True)
    t = traj.times
    V, u = traj.V, traj.u
    for i in range(traj.n):
        axes[0].plot(t, (V[:, i] - V_nom[i]) / 1e3, label=f"bus {i + 1}")
        axes[1].plot(t, u[:, i], label=f"bus {i + 1}")
    axes[0].axhline(0.0, color="k", lw=0.6)
    axes[0].set_ylabel("V - V_nom [kV]")
    axes[0].legend(loc="best", fontsize=8)
    axes[1].set_ylabel("u [A]")

    spread = V.max(axis=1) - V.min(axis=1)
    axes[2].plot(t, spread, color="C0", label="max |V_i - V_j|")
    if spread_bound is not None:
        axes[2].axhline(spread_bound, color="C3", ls="--", label=f"stationary bound {spread_bound:.6g} V")
    axes[2].set_ylabel("voltage spread [V]")
    axes[2].set_xlabel("t [s]")
    axes[2].legend(loc="best", fontsize=8)
    if title:
        axes[0].set_title(title)
    fig.tight_layout()
    return _save(fig, Path(path))


def eigenvalue_map(eigenvalues, path, title: str = "") -> Path:
    """Closed-loop eigenvalues on a symmetric-log real axis."""
    lam = np.asarray(eigenvalues)
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    ax.scatter(lam.real, lam.imag, marker="x", color="C0")
    ax.axvline(0.0, color="k", lw=0.6)
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.set_xlabel("Re")
    ax.set_ylabel("Im")
    ax.set_title(title or "closed-loop eigenvalues")
    fig.tight_layout()
    return _save(fig, Path(path))


def droop_limits(rows: Sequence, u_limit_large: float, path) -> Path:
    """Voltage error and dispatch error of droop equilibria against the gain."""
    k = np.array([r.k_P for r in rows])
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    ax.loglog(k, [r.V_error_inf for r in rows], "o-", label="||V - V_nom||_inf [V]")
    ax.loglog(k, [r.u_error_inf for r in rows], "s-", label="||u - u*||_inf [A]")
    ax.axhline(u_limit_large, color="C1", ls="--", lw=0.8, label="||-I_inj - u*||_inf")
    ax.set_xlabel("k_P [S]")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def sweep_summary(param: str, values: Sequence[float], columns: dict, path) -> Path:
    """One panel per metric column against the swept parameter."""
    fig, axes = plt.subplots(len(columns), 1, figsize=(6.5, 2.6 * len(columns)), sharex=True, squeeze=False)
    for ax, (name, ys) in zip(axes[:, 0], columns.items()):
        ax.plot(values, ys, "o-")
        ax.set_ylabel(name, fontsize=8)
    axes[-1, 0].set_xlabel(param)
    fig.tight_layout()
    return _save(fig, Path(path))

"""Time-domain simulation of closed-loop MTDC systems.

Integration is fixed-step classical RK4. Communicated (remote) terms may
lag by a constant delay ``tau`` that must be a whole number of steps.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._kernel import rk4_delay
from .controllers import ClosedLoopSystem, ControllerSpec, default_voltage_weights, optimal_dispatch, voltage_offset_residual
from .grid import GridTopology, ZERO_TOL, _frozen

TAIL_FRACTION = 0.05
BLOWUP_FACTOR = 1e12


class SimulationDiverged(RuntimeError):
    def __init__(self, index: int, time: float):
        self.index, self.time = index, time
        super().__init__(f"state diverged at step {index} (t = {time:.6g} s)")


class EquilibriumError(RuntimeError):
    pass


def _steps(span: float, dt: float, what: str) -> int:
    k = round(span / dt)
    if abs(k * dt - span) > 1e-9 * max(abs(span), dt):
        raise ValueError(f"{what} = {span!r} s is not a multiple of dt = {dt!r} s")
    return int(k)


@dataclass(frozen=True, eq=False)
class SimScenario:
    """Injection schedule and integration settings.

    ``events`` is a sequence of ``(t, I_inj)`` pairs applied at grid
    instants. When neither ``x0`` nor ``V0`` is given the run starts from the
    delay-free equilibrium under ``I_inj_initial``.
    """

    I_inj_initial: np.ndarray
    t_end: float
    dt: float = 1e-5
    tau: float = 0.0
    events: tuple = ()
    V0: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "I_inj_initial", _frozen(self.I_inj_initial))
        object.__setattr__(self, "events", tuple((float(t), _frozen(I)) for t, I in self.events))
        if self.V0 is not None:
            object.__setattr__(self, "V0", _frozen(self.V0))
        if self.x0 is not None:
            object.__setattr__(self, "x0", _frozen(self.x0))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        times = [t for t, _ in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("event times must be strictly increasing")
        if times and (times[0] < 0 or times[-1] > self.t_end):
            raise ValueError("event times must lie within [0, t_end]")
        self.n_steps
        self.delay_steps
        for t in times:
            _steps(t, self.dt, "event time")

    @property
    def n_steps(self) -> int:
        return _steps(self.t_end, self.dt, "t_end")

    @property
    def delay_steps(self) -> int:
        return _steps(self.tau, self.dt, "tau") if self.tau > 0 else 0

    @property
    def I_inj_final(self) -> np.ndarray:
        return self.events[-1][1] if self.events else self.I_inj_initial


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    u: np.ndarray
    state_layout: tuple[str, ...]
    I_inj_final: np.ndarray
    tail: Optional["Trajectory"] = None

    @property
    def n(self) -> int:
        return int(self.u.shape[1])

    def block(self, name: str) -> np.ndarray:
        k = self.state_layout.index(name)
        return self.states[:, k * self.n : (k + 1) * self.n]

    @property
    def V(self) -> np.ndarray:
        return self.block("V")

    def tail_window(self, fraction: float = TAIL_FRACTION) -> "Trajectory":
        """Full-resolution tail if recorded, else the last ``fraction`` of samples."""
        if self.tail is not None:
            return self.tail
        k = max(1, math.ceil(fraction * len(self.times)))
        return Trajectory(self.times[-k:], self.states[-k:], self.u[-k:], self.state_layout, self.I_inj_final)

    def to_csv(self, fh=None) -> str:
        """Write ``t,V_*,u_*[,Vhat_*][,Vbar_*]`` rows; returns the text."""
        n = self.n
        cols = [self.times[:, None], self.V, self.u]
        header = ["t"] + [f"V_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(n)]
        for name in ("Vhat", "Vbar"):
            if name in self.state_layout:
                cols.append(self.block(name))
                header += [f"{name}_{i + 1}" for i in range(n)]
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        np.savetxt(buf, np.hstack(cols), fmt="%.8e", delimiter=",")
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def simulate(system: ClosedLoopSystem, scenario: SimScenario, stride: int = 1, tail_fraction: float = TAIL_FRACTION) -> Trajectory:
    """Integrate the closed loop through the scenario's injection schedule.

    Every ``stride``-th step is recorded; the final ``tail_fraction`` of
    steps is additionally kept at full resolution in ``Trajectory.tail``.
    History before ``t = 0`` is held at the initial state.
    """
    n, dim = system.n, system.dim
    if scenario.I_inj_initial.shape != (n,) or any(I.shape != (n,) for _, I in scenario.events):
        raise ValueError(f"scenario injections must have {n} entries")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    dt, N, m = scenario.dt, scenario.n_steps, scenario.delay_steps

    if scenario.x0 is not None:
        x0 = np.array(scenario.x0, dtype=float)
        if x0.shape != (dim,):
            raise ValueError(f"x0 needs {dim} entries")
    elif scenario.V0 is not None:
        x0 = system.initial_state(scenario.V0)
    else:
        x0 = solve_equilibrium(system.with_injection(scenario.I_inj_initial))

    if m > 0:
        A_local, A_remote = system.split_remote()
    else:
        A_local, A_remote = np.array(system.A), np.zeros_like(system.A)

    b_seq = [system.with_injection(scenario.I_inj_initial).b]
    seg_end = []
    for t, I in scenario.events:
        seg_end.append(_steps(t, dt, "event time"))
        b_seq.append(system.with_injection(I).b)
    seg_end.append(N + 1)
    b_seq = np.ascontiguousarray(b_seq)
    seg_end = np.asarray(seg_end, dtype=np.int64)

    n_tail = max(1, math.ceil(tail_fraction * (N + 1)))
    tail_start = N + 1 - n_tail
    rec = np.empty((N // stride + 1, dim))
    tail = np.empty((n_tail, dim))
    blowup = BLOWUP_FACTOR * max(np.max(np.abs(x0)), 1.0)
    status = rk4_delay(
        np.ascontiguousarray(A_local), np.ascontiguousarray(A_remote), b_seq, seg_end, x0,
        N, m, dt, stride, rec, tail_start, tail, blowup,
    )
    if status >= 0:
        raise SimulationDiverged(status, status * dt)

    layout, I_fin = system.state_layout, scenario.I_inj_final
    times = np.arange(rec.shape[0]) * (stride * dt)
    tail_traj = Trajectory(np.arange(tail_start, N + 1) * dt, tail, system.output(tail), layout, I_fin)
    return Trajectory(times, rec, system.output(rec), layout, I_fin, tail_traj)


def solve_equilibrium(system: ClosedLoopSystem, anchor=None, vbar_mean: float = 0.0) -> np.ndarray:
    """Stationary state of ``dx/dt = A x + b``.

    With a structural zero mode the equilibrium is a line; the free shift is
    fixed by ``anchor`` (a state whose conserved quantity ``w^T x``, with
    ``w`` the left null vector of ``A``, the equilibrium must share) or
    else by requiring the mean of ``Vbar`` to equal ``vbar_mean``.
    """
    A, b = system.A, system.b
    bnorm = max(np.linalg.norm(b), np.finfo(float).tiny)
    # row scaling by the mass puts gains and conductances on one scale
    m = np.ones(system.dim) if system.mass is None else system.mass
    MA, Mb = m[:, None] * A, m * b
    v = system.structural_zero
    if v is None:
        s = np.linalg.svd(MA, compute_uv=False)
        if s[-1] <= s[0] * np.finfo(float).eps * A.shape[0] * 16:
            raise EquilibriumError("closed-loop matrix is singular")
        x = np.linalg.solve(MA, -Mb)
    else:
        # border the system with the constraint that pins the free shift
        if anchor is not None:
            _, _, Vt = np.linalg.svd(A.T)
            c = Vt[-1]
            target = c @ np.asarray(anchor, dtype=float)
        else:
            c = np.zeros(system.dim)
            c[system.block("Vbar")] = 1.0 / system.n
            target = vbar_mean
        f = np.linalg.norm(MA, 2) / np.linalg.norm(c)
        c, target = f * c, f * target
        K = np.vstack([MA, c])
        s = np.linalg.svd(K, compute_uv=False)
        if s[-1] <= s[0] * np.finfo(float).eps * A.shape[0] * 16:
            raise EquilibriumError("rank deficiency beyond the structural zero mode")
        x = np.linalg.lstsq(K, np.concatenate([-Mb, [target]]), rcond=None)[0]
    resid = np.linalg.norm(A @ x + b)
    if resid > 1e-8 * bnorm:
        raise EquilibriumError(f"equilibrium residual {resid:.3e} exceeds tolerance")
    return x


@dataclass(frozen=True, eq=False)
class SteadyStateMetrics:
    u_mean: np.ndarray
    u_star: np.ndarray
    u_error_inf: float
    voltage_offset_residual: float
    V_mean: np.ndarray
    V_nom_error_inf: float
    max_voltage_spread: float
    current_balance: float
    tail_samples: int

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def steady_state_metrics(traj: Trajectory, grid: GridTopology, spec: ControllerSpec, F=None, G=None) -> SteadyStateMetrics:
    """Objective quantities averaged over the trajectory tail.

    ``F`` defaults to ``1/K_P`` and ``G`` to the voltage weights the
    controller minimizes.
    """
    tail = traj.tail_window()
    F = 1.0 / spec.K_P if F is None else np.asarray(F, dtype=float)
    G = default_voltage_weights(spec) if G is None else np.asarray(G, dtype=float)
    u_mean = tail.u.mean(axis=0)
    V_mean = tail.V.mean(axis=0)
    u_star = optimal_dispatch(traj.I_inj_final, F).u_star
    return SteadyStateMetrics(
        u_mean=u_mean,
        u_star=np.array(u_star),
        u_error_inf=float(np.max(np.abs(u_mean - u_star))),
        voltage_offset_residual=voltage_offset_residual(V_mean, grid.V_nom, G),
        V_mean=V_mean,
        V_nom_error_inf=float(np.max(np.abs(V_mean - grid.V_nom))),
        max_voltage_spread=float(np.ptp(V_mean)),
        current_balance=float(np.sum(u_mean + traj.I_inj_final)),
        tail_samples=len(tail.times),
    )

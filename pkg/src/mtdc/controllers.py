"""Voltage droop and distributed averaging controllers for MTDC grids.

The closed loop of every controller with the bus dynamics
``C dV/dt = -L_R V + I_inj + u`` is an affine system ``dx/dt = A x + b``.
State vectors stack controller blocks before the voltages, e.g.
``[Vbar, Vhat, V]`` for the three-state averaging controller.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .grid import CommGraph, GridTopology, _frozen, build_conductance_laplacian


class Variant(str, enum.Enum):
    VDM = "vdm"
    AVG_I = "avg1"
    AVG_II = "avg2"
    AVG_III = "avg3"


LAYOUTS: dict[Variant, tuple[str, ...]] = {
    Variant.VDM: ("V",),
    Variant.AVG_I: ("Vhat", "V"),
    Variant.AVG_II: ("Vhat", "V"),
    Variant.AVG_III: ("Vbar", "Vhat", "V"),
}


class ControllerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ControllerSpec:
    """Control law choice and its gains.

    ``K_P`` and ``K_V`` are diagonal gain vectors. Averaging controller I
    needs ``K_V`` positive at exactly one bus; controller II uses a single
    scalar ``k_V`` (stored as a constant vector) and requires all-to-all
    voltage measurements via ``integral_comm``; controller III takes a full
    ``K_V`` vector and a second consensus gain ``delta``.
    """

    variant: Variant
    K_P: np.ndarray
    K_V: Optional[np.ndarray] = None
    gamma: Optional[float] = None
    delta: Optional[float] = None
    comm: Optional[CommGraph] = None
    integral_comm: Optional[CommGraph] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "K_P", _frozen(np.atleast_1d(self.K_P)))
        if self.K_V is not None:
            K_V = np.atleast_1d(np.asarray(self.K_V, dtype=float))
            if K_V.size == 1 and self.n > 1:
                K_V = np.full(self.n, float(K_V[0]))
            object.__setattr__(self, "K_V", _frozen(K_V))
        self._check()

    @property
    def n(self) -> int:
        return int(self.K_P.shape[0])

    @property
    def layout(self) -> tuple[str, ...]:
        return LAYOUTS[self.variant]

    @property
    def k_V(self) -> float:
        """Scalar integral gain of controller II."""
        return float(self.K_V[0])

    def _check(self):
        v, n = self.variant, self.n
        problems = []
        if not np.all(self.K_P > 0):
            problems.append("K_P must be positive at every bus")
        if v is Variant.VDM:
            if problems:
                raise ControllerError("; ".join(problems))
            return
        if self.K_V is None or self.K_V.shape != (n,):
            problems.append(f"K_V must have {n} entries")
        elif np.any(self.K_V < 0):
            problems.append("K_V must be nonnegative")
        if self.gamma is None or not self.gamma > 0:
            problems.append("gamma must be positive")
        if self.comm is None:
            problems.append("communication graph required")
        elif self.comm.n != n:
            problems.append(f"communication graph has {self.comm.n} buses, gains have {n}")
        if v is Variant.AVG_I and self.K_V is not None and self.K_V.shape == (n,):
            if np.count_nonzero(self.K_V > 0) != 1:
                problems.append("controller I needs K_V positive at exactly one bus")
        if v is Variant.AVG_II:
            if self.K_V is not None and self.K_V.shape == (n,) and (np.ptp(self.K_V) != 0 or self.K_V[0] <= 0):
                problems.append("controller II needs a single positive scalar k_V")
            if self.integral_comm is None or not self.integral_comm.complete_flag:
                problems.append("controller II needs complete communication for the integral term")
        if v is Variant.AVG_III and (self.delta is None or not self.delta > 0):
            problems.append("delta must be positive")
        if problems:
            raise ControllerError("; ".join(problems))

    @property
    def voltage_bus(self) -> int:
        """Index of the bus regulating voltage under controller I."""
        return int(np.flatnonzero(self.K_V > 0)[0])

    @classmethod
    def vdm(cls, K_P) -> "ControllerSpec":
        return cls(Variant.VDM, K_P)

    @classmethod
    def avg1(cls, K_P, k_V: float, gamma: float, comm: CommGraph, voltage_bus: int = 0) -> "ControllerSpec":
        K_P = np.atleast_1d(np.asarray(K_P, dtype=float))
        n = comm.n
        if K_P.size == 1:
            K_P = np.full(n, K_P[0])
        K_V = np.zeros(n)
        K_V[voltage_bus] = k_V
        return cls(Variant.AVG_I, K_P, K_V, gamma, comm=comm)

    @classmethod
    def avg2(cls, K_P, k_V: float, gamma: float, comm: CommGraph, integral_comm: Optional[CommGraph] = None) -> "ControllerSpec":
        n = comm.n
        K_P = np.broadcast_to(np.asarray(K_P, dtype=float), (n,))
        integral_comm = integral_comm or CommGraph.complete(n)
        return cls(Variant.AVG_II, K_P, np.full(n, float(k_V)), gamma, comm=comm, integral_comm=integral_comm)

    @classmethod
    def avg3(cls, K_P, K_V, gamma: float, delta: float, comm: CommGraph) -> "ControllerSpec":
        n = comm.n
        K_P = np.broadcast_to(np.asarray(K_P, dtype=float), (n,))
        K_V = np.broadcast_to(np.asarray(K_V, dtype=float), (n,))
        return cls(Variant.AVG_III, K_P, K_V, gamma, delta, comm=comm)


@dataclass(frozen=True, eq=False)
class DispatchTarget:
    mu: float
    u_star: np.ndarray
    F: np.ndarray


def optimal_dispatch(I_inj, F) -> DispatchTarget:
    """Minimizer of sum(f_i u_i^2)/2 subject to network current balance.

    The balance constraint reduces to ``sum(u + I_inj) = 0``; stationarity
    gives ``u = mu / f`` with ``mu = -sum(I_inj) / sum(1/f)``.
    """
    I_inj = np.asarray(I_inj, dtype=float)
    F = np.broadcast_to(np.asarray(F, dtype=float), I_inj.shape)
    if not np.all(F > 0):
        raise ValueError("cost weights F must be positive")
    mu = -I_inj.sum() / np.sum(1.0 / F)
    return DispatchTarget(float(mu), _frozen(mu / F), _frozen(F))


def voltage_offset_residual(V, V_nom, G) -> float:
    """Weighted offset ``sum(g_i (V_i - V_nom_i))``.

    Zero exactly when the quadratic voltage cost is minimal over the family
    of equilibria that differ by a common voltage shift.
    """
    V = np.asarray(V, dtype=float)
    d = V - np.asarray(V_nom, dtype=float)
    return float(np.sum(np.asarray(G, dtype=float) * d, axis=-1)) if d.ndim == 1 else np.sum(G * d, axis=-1)


def control_output(spec: ControllerSpec, V, internal: Mapping[str, np.ndarray] | Sequence[np.ndarray] = (), V_nom=None):
    """Evaluate the controlled injection ``u`` at a given state.

    ``internal`` holds the controller blocks in layout order (``[Vhat]`` or
    ``[Vbar, Vhat]``) or as a mapping keyed by block name. Arrays may carry
    leading sample axes.
    """
    names = spec.layout[:-1]
    if isinstance(internal, Mapping):
        blocks = [internal[k] for k in names] if set(internal) >= set(names) else None
    else:
        blocks = list(internal)
    if blocks is None or len(blocks) != len(names):
        raise ControllerError(f"{spec.variant.value} expects controller blocks {list(names)}")
    V = np.asarray(V, dtype=float)
    K_P = spec.K_P
    if spec.variant is Variant.VDM:
        if V_nom is None:
            raise ControllerError("droop control needs V_nom")
        return K_P * (np.asarray(V_nom) - V)
    if spec.variant in (Variant.AVG_I, Variant.AVG_II):
        (Vhat,) = blocks
        return K_P * (np.asarray(Vhat) - V)
    Vbar, Vhat = blocks
    return -K_P * (V - np.asarray(Vhat) - np.asarray(Vbar))


@dataclass(frozen=True, eq=False)
class ClosedLoopSystem:
    """Affine closed loop ``dx/dt = A x + b`` with ``b = b0 + B_inj I_inj``.

    ``delayed_blocks`` lists (row block, column block) couplings that carry
    communicated information; within those blocks the off-diagonal entries
    (neighbor terms) are remote and subject to the communication delay,
    while diagonal entries use the bus's own, local measurements.

    ``mass`` is 1 for controller states and ``C_i`` for voltages, so that
    ``diag(mass) A`` has entries on the scale of the gains and conductances.
    """

    spec: ControllerSpec
    V_nom: np.ndarray
    state_layout: tuple[str, ...]
    A: np.ndarray
    b0: np.ndarray
    B_inj: np.ndarray
    I_inj: np.ndarray
    delayed_blocks: frozenset = field(default_factory=frozenset)
    structural_zero: Optional[np.ndarray] = None
    A_remote: Optional[np.ndarray] = None
    mass: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return int(self.V_nom.shape[0])

    @property
    def dim(self) -> int:
        return int(self.A.shape[0])

    @property
    def b(self) -> np.ndarray:
        return self.b0 + self.B_inj @ self.I_inj

    def block(self, name: str) -> slice:
        k = self.state_layout.index(name)
        return slice(k * self.n, (k + 1) * self.n)

    def with_injection(self, I_inj) -> "ClosedLoopSystem":
        I_inj = _frozen(I_inj)
        if I_inj.shape != (self.n,):
            raise ValueError(f"I_inj needs {self.n} entries")
        return replace(self, I_inj=I_inj)

    def split_remote(self) -> tuple[np.ndarray, np.ndarray]:
        """Split ``A`` into local and remote (delayed) parts."""
        if self.A_remote is None:
            return np.array(self.A), np.zeros_like(self.A)
        return self.A - self.A_remote, np.array(self.A_remote)

    def output(self, states) -> np.ndarray:
        """Controlled injections for one state or a stack of states."""
        states = np.asarray(states, dtype=float)
        blocks = {name: states[..., self.block(name)] for name in self.state_layout}
        V = blocks.pop("V")
        return control_output(self.spec, V, blocks, self.V_nom)

    def split_state(self, x) -> dict[str, np.ndarray]:
        x = np.asarray(x)
        return {name: x[..., self.block(name)] for name in self.state_layout}

    def initial_state(self, V0) -> np.ndarray:
        """Full state from bus voltages with neutral controller states.

        ``Vhat = V0`` and ``Vbar = 0`` so that ``u = 0`` at start.
        """
        V0 = np.asarray(V0, dtype=float)
        parts = {"V": V0, "Vhat": V0, "Vbar": np.zeros(self.n)}
        return np.concatenate([parts[name] for name in self.state_layout])


def _off_diagonal(M: np.ndarray) -> np.ndarray:
    return M - np.diag(np.diag(M))


def assemble_closed_loop(grid: GridTopology, spec: ControllerSpec, I_inj=None, delay_voltage_sum: bool = False) -> ClosedLoopSystem:
    """Build the affine closed loop of ``grid`` under the control law ``spec``.

    Remote couplings are the neighbor terms of the consensus sums. The
    all-bus voltage sum of controller II is treated as an undelayed
    measurement unless ``delay_voltage_sum`` is set; delaying it at the
    reference gains (k_V = 5, 4 buses) makes the mean-voltage loop unstable
    for delays above roughly 0.14 s.
    """
    n = grid.n
    if spec.n != n:
        raise ControllerError(f"controller gains have {spec.n} entries for a {n}-bus grid")
    if spec.comm is not None and spec.comm.n != n:
        raise ControllerError(f"communication graph has {spec.comm.n} buses for a {n}-bus grid")
    I_inj = np.zeros(n) if I_inj is None else np.asarray(I_inj, dtype=float)
    if I_inj.shape != (n,):
        raise ControllerError(f"I_inj needs {n} entries")
    L_R = build_conductance_laplacian(grid)
    E = grid.E
    KP = np.diag(spec.K_P)
    Z = np.zeros((n, n))
    V_nom = grid.V_nom
    bus_rows = -E @ (L_R + KP)
    delayed: set[tuple[str, str]] = set()
    structural = None
    remote = None

    if spec.variant is Variant.VDM:
        A = bus_rows
        b0 = E @ KP @ V_nom
        B_inj = E
    elif spec.variant in (Variant.AVG_I, Variant.AVG_II):
        L_c = spec.comm.laplacian()
        g = spec.gamma
        if spec.variant is Variant.AVG_I:
            KV = np.diag(spec.K_V)
            # K_V is nonzero only at the regulating bus, so K_V V_nom equals
            # K_V V_nom_1 1_n restricted to that bus.
            integral = KV
            b_hat = KV @ V_nom
        else:
            integral = spec.k_V * np.ones((n, n))
            b_hat = integral @ V_nom
        A = np.block([[-g * L_c, g * L_c - integral], [E @ KP, bus_rows]])
        b0 = np.concatenate([b_hat, np.zeros(n)])
        B_inj = np.vstack([Z, E])
        delayed = {("Vhat", "Vhat"), ("Vhat", "V")}
        consensus = _off_diagonal(g * L_c)
        remote_vv = consensus
        if spec.variant is Variant.AVG_II and delay_voltage_sum:
            remote_vv = consensus - _off_diagonal(integral)
        remote = np.block([[-consensus, remote_vv], [Z, Z]])
    else:
        L_c = spec.comm.laplacian()
        g, d = spec.gamma, spec.delta
        KV = np.diag(spec.K_V)
        A = np.block(
            [
                [-d * L_c, Z, -KV],
                [-g * L_c, -g * L_c, g * L_c],
                [E @ KP, E @ KP, bus_rows],
            ]
        )
        b0 = np.concatenate([KV @ V_nom, np.zeros(n), np.zeros(n)])
        B_inj = np.vstack([Z, Z, E])
        delayed = {("Vbar", "Vbar"), ("Vhat", "Vbar"), ("Vhat", "Vhat"), ("Vhat", "V")}
        dL, gL = _off_diagonal(d * L_c), _off_diagonal(g * L_c)
        remote = np.block([[-dL, Z, Z], [-gL, -gL, gL], [Z, Z, Z]])
        structural = np.concatenate([np.ones(n), -np.ones(n), np.zeros(n)]) / np.sqrt(2 * n)

    return ClosedLoopSystem(
        spec=spec,
        V_nom=_frozen(V_nom),
        state_layout=spec.layout,
        A=_frozen(A),
        b0=_frozen(b0),
        B_inj=_frozen(B_inj),
        I_inj=_frozen(I_inj),
        delayed_blocks=frozenset(delayed),
        structural_zero=None if structural is None else _frozen(structural),
        A_remote=None if remote is None else _frozen(remote),
        mass=_frozen(np.concatenate([np.ones(n * (len(spec.layout) - 1)), grid.C])),
    )


def default_voltage_weights(spec: ControllerSpec) -> np.ndarray:
    """Voltage-cost weights G each controller minimizes at equilibrium."""
    n = spec.n
    if spec.variant is Variant.AVG_I:
        G = np.zeros(n)
        G[spec.voltage_bus] = 1.0
        return G
    if spec.variant is Variant.AVG_III:
        return np.array(spec.K_V)
    return np.ones(n)

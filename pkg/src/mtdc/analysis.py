"""Stability certificates, spectra and steady-state bounds.

Certificates are sufficient conditions only. A failed condition gives an
``inconclusive`` verdict; a violated precondition of the underlying result
gives ``inapplicable``. Spectrum verdicts come from the eigenvalues of the
closed-loop matrix alone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .controllers import ClosedLoopSystem, ControllerSpec, Variant, optimal_dispatch
from .grid import ZERO_TOL, GridTopology, build_conductance_laplacian, laplacian_spectrum

CERTIFIED = "certified_stable"
INCONCLUSIVE = "inconclusive"
INAPPLICABLE = "inapplicable"

HURWITZ = "hurwitz"
HURWITZ_EXCL_ZERO = "hurwitz_excluding_structural_zero"
UNSTABLE = "unstable"


class StructuralZeroMissing(RuntimeError):
    pass


@dataclass(frozen=True)
class Condition:
    id: str
    value: float
    relation: str  # ">" or ">="
    threshold: float
    passed: bool
    rhs: Optional[float] = None


@dataclass(eq=False)
class StabilityReport:
    certificate_values: list[Condition] = field(default_factory=list)
    certificate_verdict: Optional[str] = None
    spectrum_verdict: Optional[str] = None
    eigenvalues: Optional[np.ndarray] = None
    margin: Optional[float] = None
    corollary_identical_topology: Optional[bool] = None
    notes: list[str] = field(default_factory=list)

    @property
    def spectrum_stable(self) -> bool:
        return self.spectrum_verdict in (HURWITZ, HURWITZ_EXCL_ZERO)

    def merge(self, other: "StabilityReport") -> "StabilityReport":
        out = StabilityReport(**self.__dict__)
        for k, v in other.__dict__.items():
            if v is not None and not (isinstance(v, list) and not v):
                setattr(out, k, v)
        out.notes = self.notes + other.notes
        return out

    def to_dict(self) -> dict:
        eig = None
        if self.eigenvalues is not None:
            eig = [[float(z.real), float(z.imag)] for z in self.eigenvalues]
        return {
            "certificate_values": [c.__dict__ for c in self.certificate_values],
            "certificate_verdict": self.certificate_verdict,
            "spectrum_verdict": self.spectrum_verdict,
            "eigenvalues": eig,
            "margin": self.margin,
            "corollary_identical_topology": self.corollary_identical_topology,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = ["Stability report", "================"]
        if self.certificate_verdict is not None:
            lines.append(f"certificate verdict: {self.certificate_verdict}")
            for c in self.certificate_values:
                flag = "pass" if c.passed else "FAIL"
                if c.rhs is not None:
                    lines.append(f"  {c.id:<28s} {c.value:+.9e} <= {c.rhs:+.9e}  [{flag}]")
                else:
                    lines.append(f"  {c.id:<28s} {c.value:+.9e} {c.relation} {c.threshold:g}  [{flag}]")
            if self.corollary_identical_topology is not None:
                lines.append(f"  communication graph identical to line graph: {self.corollary_identical_topology}")
        if self.spectrum_verdict is not None:
            lines.append(f"spectrum verdict: {self.spectrum_verdict}")
            lines.append(f"  margin (max real part, structural zero excluded): {self.margin:+.9e}")
            if self.eigenvalues is not None:
                lines.append(f"  eigenvalues ({len(self.eigenvalues)}), slowest first:")
                for z in sorted(self.eigenvalues, key=lambda z: (-z.real, z.imag))[:8]:
                    lines.append(f"    {z.real:+.9e} {z.imag:+.9e}j")
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


def _sym_min(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def _sym_max(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def closed_loop_eigenvalues(system: ClosedLoopSystem) -> tuple[np.ndarray, float]:
    """Eigenvalues of ``A`` and the scale they are resolved against.

    Bus capacitances make ``A`` stiff: voltage rows are of order ``K_P / C``
    while controller modes can be many decades slower, and a plain
    eigensolver loses those slow modes to rounding at ``eps * ||A||``. The
    eigenvalues are computed instead from the pencil ``(M A, M)`` with
    ``M = diag(mass)``, whose entries are gain-sized; the returned scale is
    ``||M A|| / ||M||`` (the spectral radius for a pure voltage system).
    """
    A = np.asarray(system.A)
    if system.mass is None:
        lam = np.linalg.eigvals(A)
        return lam, float(np.max(np.abs(lam))) if lam.size else 0.0
    M = np.diag(system.mass)
    N = system.mass[:, None] * A
    lam = scipy.linalg.eigvals(N, M)
    return lam, float(np.linalg.norm(N, 2) / np.linalg.norm(M, 2))


def hurwitz_verdict(system: ClosedLoopSystem, rtol: float = ZERO_TOL) -> StabilityReport:
    """Classify the spectrum of ``A``.

    If the system declares a structural zero mode, the eigenvalue closest to
    the origin must lie within ``rtol * scale`` of 0 and is excluded from
    the margin. Stable means margin < -rtol * scale; see
    :func:`closed_loop_eigenvalues` for the scale.
    """
    A = np.asarray(system.A)
    lam, scale = closed_loop_eigenvalues(system)
    eps = rtol * max(scale, np.finfo(float).tiny)
    rest = lam
    if system.structural_zero is not None:
        k = int(np.argmin(np.abs(lam)))
        residual = np.linalg.norm(A @ system.structural_zero)
        if abs(lam[k]) > eps or residual > rtol * np.linalg.norm(A, 2):
            raise StructuralZeroMissing(f"expected a zero eigenvalue, nearest is {lam[k]:.3e}")
        rest = np.delete(lam, k)
    margin = float(np.max(rest.real)) if rest.size else float("-inf")
    if margin < -eps:
        verdict = HURWITZ_EXCL_ZERO if system.structural_zero is not None else HURWITZ
    else:
        verdict = UNSTABLE
    order = np.lexsort((lam.imag, lam.real))
    return StabilityReport(spectrum_verdict=verdict, eigenvalues=lam[order], margin=margin)


def _same_laplacian(L1, L2, rtol=ZERO_TOL) -> bool:
    scale = max(np.max(np.abs(L1)), np.max(np.abs(L2)), np.finfo(float).tiny)
    return bool(np.max(np.abs(L1 - L2)) <= rtol * scale)


def certify_avg_I_II(grid: GridTopology, spec: ControllerSpec, rtol: float = ZERO_TOL) -> StabilityReport:
    """Sufficient stability conditions shared by averaging controllers I and II.

    Condition ``gain_damping``::

        1/2 lmin(Kp^-1 L_R + L_R Kp^-1) + 1 + gamma/2 lmin(L_c Kp^-1 C + C Kp^-1 L_c) > 0

    Condition ``laplacian_product``::

        lmin(L_c Kp^-1 L_R + L_R Kp^-1 L_c) >= 0

    The second always has an eigenvalue at 0 (constant vector), so ``>= 0``
    is judged with a tolerance of ``rtol`` times the spectral radius.
    """
    if spec.variant not in (Variant.AVG_I, Variant.AVG_II):
        raise ValueError("certify_avg_I_II applies to averaging controllers I and II")
    if spec.n != grid.n or spec.comm.n != grid.n:
        raise ValueError("controller and grid dimensions differ")
    L_R = build_conductance_laplacian(grid)
    L_c = spec.comm.laplacian()
    Kinv = np.diag(1.0 / spec.K_P)
    C = np.diag(grid.C)
    g = spec.gamma
    c1 = 0.5 * _sym_min(Kinv @ L_R + L_R @ Kinv) + 1.0 + 0.5 * g * _sym_min(L_c @ Kinv @ C + C @ Kinv @ L_c)
    P = L_c @ Kinv @ L_R + L_R @ Kinv @ L_c
    lam = np.linalg.eigvalsh(0.5 * (P + P.T))
    c2 = float(lam[0])
    tol2 = rtol * max(float(np.max(np.abs(lam))), np.finfo(float).tiny)
    conds = [
        Condition("gain_damping", float(c1), ">", 0.0, bool(c1 > 0)),
        Condition("laplacian_product", c2, ">=", 0.0, bool(c2 >= -tol2)),
    ]
    verdict = CERTIFIED if all(c.passed for c in conds) else INCONCLUSIVE
    return StabilityReport(
        certificate_values=conds,
        certificate_verdict=verdict,
        corollary_identical_topology=_same_laplacian(L_c, L_R, rtol),
    )


def certify_avg_III(grid: GridTopology, spec: ControllerSpec, rtol: float = ZERO_TOL) -> StabilityReport:
    """Sufficient conditions for controller III with L_c = L_R and K_P = k_P I.

    Evaluates, with ``m1`` and ``m2`` the left-hand sides of the first two::

        (gamma+delta)/(2 k_P) lmin(L_R C + C L_R) + 1 > 0               (m1)
        gamma delta/(2 k_P) lmin(L_R^2 C + C L_R^2) + min K_V > 0       (m2)
        lmax(L_R^3) gamma delta / k_P^2 <= m1 * m2
    """
    if spec.variant is not Variant.AVG_III:
        raise ValueError("certify_avg_III applies to averaging controller III")
    if spec.n != grid.n or spec.comm.n != grid.n:
        raise ValueError("controller and grid dimensions differ")
    L_R = build_conductance_laplacian(grid)
    L_c = spec.comm.laplacian()
    same = _same_laplacian(L_c, L_R, rtol)
    notes = []
    if not same:
        notes.append("certificate needs the communication Laplacian to equal the line Laplacian")
    if np.ptp(spec.K_P) > rtol * np.max(spec.K_P):
        notes.append("certificate needs uniform proportional gains K_P")
    if notes:
        return StabilityReport(certificate_verdict=INAPPLICABLE, corollary_identical_topology=same, notes=notes)
    kP = float(spec.K_P[0])
    g, d = spec.gamma, spec.delta
    C = np.diag(grid.C)
    L2 = L_R @ L_R
    m1 = (g + d) / (2 * kP) * _sym_min(L_R @ C + C @ L_R) + 1.0
    m2 = g * d / (2 * kP) * _sym_min(L2 @ C + C @ L2) + float(np.min(spec.K_V))
    lhs3 = _sym_max(L2 @ L_R) * g * d / kP**2
    conds = [
        Condition("first_order_damping", float(m1), ">", 0.0, bool(m1 > 0)),
        Condition("integral_coupling", float(m2), ">", 0.0, bool(m2 > 0)),
        Condition("cross_term", float(lhs3), "<=", 0.0, bool(lhs3 <= m1 * m2), rhs=float(m1 * m2)),
    ]
    verdict = CERTIFIED if all(c.passed for c in conds) else INCONCLUSIVE
    return StabilityReport(certificate_values=conds, certificate_verdict=verdict, corollary_identical_topology=True)


def certify_vdm(grid: GridTopology, spec: ControllerSpec) -> StabilityReport:
    """Droop control is stable for every positive gain vector."""
    ok = bool(np.all(spec.K_P > 0))
    cond = Condition("min_droop_gain", float(np.min(spec.K_P)), ">", 0.0, ok)
    return StabilityReport(certificate_values=[cond], certificate_verdict=CERTIFIED if ok else INCONCLUSIVE)


def certify(grid: GridTopology, spec: ControllerSpec) -> StabilityReport:
    if spec.variant is Variant.VDM:
        return certify_vdm(grid, spec)
    if spec.variant is Variant.AVG_III:
        return certify_avg_III(grid, spec)
    return certify_avg_I_II(grid, spec)


def stability_report(grid: GridTopology, system: ClosedLoopSystem, rtol: float = ZERO_TOL) -> StabilityReport:
    """Certificate and spectrum verdicts combined.

    ``rtol`` sets the spectrum tolerance only; certificate tolerances keep
    their defaults.
    """
    return certify(grid, system.spec).merge(hurwitz_verdict(system, rtol))


def voltage_difference_bound(grid: GridTopology, I_tot) -> float:
    """Upper bound on any stationary ``|V_i - V_j|``: 2 max|I_tot| sum_{k>=2} 1/lambda_k."""
    spec = laplacian_spectrum(build_conductance_laplacian(grid))
    return 2.0 * float(np.max(np.abs(np.asarray(I_tot, dtype=float)))) * spec.harmonic_sum


@dataclass(frozen=True)
class DroopPoint:
    k_P: float
    V_error_inf: float
    u_error_inf: float
    balance_error_inf: float  # ||u + I_inj||_inf

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.k_P, self.V_error_inf, self.u_error_inf, self.balance_error_inf)


def droop_equilibrium(grid: GridTopology, I_inj, k_P) -> tuple[np.ndarray, np.ndarray]:
    """Droop equilibrium voltages and injections for gain vector ``k_P``."""
    L_R = build_conductance_laplacian(grid)
    K = np.diag(np.broadcast_to(np.asarray(k_P, dtype=float), (grid.n,)))
    I_inj = np.asarray(I_inj, dtype=float)
    V = np.linalg.solve(L_R + K, K @ grid.V_nom + I_inj)
    return V, K @ (grid.V_nom - V)


def droop_asymptotics(grid: GridTopology, I_inj, k_P_sweep: Sequence[float]) -> list[DroopPoint]:
    """Distances of droop equilibria from the nominal voltage and optimal dispatch.

    Uniform gains ``k_P I`` make the matching cost weights uniform, so the
    optimal dispatch target is the same for every sweep value.
    """
    I_inj = np.asarray(I_inj, dtype=float)
    rows = []
    for k in k_P_sweep:
        if not k > 0:
            raise ValueError("droop gains must be positive")
        V, u = droop_equilibrium(grid, I_inj, k)
        u_star = optimal_dispatch(I_inj, np.full(grid.n, 1.0 / k)).u_star
        rows.append(
            DroopPoint(
                float(k),
                float(np.max(np.abs(V - grid.V_nom))),
                float(np.max(np.abs(u - u_star))),
                float(np.max(np.abs(u + I_inj))),
            )
        )
    return rows

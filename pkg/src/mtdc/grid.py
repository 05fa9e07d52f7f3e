"""Network description of an MTDC grid and its graph Laplacians.

Buses are indexed from 0 internally. Config files and reports use 1-based
bus numbers; conversion happens at the I/O boundary only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Relative tolerance separating a structural zero eigenvalue from the rest.
ZERO_TOL = 1e-9


class TopologyError(ValueError):
    """Raised when a grid or communication graph is malformed.

    ``issues`` holds one message per violation.
    """

    def __init__(self, issues: Sequence[str]):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _components(n: int, pairs: Iterable[tuple[int, int]]) -> list[set[int]]:
    adj: dict[int, set[int]] = {k: set() for k in range(n)}
    for i, j in pairs:
        if 0 <= i < n and 0 <= j < n:
            adj[i].add(j)
            adj[j].add(i)
    seen: set[int] = set()
    comps = []
    for start in range(n):
        if start in seen:
            continue
        stack, comp = [start], set()
        while stack:
            k = stack.pop()
            if k in comp:
                continue
            comp.add(k)
            stack.extend(adj[k] - comp)
        seen |= comp
        comps.append(comp)
    return comps


def weighted_laplacian(n: int, edges: Iterable[tuple[int, int, float]]) -> np.ndarray:
    """Dense weighted Laplacian ``D - W`` for undirected edges ``(i, j, w)``."""
    L = np.zeros((n, n))
    for i, j, w in edges:
        L[i, j] -= w
        L[j, i] -= w
        L[i, i] += w
        L[j, j] += w
    return L


@dataclass(frozen=True)
class Line:
    i: int
    j: int
    R: float


@dataclass(frozen=True, eq=False)
class GridTopology:
    """Buses with lumped capacitance joined by purely resistive DC lines.

    Parameters
    ----------
    C : array_like
        Per-bus capacitance in farads.
    V_nom : array_like
        Per-bus nominal voltage in volts.
    lines : sequence of (i, j, R)
        Resistive lines, ``R`` in ohms, bus indices 0-based.
    """

    C: np.ndarray
    V_nom: np.ndarray
    lines: tuple[Line, ...]

    def __init__(self, C, V_nom, lines):
        object.__setattr__(self, "C", _frozen(C))
        object.__setattr__(self, "V_nom", _frozen(V_nom))
        object.__setattr__(
            self, "lines", tuple(l if isinstance(l, Line) else Line(int(l[0]), int(l[1]), float(l[2])) for l in lines)
        )

    @property
    def n(self) -> int:
        return int(self.C.shape[0])

    @property
    def E(self) -> np.ndarray:
        """Elastance matrix diag(1/C)."""
        return np.diag(1.0 / self.C)

    def laplacian(self) -> np.ndarray:
        return build_conductance_laplacian(self)

    def relabel(self, perm: Sequence[int]) -> "GridTopology":
        """Return the same grid with bus ``k`` renamed to ``perm[k]``."""
        perm = list(perm)
        inv = np.argsort(perm)
        return GridTopology(
            self.C[inv],
            self.V_nom[inv],
            [(perm[l.i], perm[l.j], l.R) for l in self.lines],
        )

    @classmethod
    def uniform(cls, n: int, edges: Iterable[tuple[int, int]], R: float, C: float, V_nom: float) -> "GridTopology":
        return cls(np.full(n, C), np.full(n, V_nom), [(i, j, R) for i, j in edges])


@dataclass(frozen=True)
class ValidationResult:
    issues: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    def raise_for_issues(self) -> None:
        if self.issues:
            raise TopologyError(self.issues)


def validate_topology(topology: GridTopology) -> ValidationResult:
    n = topology.n
    issues = []
    if n < 2:
        issues.append(f"grid needs at least 2 buses, got {n}")
    if topology.V_nom.shape != (n,):
        issues.append(f"V_nom has {topology.V_nom.size} entries for {n} buses")
    for k, c in enumerate(topology.C):
        if not c > 0:
            issues.append(f"bus {k + 1}: nonpositive capacitance {c}")
    seen: dict[frozenset, int] = {}
    for idx, line in enumerate(topology.lines):
        tag = f"line {idx + 1} ({line.i + 1}-{line.j + 1})"
        if not (0 <= line.i < n and 0 <= line.j < n):
            issues.append(f"{tag}: bus index out of range 1..{n}")
            continue
        if line.i == line.j:
            issues.append(f"{tag}: self-loop")
            continue
        key = frozenset((line.i, line.j))
        if key in seen:
            issues.append(f"{tag}: duplicate of line {seen[key] + 1}")
        else:
            seen[key] = idx
        if not line.R > 0:
            issues.append(f"{tag}: nonpositive resistance {line.R}")
    if n >= 2:
        comps = _components(n, ((l.i, l.j) for l in topology.lines))
        if len(comps) > 1:
            parts = ", ".join("{" + ",".join(str(k + 1) for k in sorted(c)) + "}" for c in comps)
            issues.append(f"disconnected: {len(comps)} components {parts}")
    return ValidationResult(tuple(issues))


def build_conductance_laplacian(topology: GridTopology) -> np.ndarray:
    """Laplacian of the line graph weighted by conductances 1/R_ij."""
    validate_topology(topology).raise_for_issues()
    return weighted_laplacian(topology.n, ((l.i, l.j, 1.0 / l.R) for l in topology.lines))


@dataclass(frozen=True)
class CommGraph:
    """Undirected weighted communication graph between bus controllers.

    Each unordered pair is stored once; ``c`` is the (symmetric) weight.
    """

    n: int
    edges: tuple[tuple[int, int, float], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(i), int(j), float(c)) for i, j, c in self.edges))
        issues = []
        seen = set()
        for i, j, c in self.edges:
            tag = f"comm edge ({i + 1}-{j + 1})"
            if not (0 <= i < self.n and 0 <= j < self.n) or i == j:
                issues.append(f"{tag}: invalid bus pair")
                continue
            key = frozenset((i, j))
            if key in seen:
                issues.append(f"{tag}: duplicate")
            seen.add(key)
            if not c > 0:
                issues.append(f"{tag}: nonpositive weight {c}")
        if not issues and len(_components(self.n, ((i, j) for i, j, _ in self.edges))) > 1:
            issues.append("communication graph disconnected")
        if issues:
            raise TopologyError(issues)

    @property
    def complete_flag(self) -> bool:
        return len(self.edges) == self.n * (self.n - 1) // 2

    def laplacian(self) -> np.ndarray:
        return weighted_laplacian(self.n, self.edges)

    @classmethod
    def mirror(cls, grid: GridTopology) -> "CommGraph":
        """Communication on the line graph with weights c_ij = 1/R_ij."""
        return cls(grid.n, tuple((l.i, l.j, 1.0 / l.R) for l in grid.lines))

    @classmethod
    def complete(cls, n: int, weight: float = 1.0) -> "CommGraph":
        return cls(n, tuple((i, j, weight) for i in range(n) for j in range(i + 1, n)))


@dataclass(frozen=True, eq=False)
class SpectralSummary:
    eigenvalues: np.ndarray
    fiedler_value: float
    harmonic_sum: float

    def zero_multiplicity(self, rtol: float = ZERO_TOL) -> int:
        scale = max(abs(self.eigenvalues[-1]), np.finfo(float).tiny)
        return int(np.sum(np.abs(self.eigenvalues) <= rtol * scale))


def laplacian_spectrum(L, sym_tol: float = 1e-10) -> SpectralSummary:
    """Ascending spectrum of a symmetric matrix plus Laplacian summaries.

    ``harmonic_sum`` is the sum of reciprocals of eigenvalues 2..n, the
    quantity entering the steady-state voltage spread bound.
    """
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {L.shape}")
    scale = max(np.max(np.abs(L)), np.finfo(float).tiny)
    asym = np.max(np.abs(L - L.T))
    if asym > sym_tol * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    lam = np.linalg.eigvalsh(0.5 * (L + L.T))
    fiedler = float(lam[1]) if lam.size > 1 else float("nan")
    harmonic = float(np.sum(1.0 / lam[1:])) if lam.size > 1 else 0.0
    return SpectralSummary(_frozen(lam), fiedler, harmonic)


def four_bus_ring(R: float = 3.7, C: float = 57e-6, V_nom: float = 100e3) -> GridTopology:
    """The four-bus test network: lines 1-2, 1-3, 2-4, 3-4."""
    return GridTopology.uniform(4, [(0, 1), (0, 2), (1, 3), (2, 3)], R, C, V_nom)

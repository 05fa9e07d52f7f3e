"""Seeded random grids and controller gains for randomized checks."""
from __future__ import annotations

import numpy as np

from .controllers import ControllerSpec, Variant
from .grid import CommGraph, GridTopology

# Ranges for randomized networks and gains.
N_RANGE = (3, 8)
R_RANGE = (0.5, 10.0)
C_RANGE = (10e-6, 100e-6)
GAIN_RANGE = (0.1, 100.0)
# Consensus gains of the three-state controller. Its certificate needs small
# gamma * delta; below about 1e-2 the slowest stable modes approach the
# resolution of double precision eigenvalues.
CONSENSUS_RANGE_III = (0.01, 10.0)


def _log_uniform(rng, lo, hi, size=None):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def random_tree(rng, n: int) -> set[tuple[int, int]]:
    perm = rng.permutation(n)
    return {tuple(sorted((int(perm[k]), int(perm[rng.integers(0, k)])))) for k in range(1, n)}


def random_grid(rng, n=None, V_nom: float = 100e3) -> GridTopology:
    """Connected grid: random spanning tree plus up to ``n - 1`` extra lines."""
    n = int(rng.integers(N_RANGE[0], N_RANGE[1] + 1)) if n is None else n
    edges = random_tree(rng, n)
    for _ in range(int(rng.integers(0, n))):
        i, j = rng.choice(n, 2, replace=False)
        edges.add(tuple(sorted((int(i), int(j)))))
    lines = [(i, j, float(rng.uniform(*R_RANGE))) for i, j in sorted(edges)]
    return GridTopology(rng.uniform(*C_RANGE, n), np.full(n, V_nom), lines)


def random_comm(rng, grid: GridTopology) -> CommGraph:
    """Half the time the line graph with c = 1/R, else a random weighted tree."""
    if rng.random() < 0.5:
        return CommGraph.mirror(grid)
    edges = random_tree(rng, grid.n)
    return CommGraph(grid.n, [(i, j, float(rng.uniform(0.1, 2.0))) for i, j in sorted(edges)])


def random_spec(rng, grid: GridTopology, variant) -> ControllerSpec:
    variant = Variant(variant)
    n = grid.n
    if variant is Variant.VDM:
        return ControllerSpec.vdm(_log_uniform(rng, *GAIN_RANGE, n))
    if variant is Variant.AVG_III:
        # the certificate presumes L_c = L_R and a uniform proportional gain
        return ControllerSpec.avg3(
            float(_log_uniform(rng, *GAIN_RANGE)),
            _log_uniform(rng, *GAIN_RANGE, n),
            float(_log_uniform(rng, *CONSENSUS_RANGE_III)),
            float(_log_uniform(rng, *CONSENSUS_RANGE_III)),
            CommGraph.mirror(grid),
        )
    comm = random_comm(rng, grid)
    K_P = _log_uniform(rng, *GAIN_RANGE, n) if rng.random() < 0.5 else float(_log_uniform(rng, *GAIN_RANGE))
    k_V = float(_log_uniform(rng, *GAIN_RANGE))
    gamma = float(_log_uniform(rng, *GAIN_RANGE))
    if variant is Variant.AVG_I:
        return ControllerSpec.avg1(K_P, k_V, gamma, comm, int(rng.integers(n)))
    return ControllerSpec.avg2(K_P, k_V, gamma, comm)


def random_case(rng, variant) -> tuple[GridTopology, ControllerSpec, np.ndarray]:
    """Grid, controller and injection vector (amperes, +-500 A per bus)."""
    grid = random_grid(rng)
    spec = random_spec(rng, grid, variant)
    return grid, spec, rng.uniform(-500.0, 500.0, grid.n)

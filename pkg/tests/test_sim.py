import dataclasses
import io

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from mtdc._kernel import rk4_delay
from mtdc.controllers import ControllerSpec, assemble_closed_loop
from mtdc.ensembles import random_grid, random_spec
from mtdc.grid import GridTopology
from mtdc.sim import (
    EquilibriumError,
    SimScenario,
    SimulationDiverged,
    simulate,
    solve_equilibrium,
    steady_state_metrics,
)
from tests.conftest import POST_STEP, PRE_STEP
from tests.strategies import connected_grids


def exact_affine(A, b, x0, t):
    """x(t) of dx/dt = A x + b from the augmented matrix exponential."""
    d = len(x0)
    M = np.zeros((d + 1, d + 1))
    M[:d, :d], M[:d, d] = A, b
    return (scipy.linalg.expm(M * t) @ np.r_[x0, 1.0])[:d]


def slow_ring(spec_name, reference_specs, C=57e-3):
    """Four-bus ring with large capacitance so a few thousand RK4 steps reach steady state."""
    g = GridTopology(np.full(4, C), np.full(4, 100e3), [(0, 1, 3.7), (0, 2, 3.7), (1, 3, 3.7), (2, 3, 3.7)])
    return g, assemble_closed_loop(g, reference_specs[spec_name])


def test_equilibrium_start_is_a_fixed_point(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["vdm"])
    sc = SimScenario(POST_STEP, t_end=0.02, dt=1e-5)
    tr = simulate(S, sc)
    x_eq = solve_equilibrium(S.with_injection(POST_STEP))
    assert np.max(np.abs(tr.states - x_eq)) <= 1e-9 * np.max(np.abs(x_eq))
    m = steady_state_metrics(tr, ring, reference_specs["vdm"])
    assert np.ptp(tr.u, axis=0).max() < 1e-9 * np.max(np.abs(tr.u))
    assert abs(m.current_balance) < 1e-9


def test_times_are_uniform_and_rows_agree(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["avg1"])
    tr = simulate(S, SimScenario(PRE_STEP, t_end=0.01, dt=1e-5, tau=2e-3, events=[(0.005, POST_STEP)]), stride=10)
    assert len(tr.times) == len(tr.states) == len(tr.u) == 101
    np.testing.assert_allclose(np.diff(tr.times), 1e-4, rtol=1e-9)
    assert len(tr.tail.times) == len(tr.tail.states) == 51
    np.testing.assert_array_equal(tr.tail.states[-1], tr.states[-1])


def deviation_system(S, x_start):
    """Same dynamics about the equilibrium, so states are O(deviation), not O(V_nom)."""
    x_eq = solve_equilibrium(S)
    S0 = dataclasses.replace(S, b0=np.zeros(S.dim), I_inj=np.zeros(S.n))
    return S0, x_start - x_eq


def test_matches_matrix_exponential(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["avg1"], POST_STEP)
    x0 = S.initial_state(ring.V_nom)
    tr = simulate(S, SimScenario(POST_STEP, t_end=0.05, dt=1e-6, x0=x0))
    ref = exact_affine(S.A, S.b, x0, 0.05)
    np.testing.assert_allclose(tr.states[-1], ref, rtol=1e-9)
    S0, d0 = deviation_system(S, x0)
    tr = simulate(S0, SimScenario(np.zeros(4), t_end=0.05, dt=1e-6, x0=d0))
    ref = exact_affine(S0.A, np.zeros(S0.dim), d0, 0.05)
    np.testing.assert_allclose(tr.states[-1], ref, rtol=0, atol=1e-9 * np.max(np.abs(d0)))


def rk4_endpoint_error(S, x0, t_end, dt):
    tr = simulate(S, SimScenario(np.zeros(S.n), t_end=t_end, dt=dt, x0=x0))
    return np.max(np.abs(tr.states[-1] - exact_affine(S.A, np.zeros(S.dim), x0, t_end)))


def test_rk4_fourth_order(reference_specs):
    _, S = slow_ring("avg1", reference_specs)
    S0, d0 = deviation_system(S.with_injection(POST_STEP), S.initial_state(np.full(4, 100e3)))
    # fastest mode about 180 /s: lambda dt = 0.36 keeps both runs in the asymptotic range
    e1 = rk4_endpoint_error(S0, d0, 0.2, 0.002)
    e2 = rk4_endpoint_error(S0, d0, 0.2, 0.001)
    assert 12 <= e1 / e2 <= 20


def test_constant_delay_against_method_of_steps():
    # x' = -a x(t - tau), x = 1 on [-tau, 0]:
    # x = 1 - a t on [0, tau], then 1 - a t + a^2 (t - tau)^2 / 2 on [tau, 2 tau],
    # then minus a^3 (t - 2 tau)^3 / 6 on [2 tau, 3 tau]; RK4 is exact on these pieces.
    a, tau, dt = 0.7, 0.5, 0.01
    m = round(tau / dt)
    n_steps = 3 * m
    rec = np.empty((n_steps + 1, 1))
    tail = np.empty((1, 1))
    status = rk4_delay(
        np.zeros((1, 1)), np.full((1, 1), -a), np.zeros((1, 1)), np.array([n_steps + 1]), np.ones(1),
        n_steps, m, dt, 1, rec, n_steps, tail, 1e12,
    )
    assert status == -1
    t = np.arange(n_steps + 1) * dt
    exact = 1 - a * t + a**2 * np.clip(t - tau, 0, None) ** 2 / 2 - a**3 * np.clip(t - 2 * tau, 0, None) ** 3 / 6
    np.testing.assert_allclose(rec[:, 0], exact, atol=1e-13)


def test_delay_free_and_delayed_paths_identical_without_remote_terms(ring, reference_specs):
    for name in ("vdm", "avg1"):
        S = assemble_closed_loop(ring, reference_specs[name])
        if S.A_remote is not None:
            S = dataclasses.replace(S, A_remote=np.zeros_like(S.A))
        kw = dict(t_end=0.02, dt=1e-5, events=[(0.004, POST_STEP)])
        a = simulate(S, SimScenario(PRE_STEP, tau=0.0, **kw))
        b = simulate(S, SimScenario(PRE_STEP, tau=0.005, **kw))
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.u, b.u)


def test_delay_changes_distributed_response(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["avg1"])
    kw = dict(t_end=0.02, dt=1e-5, events=[(0.002, POST_STEP)])
    a = simulate(S, SimScenario(PRE_STEP, tau=0.0, **kw))
    b = simulate(S, SimScenario(PRE_STEP, tau=0.005, **kw))
    assert not np.array_equal(a.states, b.states)


@settings(max_examples=15)
@given(connected_grids(n_min=2, n_max=5), st.sampled_from(["vdm", "avg1", "avg2", "avg3"]), st.integers(0, 2**32 - 1))
def test_superposition(g, variant, seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, g, variant)
    S = assemble_closed_loop(g, spec)
    I1, I2 = rng.uniform(-500, 500, (2, g.n))
    x1, x2 = rng.normal(0, 100, (2, S.dim))
    # strip the nominal-voltage term so that b is linear in the injections alone
    S0 = dataclasses.replace(S, b0=np.zeros(S.dim))
    dt = 0.2 / np.max(np.abs(scipy.linalg.eigvals(S.A)))
    dt = 10.0 ** np.floor(np.log10(dt))
    run = lambda I, x: simulate(S0.with_injection(I), SimScenario(I, t_end=200 * dt, dt=dt, x0=x)).states
    lhs = run(I1 + I2, x1 + x2)
    rhs = run(I1, x1) + run(I2, x2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * np.max(np.abs(lhs)))


def test_delayed_voltage_sum_destabilizes_controller_two(ring, reference_specs):
    # mean-voltage loop s' = -5 s - 15 s(t - tau) oscillates with growing amplitude for tau = 0.5
    S = assemble_closed_loop(ring, reference_specs["avg2"], delay_voltage_sum=True)
    sc = SimScenario(PRE_STEP, t_end=60.0, dt=1e-5, tau=0.5, events=[(1.0, POST_STEP)])
    with pytest.raises(SimulationDiverged) as exc:
        simulate(S, sc, stride=100000)
    assert exc.value.time > 1.0


def test_scenario_validation():
    I = np.zeros(2)
    with pytest.raises(ValueError, match="tau"):
        SimScenario(I, t_end=1.0, dt=1e-3, tau=0.00015)
    with pytest.raises(ValueError, match="increasing"):
        SimScenario(I, t_end=1.0, dt=1e-3, events=[(0.5, I), (0.2, I)])
    with pytest.raises(ValueError, match="within"):
        SimScenario(I, t_end=1.0, dt=1e-3, events=[(2.0, I)])
    with pytest.raises(ValueError, match="event time"):
        SimScenario(I, t_end=1.0, dt=1e-3, events=[(0.00025, I)])


def test_divergence_reports_first_bad_step():
    g = GridTopology([1.0, 1.0], [1.0, 1.0], [(0, 1, 1.0)])
    S = assemble_closed_loop(g, ControllerSpec.vdm([1.0, 1.0]))
    S = dataclasses.replace(S, A=-S.A)  # eigenvalues 1 and 3
    with pytest.raises(SimulationDiverged) as exc:
        simulate(S, SimScenario(np.zeros(2), t_end=50.0, dt=1e-2, x0=np.array([1.0, 0.0])))
    k = exc.value.index
    assert 0 < k < 5000
    assert exc.value.time == pytest.approx(k * 1e-2)


def test_two_bus_droop_equilibrium_closed_form():
    g = GridTopology([1.0, 1.0], [1.0, 1.0], [(0, 1, 1.0)])
    S = assemble_closed_loop(g, ControllerSpec.vdm([1.0, 1.0]), [1.0, -1.0])
    # (L + I) V = V_nom + I_inj = [2, 0];  inverse of [[2, -1], [-1, 2]] is [[2, 1], [1, 2]] / 3
    np.testing.assert_allclose(solve_equilibrium(S), [4 / 3, 2 / 3], rtol=1e-15)


def test_avg1_equilibrium_restores_bus_one(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["avg1"], POST_STEP)
    V = S.split_state(solve_equilibrium(S))["V"]
    assert abs(V[0] - 100e3) < 1e-9 * 100e3


def test_avg3_equilibrium_zero_offset_sum(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["avg3"], POST_STEP)
    x = solve_equilibrium(S)
    V = S.split_state(x)["V"]
    assert abs(np.sum(V - 100e3)) < 1e-6
    assert np.linalg.norm(S.A @ x + S.b) <= 1e-8 * np.linalg.norm(S.b)
    assert abs(np.mean(S.split_state(x)["Vbar"])) < 1e-9


def test_avg3_equilibrium_anchor_keeps_conserved_quantity(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["avg3"], POST_STEP)
    anchor = S.initial_state(ring.V_nom + 37.0)
    x = solve_equilibrium(S, anchor=anchor)
    # the sum of Vhat is invariant under the consensus dynamics (left null vector [0, 1, 0])
    hat = S.block("Vhat")
    assert np.sum(x[hat]) == pytest.approx(np.sum(anchor[hat]), rel=1e-12)
    # the zero mode does not change voltages or injections
    x0 = solve_equilibrium(S)
    np.testing.assert_allclose(S.output(x), S.output(x0), rtol=1e-9)


def test_equilibrium_rejects_singular(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["avg1"], POST_STEP)
    with pytest.raises(EquilibriumError):
        solve_equilibrium(dataclasses.replace(S, A=np.zeros_like(S.A)))


def test_csv_layout(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["avg3"])
    tr = simulate(S, SimScenario(PRE_STEP, t_end=1e-4, dt=1e-5), stride=5)
    buf = io.StringIO()
    text = tr.to_csv(buf)
    assert buf.getvalue() == text
    lines = text.splitlines()
    header = lines[0].split(",")
    assert header[:9] == ["t", "V_1", "V_2", "V_3", "V_4", "u_1", "u_2", "u_3", "u_4"]
    assert header[9:] == [f"Vhat_{i}" for i in range(1, 5)] + [f"Vbar_{i}" for i in range(1, 5)]
    assert len(lines) == 1 + 3
    first = lines[1].split(",")
    assert first[0] == "0.00000000e+00"
    assert all(len(f.split("e")[0].replace("-", "").replace(".", "")) == 9 for f in first)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["vdm", "avg1", "avg2", "avg3"]))
def test_long_run_reaches_equilibrium(seed, variant):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, n=int(rng.integers(3, 6)))
    g = GridTopology(g.C * 1e3, g.V_nom, g.lines)  # slow the bus dynamics
    spec = random_spec(rng, g, variant)
    I = rng.uniform(-500, 500, g.n)
    S = assemble_closed_loop(g, spec, I)
    lam = scipy.linalg.eigvals(S.mass[:, None] * S.A, np.diag(S.mass))
    if S.structural_zero is not None:
        lam = np.delete(lam, np.argmin(np.abs(lam)))
    fast, slow = np.max(np.abs(lam)), -np.max(lam.real)
    dt = 1.0 / fast
    if slow <= 0 or slow * dt * 20000 < 30:
        return  # stiffness too high for a short run; covered by the matrix-exponential test
    x0 = S.initial_state(g.V_nom)
    tr = simulate(S, SimScenario(I, t_end=20000 * dt, dt=dt, x0=x0))
    x_eq = solve_equilibrium(S, anchor=x0)
    np.testing.assert_allclose(tr.states[-1], x_eq, rtol=0, atol=1e-6 * np.max(np.abs(x_eq)))

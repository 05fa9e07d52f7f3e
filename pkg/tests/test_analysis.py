import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtdc.analysis import (
    CERTIFIED,
    HURWITZ,
    HURWITZ_EXCL_ZERO,
    INAPPLICABLE,
    INCONCLUSIVE,
    UNSTABLE,
    StructuralZeroMissing,
    certify,
    certify_avg_I_II,
    certify_avg_III,
    droop_asymptotics,
    hurwitz_verdict,
    stability_report,
    voltage_difference_bound,
)
from mtdc.controllers import ControllerSpec, assemble_closed_loop, optimal_dispatch
from mtdc.ensembles import random_spec
from mtdc.grid import CommGraph, GridTopology, build_conductance_laplacian
from mtdc.sim import solve_equilibrium
from tests.conftest import POST_STEP, PRE_STEP
from tests.strategies import connected_grids

LAM_MAX = 4 / 3.7  # largest line-Laplacian eigenvalue of the four-bus ring


def test_vdm_reference_is_hurwitz(ring, reference_specs):
    rep = hurwitz_verdict(assemble_closed_loop(ring, reference_specs["vdm"]))
    assert rep.spectrum_verdict == HURWITZ
    # eigenvalues of -E (L + kI) with uniform C: -(lambda_L + k) / C
    expected = -(np.array([0, 2, 2, 4]) / 3.7 + 10.0) / 57e-6
    np.testing.assert_allclose(np.sort(rep.eigenvalues.real), np.sort(expected), rtol=1e-12)
    assert rep.margin == pytest.approx(-10.0 / 57e-6, rel=1e-12)


@given(connected_grids(), st.integers(0, 2**32 - 1))
def test_vdm_is_hurwitz_for_any_positive_gain(g, seed):
    spec = random_spec(np.random.default_rng(seed), g, "vdm")
    rep = stability_report(g, assemble_closed_loop(g, spec))
    assert rep.spectrum_verdict == HURWITZ
    assert rep.certificate_verdict == CERTIFIED


def test_avg3_reference_spectrum(ring, reference_specs):
    rep = hurwitz_verdict(assemble_closed_loop(ring, reference_specs["avg3"]))
    assert rep.spectrum_verdict == HURWITZ_EXCL_ZERO
    assert len(rep.eigenvalues) == 12
    assert rep.margin < 0


def test_double_zero_eigenvalue_is_rejected():
    g = GridTopology([1.0, 1.0], [1.0, 1.0], [(0, 1, 1.0)])
    S = assemble_closed_loop(g, ControllerSpec.vdm([1.0, 1.0]))
    S = dataclasses.replace(S, A=np.array([[0.0, 1.0], [0.0, 0.0]]), mass=None)
    rep = hurwitz_verdict(S)
    assert rep.spectrum_verdict == UNSTABLE
    assert rep.margin == 0.0


def test_missing_structural_zero_raises(ring, reference_specs):
    S = assemble_closed_loop(ring, reference_specs["avg3"])
    S = dataclasses.replace(S, A=S.A - 0.1 * np.eye(S.dim))
    with pytest.raises(StructuralZeroMissing):
        hurwitz_verdict(S)


@pytest.mark.parametrize("variant", ["vdm", "avg1", "avg2", "avg3"])
def test_spectrum_verdict_invariant_under_state_permutation(ring, reference_specs, variant):
    S = assemble_closed_loop(ring, reference_specs[variant])
    perm = np.random.default_rng(7).permutation(S.dim)
    P = np.eye(S.dim)[perm]
    Sp = dataclasses.replace(
        S,
        A=P @ S.A @ P.T,
        mass=S.mass[perm],
        structural_zero=None if S.structural_zero is None else S.structural_zero[perm],
    )
    r0, r1 = hurwitz_verdict(S), hurwitz_verdict(Sp)
    assert r0.spectrum_verdict == r1.spectrum_verdict
    assert r1.margin == pytest.approx(r0.margin, rel=1e-9)


def test_uniform_gain_mirror_comm_certificate(ring, reference_specs):
    rep = certify_avg_I_II(ring, reference_specs["avg1"])
    vals = {c.id: c for c in rep.certificate_values}
    # with K = 10 I, uniform C and L_c = L_R both minimum eigenvalues reduce to lambda_min(L) = 0
    assert vals["gain_damping"].value == pytest.approx(1.0, abs=1e-12)
    assert vals["laplacian_product"].value == pytest.approx(0.0, abs=1e-12)
    assert vals["gain_damping"].passed and vals["laplacian_product"].passed
    assert rep.certificate_verdict == CERTIFIED
    assert rep.corollary_identical_topology is True


def test_certificate_ignores_integral_gain(ring):
    cg = CommGraph.mirror(ring)
    a = certify_avg_I_II(ring, ControllerSpec.avg1(10.0, 0.1, 20.0, cg))
    b = certify_avg_I_II(ring, ControllerSpec.avg1(10.0, 1e4, 20.0, cg))
    assert [c.value for c in a.certificate_values] == [c.value for c in b.certificate_values]


@given(connected_grids(n_min=3), st.integers(0, 2**32 - 1))
def test_identical_topology_passes_laplacian_condition(g, seed):
    rng = np.random.default_rng(seed)
    K_P = np.exp(rng.uniform(np.log(0.1), np.log(100), g.n))
    spec = ControllerSpec.avg1(K_P, 1.0, float(rng.uniform(0.1, 50)), CommGraph.mirror(g))
    rep = certify_avg_I_II(g, spec)
    cond = {c.id: c for c in rep.certificate_values}["laplacian_product"]
    assert cond.passed
    assert rep.corollary_identical_topology


def test_mismatched_path_weights_are_inconclusive():
    # search path-graph weights until the symmetrized product is indefinite
    rng = np.random.default_rng(3)
    for _ in range(1000):
        R = rng.uniform(0.5, 10, 3)
        c = rng.uniform(0.1, 10, 3)
        K_P = np.exp(rng.uniform(np.log(0.1), np.log(100), 4))
        g = GridTopology(np.full(4, 50e-6), np.full(4, 1e5), [(k, k + 1, R[k]) for k in range(3)])
        comm = CommGraph(4, [(k, k + 1, c[k]) for k in range(3)])
        L_R, L_c, Ki = g.laplacian(), comm.laplacian(), np.diag(1 / K_P)
        if np.linalg.eigvalsh(L_c @ Ki @ L_R + L_R @ Ki @ L_c)[0] < -1e-3:
            break
    else:
        pytest.fail("no indefinite instance found")
    rep = certify_avg_I_II(g, ControllerSpec.avg1(K_P, 1.0, 1.0, comm))
    cond = {c.id: c for c in rep.certificate_values}["laplacian_product"]
    assert not cond.passed and cond.value < 0
    assert rep.certificate_verdict == INCONCLUSIVE
    assert rep.corollary_identical_topology is False


@given(connected_grids(n_min=3), st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_laplacian_condition_scale_consistent(g, seed, alpha):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, g, "avg1")
    gs = GridTopology(g.C, g.V_nom, [(l.i, l.j, l.R / alpha) for l in g.lines])
    comm_s = CommGraph(g.n, [(i, j, c * alpha) for i, j, c in spec.comm.edges])
    spec_s = ControllerSpec.avg1(spec.K_P, spec.K_V[spec.voltage_bus], spec.gamma, comm_s, spec.voltage_bus)
    c0 = {c.id: c for c in certify_avg_I_II(g, spec).certificate_values}["laplacian_product"]
    c1 = {c.id: c for c in certify_avg_I_II(gs, spec_s).certificate_values}["laplacian_product"]
    assert c0.passed == c1.passed
    assert c1.value == pytest.approx(alpha**2 * c0.value, rel=1e-6, abs=1e-9 * alpha**2 * max(abs(c0.value), 1.0))


def test_avg3_reference_certificate(ring, reference_specs):
    rep = certify_avg_III(ring, reference_specs["avg3"])
    vals = {c.id: c for c in rep.certificate_values}
    # uniform C: lambda_min(L C + C L) = 2 C lambda_min(L) = 0, so the first two reduce to 1 and min K_V
    assert vals["first_order_damping"].value == pytest.approx(1.0, abs=1e-12)
    assert vals["integral_coupling"].value == pytest.approx(2.5, abs=1e-12)
    assert vals["cross_term"].value == pytest.approx(LAM_MAX**3 * 3 * 2 / 0.5**2, rel=1e-12)
    assert vals["cross_term"].value == pytest.approx(30.32396897, rel=1e-9)
    assert vals["cross_term"].rhs == pytest.approx(2.5, rel=1e-12)
    assert vals["first_order_damping"].passed and vals["integral_coupling"].passed
    assert not vals["cross_term"].passed
    assert rep.certificate_verdict == INCONCLUSIVE


def test_avg3_small_consensus_gains_certify(ring):
    spec = ControllerSpec.avg3(0.5, 2.5, 0.03, 0.02, CommGraph.mirror(ring))
    rep = certify_avg_III(ring, spec)
    cross = {c.id: c for c in rep.certificate_values}["cross_term"]
    assert cross.value == pytest.approx(LAM_MAX**3 * 0.03 * 0.02 / 0.25, rel=1e-12)
    assert rep.certificate_verdict == CERTIFIED


def test_avg3_preconditions(ring):
    cg = CommGraph.mirror(ring)
    spec = ControllerSpec.avg3([0.5, 0.5, 0.5, 0.6], 2.5, 3.0, 2.0, cg)
    assert certify_avg_III(ring, spec).certificate_verdict == INAPPLICABLE
    spec = ControllerSpec.avg3(0.5, 2.5, 3.0, 2.0, CommGraph.complete(4))
    rep = certify_avg_III(ring, spec)
    assert rep.certificate_verdict == INAPPLICABLE
    assert rep.notes


def test_ring_bound_at_optimum(ring):
    u_star = optimal_dispatch(POST_STEP, np.ones(4)).u_star
    I_tot = POST_STEP + u_star
    np.testing.assert_allclose(I_tot, [350, 250, -250, -350])
    assert voltage_difference_bound(ring, I_tot) == pytest.approx(2 * 350 * 4.625, rel=1e-13)
    assert voltage_difference_bound(ring, I_tot) == pytest.approx(3237.5, rel=1e-13)
    assert voltage_difference_bound(ring, np.zeros(4)) == 0.0


@given(connected_grids(n_min=2), st.sampled_from(["vdm", "avg1", "avg2", "avg3"]), st.integers(0, 2**32 - 1))
def test_bound_holds_at_every_equilibrium(g, variant, seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, g, variant)
    I = rng.uniform(-500, 500, g.n)
    S = assemble_closed_loop(g, spec, I)
    x = solve_equilibrium(S)
    V, u = S.split_state(x)["V"], S.output(x)
    assert np.ptp(V) <= voltage_difference_bound(g, I + u) * (1 + 1e-9) + 1e-9


def test_droop_large_gain_limit(ring):
    (row,) = droop_asymptotics(ring, POST_STEP, [1e6])
    assert row.V_error_inf < 1e-3
    assert row.balance_error_inf < 1e-3  # u close to -I_inj


def test_droop_small_gain_limit(ring):
    (row,) = droop_asymptotics(ring, POST_STEP, [1e-6])
    assert row.u_error_inf < 1e-3
    assert row.V_error_inf > 1e7


def test_droop_balanced_injections(ring):
    rows = droop_asymptotics(ring, PRE_STEP, [1e-6, 1e-2, 1, 1e2, 1e6])
    for r in rows:
        assert np.isfinite(r.V_error_inf)
        # u* = 0 here; voltages stay within the spread of the zero-gain power flow
        assert r.V_error_inf < 1e3
    with pytest.raises(ValueError):
        droop_asymptotics(ring, PRE_STEP, [0.0])


def test_report_serialization(ring, reference_specs):
    rep = stability_report(ring, assemble_closed_loop(ring, reference_specs["avg3"]))
    d = json.loads(rep.to_json())
    assert set(d) == {
        "certificate_values", "certificate_verdict", "spectrum_verdict", "eigenvalues", "margin",
        "corollary_identical_topology", "notes",
    }
    assert d["certificate_verdict"] == INCONCLUSIVE
    assert d["spectrum_verdict"] == HURWITZ_EXCL_ZERO
    assert len(d["eigenvalues"]) == 12
    assert all(set(c) >= {"id", "value", "relation", "threshold", "passed"} for c in d["certificate_values"])
    text = rep.to_text()
    assert "cross_term" in text and "FAIL" in text


def test_certified_requires_every_condition(ring, reference_specs):
    for name in ("vdm", "avg1", "avg2", "avg3"):
        rep = certify(ring, reference_specs[name])
        if rep.certificate_verdict == CERTIFIED:
            assert all(c.passed for c in rep.certificate_values)

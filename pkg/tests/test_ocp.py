"""OCP container, LQ builder, open-loop evaluation, and self-validation."""

import dataclasses

import numpy as np
import pytest

from qmpc.errors import DimensionError, DivergenceError
from qmpc.ocp import (
    OCPSpec,
    ParameterVector,
    build_lq_ocp,
    eval_open_loop,
    lq_matrices,
    validate_spec,
)
from qmpc.solver import mpc_qvalue, solve_ocp
from tests.conftest import A2, B2, GAMMA, Q2, R2


# ---------------------------------------------------------------------------
# ParameterVector


def test_segments_round_trip():
    pv = ParameterVector.from_segments(
        {"A": np.array([[1.0, 2.0], [3.0, 4.0]]), "b": np.array([5.0])}
    )
    assert pv.size == 5
    assert pv.layout == {"A": (0, 4), "b": (4, 5)}
    np.testing.assert_array_equal(pv.segment("A"), [1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(pv.segment("b"), [5.0])


def test_segment_returns_copy():
    pv = ParameterVector.from_segments({"a": np.array([1.0, 2.0])})
    pv.segment("a")[0] = 99.0
    assert pv.phi[0] == 1.0


def test_replace_is_functional():
    pv = ParameterVector.from_segments({"a": np.array([1.0]), "b": np.array([2.0, 3.0])})
    pv2 = pv.replace("b", np.array([[7.0, 8.0]]))
    np.testing.assert_array_equal(pv2.phi, [1.0, 7.0, 8.0])
    np.testing.assert_array_equal(pv.phi, [1.0, 2.0, 3.0])  # original untouched


def test_replace_wrong_size():
    pv = ParameterVector.from_segments({"a": np.array([1.0, 2.0])})
    with pytest.raises(DimensionError, match="segment 'a'"):
        pv.replace("a", np.zeros(3))


def test_layout_must_partition():
    with pytest.raises(ValueError, match="breaks the layout partition"):
        ParameterVector(phi=np.zeros(3), layout={"a": (0, 1), "b": (2, 3)})
    with pytest.raises(ValueError, match="layout covers"):
        ParameterVector(phi=np.zeros(3), layout={"a": (0, 2)})


def test_non_finite_entries_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        ParameterVector(phi=np.array([1.0, np.nan]), layout={"a": (0, 2)})


def test_phi_must_be_flat():
    with pytest.raises(DimensionError):
        ParameterVector(phi=np.zeros((2, 2)), layout={"a": (0, 4)})


# ---------------------------------------------------------------------------
# OCPSpec validation


def test_spec_rejects_bad_scalars(lq2_ocp):
    spec, _ = lq2_ocp
    with pytest.raises(ValueError, match="horizon"):
        dataclasses.replace(spec, H=0)
    with pytest.raises(ValueError, match="gamma"):
        dataclasses.replace(spec, gamma=1.0)
    with pytest.raises(ValueError, match="n_eq"):
        dataclasses.replace(spec, n_eq=2)
    with pytest.raises(DimensionError, match="u_init"):
        dataclasses.replace(spec, u_init=np.zeros(3))


def test_stage_weights():
    spec, _ = build_lq_ocp(A2, B2, Q2, R2, Q2, H=4, gamma=0.5)
    w, wH = spec.stage_weights()
    np.testing.assert_allclose(w, [1.0, 0.5, 0.25, 0.125])
    assert wH == 0.0625
    flat, flat_H = dataclasses.replace(spec, discount_in_horizon=False).stage_weights()
    np.testing.assert_array_equal(flat, np.ones(4))
    assert flat_H == 1.0


def test_builder_shape_checks():
    with pytest.raises(DimensionError, match="Qc"):
        build_lq_ocp(A2, B2, np.eye(3), R2, Q2, H=2, gamma=0.9)
    with pytest.raises(ValueError, match="positive definite"):
        build_lq_ocp(A2, B2, Q2, [[0.0]], Q2, H=2, gamma=0.9)
    with pytest.raises(ValueError, match="both input bounds"):
        build_lq_ocp(A2, B2, Q2, R2, Q2, H=2, gamma=0.9, u_lo=[-1.0])
    with pytest.raises(ValueError, match="input box is empty"):
        build_lq_ocp(A2, B2, Q2, R2, Q2, H=2, gamma=0.9, u_lo=[1.0], u_hi=[-1.0])


def test_lq_matrices_unpacks_layout(lq2_ocp):
    _, phi = lq2_ocp
    A, B, Q, R, P = lq_matrices(phi, 2, 1)
    np.testing.assert_array_equal(A, A2)
    np.testing.assert_array_equal(B, B2)
    np.testing.assert_array_equal(Q, Q2)
    np.testing.assert_array_equal(R, R2)


# ---------------------------------------------------------------------------
# pinned-input structure


def test_pinned_qvalue_decomposes_when_input_is_inert():
    # B = 0: the action buys nothing, so Q(s, a) = s'Qs + a'Ra + gamma (As)'P(As)
    A = np.array([[0.7]])
    B = np.array([[0.0]])
    Qc = np.array([[2.0]])
    Rc = np.array([[3.0]])
    P = np.array([[5.0]])
    spec, phi = build_lq_ocp(A, B, Qc, Rc, P, H=1, gamma=0.9)
    s, a = np.array([1.3]), np.array([-0.4])
    q, _ = mpc_qvalue(spec, phi, s, a)
    x1 = A @ s
    expected = float(s @ Qc @ s + a @ Rc @ a + 0.9 * x1 @ P @ x1)
    assert q == pytest.approx(expected, abs=1e-10)


# ---------------------------------------------------------------------------
# open-loop evaluation


def test_open_loop_zero_everything(lq2_ocp):
    spec, phi = lq2_ocp
    plan = eval_open_loop(spec, phi, np.zeros(2), np.zeros((spec.H, 1)))
    assert plan.cost == 0.0
    np.testing.assert_array_equal(plan.x_seq, np.zeros((spec.H + 1, 2)))
    assert plan.g_vals is None and plan.h_vals is None


def test_open_loop_prices_solver_plan(lq2_ocp):
    spec, phi = lq2_ocp
    s = np.array([0.7, -1.2])
    kkt, report = solve_ocp(spec, phi, s)
    assert report.status == "converged"
    u_seq = kkt.z[spec.H * spec.n:].reshape(spec.H, spec.m)
    plan = eval_open_loop(spec, phi, s, u_seq)
    assert plan.cost == pytest.approx(kkt.objective, abs=1e-8)
    np.testing.assert_allclose(
        plan.x_seq[1:].ravel(), kkt.z[: spec.H * spec.n], atol=1e-8
    )


def test_open_loop_reports_bound_rows():
    spec, phi = build_lq_ocp(A2, B2, Q2, R2, Q2, H=3, gamma=GAMMA,
                             u_lo=[-1.0], u_hi=[1.0])
    u_seq = np.array([[2.0], [0.0], [-0.5]])
    plan = eval_open_loop(spec, phi, np.zeros(2), u_seq)
    assert plan.h_vals.shape == (3, 2)
    # rows are [u - hi, lo - u]; the first input violates the upper bound by 1
    np.testing.assert_allclose(plan.h_vals[0], [1.0, -3.0])
    np.testing.assert_allclose(plan.h_vals[2], [-1.5, -0.5])


def test_open_loop_does_not_mutate_inputs(lq2_ocp):
    spec, phi = lq2_ocp
    before = phi.phi.copy()
    x0 = np.array([0.1, 0.2])
    eval_open_loop(spec, phi, x0, np.ones((spec.H, 1)))
    np.testing.assert_array_equal(phi.phi, before)
    np.testing.assert_array_equal(x0, [0.1, 0.2])


def test_open_loop_shape_check(lq2_ocp):
    spec, phi = lq2_ocp
    with pytest.raises(DimensionError, match="x0 shape"):
        eval_open_loop(spec, phi, np.zeros(3), np.zeros((spec.H, 1)))


def test_open_loop_flags_divergence():
    spec, phi = build_lq_ocp([[2.0]], [[1.0]], [[1.0]], [[1.0]], [[1.0]],
                             H=3, gamma=0.9)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as exc:
            eval_open_loop(spec, phi, np.array([1e308]), np.zeros((3, 1)))
    assert exc.value.step == 0


# ---------------------------------------------------------------------------
# horizon behaviour


def test_value_approaches_infinite_horizon_as_h_grows(lq2):
    A, B, Qc, Rc, gamma, P, K = lq2
    s = np.array([1.0, -0.5])
    v_inf = float(s @ P @ s)
    gaps = []
    for H in (5, 20, 50):
        spec, phi = build_lq_ocp(A, B, Qc, Rc, np.zeros((2, 2)), H, gamma)
        kkt, _ = solve_ocp(spec, phi, s)
        gaps.append(v_inf - kkt.objective)
    assert all(g > 0 for g in gaps)  # truncation underestimates the cost
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-3


def test_undiscounted_value_matches_backward_recursion(lq2):
    A, B, Qc, Rc, _, _, _ = lq2
    P_term = np.eye(2)
    spec, phi = build_lq_ocp(A, B, Qc, Rc, P_term, H=3, gamma=0.9,
                             discount_in_horizon=False)
    P = P_term.copy()
    for _ in range(3):
        S = Rc + B.T @ P @ B
        P = Qc + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)
    s = np.array([0.4, 1.1])
    kkt, _ = solve_ocp(spec, phi, s)
    assert kkt.objective == pytest.approx(float(s @ P @ s), abs=1e-8)


# ---------------------------------------------------------------------------
# derivative validation


def test_validate_clean_spec(lq2_ocp):
    spec, phi = lq2_ocp
    assert validate_spec(spec, phi) == []


def test_validate_flags_wrong_gradient(lq2_ocp):
    spec, phi = lq2_ocp
    orig = spec.stage_grad

    def skewed(x, u, pv):
        lx, lu = orig(x, u, pv)
        return 1.01 * lx, lu

    findings = validate_spec(dataclasses.replace(spec, stage_grad=skewed), phi)
    assert any(f.startswith("stage_grad[x]:") for f in findings)
    assert all("stage_grad[u]" not in f for f in findings)


def test_validate_flags_wrong_shape(lq2_ocp):
    spec, phi = lq2_ocp
    bad = dataclasses.replace(spec, terminal_grad=lambda x, pv: np.zeros(3))
    findings = validate_spec(bad, phi)
    assert any(f.startswith("terminal_grad:") and "shape" in f for f in findings)

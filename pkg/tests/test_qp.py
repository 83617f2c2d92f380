"""Active-set QP core: frozen examples, KKT certificates, random cross-checks."""

import numpy as np
import pytest
import scipy.optimize

from qmpc.qp import qp_solve


def kkt_certificate(sol, H, g, Aeq=None, beq=None, Aineq=None, bineq=None, tol=1e-8):
    """Assert stationarity, feasibility, dual signs, and complementarity."""
    x = sol.primal
    grad = H @ x + g
    if Aeq is not None:
        grad = grad + Aeq.T @ sol.dual_eq
        assert np.max(np.abs(Aeq @ x - beq)) <= tol
    if Aineq is not None:
        grad = grad + Aineq.T @ sol.dual_ineq
        slack = bineq - Aineq @ x
        assert np.min(slack) >= -tol
        assert np.min(sol.dual_ineq) >= -tol
        assert np.max(np.abs(sol.dual_ineq * slack)) <= 1e-6
    assert np.max(np.abs(grad)) <= 1e-6


# ---------------------------------------------------------------------------
# frozen examples


def test_unconstrained_stationarity():
    sol = qp_solve(np.eye(2), np.array([-1.0, -2.0]), None, None, None, None)
    assert sol.status == "converged"
    assert np.allclose(sol.primal, [1.0, 2.0], atol=1e-10)
    assert sol.active_set.size == 0


def test_equality_projection():
    Aeq = np.array([[1.0, 1.0]])
    sol = qp_solve(np.eye(2), np.zeros(2), Aeq, np.array([1.0]), None, None)
    assert sol.status == "converged"
    assert np.allclose(sol.primal, [0.5, 0.5], atol=1e-10)
    assert np.allclose(sol.dual_eq, [-0.5], atol=1e-10)


def test_scalar_clamped_inequality():
    sol = qp_solve(
        np.array([[1.0]]), np.array([-2.0]),
        None, None,
        np.array([[1.0]]), np.array([1.0]),
    )
    assert sol.status == "converged"
    assert np.allclose(sol.primal, [1.0], atol=1e-10)
    assert np.allclose(sol.dual_ineq, [1.0], atol=1e-10)
    assert sol.active_set.tolist() == [0]


# ---------------------------------------------------------------------------
# status channels


def test_infeasible_equalities():
    Aeq = np.array([[1.0, 0.0], [1.0, 0.0]])
    sol = qp_solve(np.eye(2), np.zeros(2), Aeq, np.array([0.0, 1.0]), None, None)
    assert sol.status == "infeasible"


def test_infeasible_inequalities():
    Aineq = np.array([[1.0], [-1.0]])  # x <= -1 and -x <= -2  ->  x >= 2
    sol = qp_solve(np.eye(1), np.zeros(1), None, None, Aineq, np.array([-1.0, -2.0]))
    assert sol.status == "infeasible"


def test_unbounded_below():
    H = np.diag([1.0, 0.0])  # flat direction with linear drift
    sol = qp_solve(H, np.array([0.0, -1.0]), None, None, None, None)
    assert sol.status == "diverged"


def test_unbounded_direction_blocked_by_constraint():
    # same flat direction, but an inequality caps it: solvable again
    H = np.diag([1.0, 0.0])
    sol = qp_solve(H, np.array([0.0, -1.0]), None, None,
                   np.array([[0.0, 1.0]]), np.array([3.0]))
    assert sol.status == "converged"
    assert sol.primal[1] == pytest.approx(3.0, abs=1e-8)


def test_pivot_cap_reports_max_iter():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(6, 4))
    H = M.T @ M + 0.1 * np.eye(4)
    g = rng.normal(size=4)
    Aineq = np.vstack([np.eye(4), -np.eye(4)])
    bineq = np.full(8, 0.05)
    sol = qp_solve(H, g, None, None, Aineq, bineq, max_pivots=1)
    assert sol.status in ("max_iter", "converged")
    full = qp_solve(H, g, None, None, Aineq, bineq)
    assert full.status == "converged"


# ---------------------------------------------------------------------------
# structural edge cases


def test_rank_deficient_consistent_equalities():
    # duplicated row: consistent, solvable
    Aeq = np.array([[1.0, 1.0], [2.0, 2.0]])
    sol = qp_solve(np.eye(2), np.zeros(2), Aeq, np.array([1.0, 2.0]), None, None)
    assert sol.status == "converged"
    assert np.allclose(sol.primal, [0.5, 0.5], atol=1e-8)


def test_zero_inequality_rows_are_pruned():
    Aineq = np.array([[0.0, 0.0], [1.0, 0.0]])
    sol = qp_solve(np.eye(2), np.array([-3.0, 0.0]), None, None, Aineq,
                   np.array([5.0, 1.0]))
    assert sol.status == "converged"
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-8)


def test_warm_start_reuses_active_set():
    H = np.eye(2)
    g = np.array([-3.0, -3.0])
    Aineq = np.vstack([np.eye(2), -np.eye(2)])
    bineq = np.array([1.0, 1.0, 0.0, 0.0])
    cold = qp_solve(H, g, None, None, Aineq, bineq)
    assert cold.status == "converged"
    warm = qp_solve(H, g, None, None, Aineq, bineq, active0=cold.active_set)
    assert warm.status == "converged"
    assert np.allclose(warm.primal, cold.primal, atol=1e-10)
    assert warm.iterations <= cold.iterations


def test_certificate_on_mixed_constraints():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    g = np.array([1.0, -4.0])
    Aeq = np.array([[1.0, -1.0]])
    beq = np.array([0.25])
    Aineq = np.array([[0.0, 1.0], [-1.0, 0.0]])
    bineq = np.array([1.5, 0.0])
    sol = qp_solve(H, g, Aeq, beq, Aineq, bineq)
    assert sol.status == "converged"
    kkt_certificate(sol, H, g, Aeq, beq, Aineq, bineq)


def test_tiny_positive_curvature_is_not_unbounded():
    H = np.diag([4.0, 4.0e-10])
    g = np.array([-1.0, -2.0e-10])
    sol = qp_solve(H, g, None, None, None, None)
    assert sol.status == "converged"
    assert np.allclose(sol.primal, [0.25, 0.5], atol=1e-6)


def test_badly_scaled_curvature_terminates():
    # curvature spread 1e8 across rotated coordinates: KKT steps carry a
    # rounding noise floor, and the solver must recognize it as convergence
    # instead of stepping forever
    rng = np.random.default_rng(9)
    R, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    H = R.T @ np.diag([1.0e4, 1.0, 1.0e-4]) @ R
    x_t = np.array([2.0, -3.0, 1.5])  # unconstrained optimum outside the box
    g = -H @ x_t
    Aineq = np.vstack([np.eye(3), -np.eye(3)])
    bineq = np.full(6, 1.0)
    sol = qp_solve(H, g, None, None, Aineq, bineq)
    assert sol.status == "converged"
    x = sol.primal
    assert np.max(np.abs(x)) <= 1.0 + 1e-8
    grad = H @ x + g + Aineq.T @ sol.dual_ineq
    assert np.max(np.abs(grad)) <= 1e-6 * (1.0 + np.max(np.abs(H @ x)))
    assert np.min(sol.dual_ineq) >= -1e-8


def test_random_qps_match_scipy():
    rng = np.random.default_rng(1)
    for trial in range(20):
        n = int(rng.integers(2, 6))
        M = rng.normal(size=(n + 2, n))
        H = M.T @ M + 0.5 * np.eye(n)
        g = rng.normal(size=n)
        Aineq = np.vstack([np.eye(n), -np.eye(n)])
        bineq = rng.uniform(0.5, 2.0, size=2 * n)
        n_eq = int(rng.integers(0, 2))
        if n_eq:
            Aeq = rng.normal(size=(n_eq, n))
            # anchor the equality plane at an interior box point
            beq = Aeq @ rng.uniform(-0.3, 0.3, size=n)
        else:
            Aeq, beq = None, None

        sol = qp_solve(H, g, Aeq, beq, Aineq, bineq)
        assert sol.status == "converged", f"trial {trial}"
        kkt_certificate(sol, H, g, Aeq, beq, Aineq, bineq)

        cons = [
            {"type": "ineq", "fun": lambda x, A=Aineq, b=bineq: b - A @ x,
             "jac": lambda x, A=Aineq: -A},
        ]
        if Aeq is not None:
            cons.append({"type": "eq", "fun": lambda x, A=Aeq, b=beq: A @ x - b,
                         "jac": lambda x, A=Aeq: A})
        ref = scipy.optimize.minimize(
            lambda x: 0.5 * x @ H @ x + g @ x,
            np.zeros(n),
            jac=lambda x: H @ x + g,
            constraints=cons,
            method="SLSQP",
            options={"ftol": 1e-12, "maxiter": 200},
        )
        assert ref.success, f"trial {trial}: oracle failed"
        assert np.max(np.abs(sol.primal - ref.x)) <= 1e-5, f"trial {trial}"

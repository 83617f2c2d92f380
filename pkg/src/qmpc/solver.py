"""Multiple-shooting SQP solver for parametric OCPs.

The decision vector stacks z = [x_1..x_H, u_0..u_{H-1}]; the initial state is
eliminated (x_0 = s enters the data).  Dynamics become equality constraints
x_{k+1} - f(x_k, u_k, phi) = 0, a pinned first input adds the rows
u_0 - a = 0, and stage inequalities h(x_k, u_k, phi) <= 0 stack over the
horizon.  Each SQP iteration solves an active-set QP on the (regularized)
Lagrangian Hessian and globalizes with a backtracking line search on an l1
merit function.

Solving with a pinned first input prices Q(s, a); the free solve returns the
receding-horizon policy action u*_0 and its plan.  Both values are costs
(smaller is better).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DivergenceError, InfeasibleError, NonConvergenceError
from .ocp import OCPSpec, ParameterVector
from .qp import qp_solve, _null_basis


@dataclass(frozen=True)
class SolverSettings:
    """Numerical knobs; every field can be overridden from the experiment config."""

    kkt_tol: float = 1e-8
    max_sqp_iters: int = 50
    max_qp_pivots: int = 200
    sigma0: float = 1e-8
    armijo_c1: float = 1e-4
    alpha_min: float = 1e-10
    rho_factor: float = 2.0

    @classmethod
    def from_dict(cls, d: dict) -> "SolverSettings":
        base = cls()
        unknown = set(d) - set(base.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown solver settings: {sorted(unknown)}")
        return replace(base, **d)


@dataclass(frozen=True)
class KKTPoint:
    """Primal-dual solution of one OCP solve.

    lam covers dynamics rows, then user equality rows, then pin rows; mu covers
    the stacked stage inequalities (H blocks of n_ineq rows).  active_set
    indexes rows of mu that are tight.
    """

    z: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    active_set: np.ndarray
    objective: float
    kkt_residual: float
    s: np.ndarray
    pinned_a: np.ndarray | None


@dataclass(frozen=True)
class SolveReport:
    status: str  # converged | max_iter | infeasible | diverged
    iterations: int
    kkt_residual: float


class _Stacker:
    """Index bookkeeping for the stacked decision vector and constraint rows."""

    def __init__(self, spec: OCPSpec, pinned: bool):
        self.spec = spec
        self.pinned = pinned
        H, n, m = spec.H, spec.n, spec.m
        self.nz = H * n + H * m
        self.n_dyn = H * n
        self.n_g = H * spec.n_eq
        self.n_pin = m if pinned else 0
        self.n_eq_rows = self.n_dyn + self.n_g + self.n_pin
        self.n_in_rows = H * spec.n_ineq

    def xs(self, k: int) -> slice:
        # valid for k = 1..H
        n = self.spec.n
        return slice((k - 1) * n, k * n)

    def us(self, k: int) -> slice:
        H, n, m = self.spec.H, self.spec.n, self.spec.m
        return slice(H * n + k * m, H * n + (k + 1) * m)

    def states(self, z: np.ndarray, s: np.ndarray) -> list[np.ndarray]:
        return [s] + [z[self.xs(k)] for k in range(1, self.spec.H + 1)]

    def inputs(self, z: np.ndarray) -> list[np.ndarray]:
        return [z[self.us(k)] for k in range(self.spec.H)]


def _eval_objective(st: _Stacker, phi, z, s):
    spec = st.spec
    w, wH = spec.stage_weights()
    xs = st.states(z, s)
    us = st.inputs(z)
    F = sum(w[k] * spec.stage_cost(xs[k], us[k], phi) for k in range(spec.H))
    F += wH * spec.terminal_cost(xs[spec.H], phi)
    grad = np.zeros(st.nz)
    for k in range(spec.H):
        lx, lu = spec.stage_grad(xs[k], us[k], phi)
        if k >= 1:
            grad[st.xs(k)] += w[k] * lx
        grad[st.us(k)] += w[k] * lu
    grad[st.xs(spec.H)] += wH * spec.terminal_grad(xs[spec.H], phi)
    return float(F), grad


def _eval_constraints(st: _Stacker, phi, z, s, pinned_a):
    """Values and Jacobians of all equality and inequality rows at z."""
    spec = st.spec
    xs = st.states(z, s)
    us = st.inputs(z)
    c = np.zeros(st.n_eq_rows)
    C = np.zeros((st.n_eq_rows, st.nz))
    for k in range(spec.H):
        rows = slice(k * spec.n, (k + 1) * spec.n)
        fx, fu = spec.dynamics_jac(xs[k], us[k], phi)
        c[rows] = xs[k + 1] - spec.dynamics(xs[k], us[k], phi)
        C[rows, st.xs(k + 1)] = np.eye(spec.n)
        if k >= 1:
            C[rows, st.xs(k)] = -fx
        C[rows, st.us(k)] = -fu
    if spec.n_eq:
        base = st.n_dyn
        for k in range(spec.H):
            rows = slice(base + k * spec.n_eq, base + (k + 1) * spec.n_eq)
            gx, gu = spec.eq_jac(xs[k], us[k], phi)
            c[rows] = spec.eq_constraints(xs[k], us[k], phi)
            if k >= 1:
                C[rows, st.xs(k)] = gx
            C[rows, st.us(k)] = gu
    if st.n_pin:
        rows = slice(st.n_eq_rows - spec.m, st.n_eq_rows)
        c[rows] = us[0] - pinned_a
        C[rows, st.us(0)] = np.eye(spec.m)

    h = np.zeros(st.n_in_rows)
    Hj = np.zeros((st.n_in_rows, st.nz))
    if spec.n_ineq:
        for k in range(spec.H):
            rows = slice(k * spec.n_ineq, (k + 1) * spec.n_ineq)
            hx, hu = spec.ineq_jac(xs[k], us[k], phi)
            h[rows] = spec.ineq_constraints(xs[k], us[k], phi)
            if k >= 1:
                Hj[rows, st.xs(k)] = hx
            Hj[rows, st.us(k)] = hu
    return c, C, h, Hj


def _lagrangian_hessian(st: _Stacker, phi, z, s, lam):
    """Block Hessian of the Lagrangian; Gauss-Newton when dynamics supply no
    second derivatives (exact for linear models)."""
    spec = st.spec
    w, wH = spec.stage_weights()
    xs = st.states(z, s)
    us = st.inputs(z)
    HL = np.zeros((st.nz, st.nz))
    for k in range(spec.H):
        lxx, lxu, luu = spec.stage_hess(xs[k], us[k], phi)
        if k >= 1:
            HL[st.xs(k), st.xs(k)] += w[k] * lxx
            HL[st.xs(k), st.us(k)] += w[k] * lxu
            HL[st.us(k), st.xs(k)] += w[k] * lxu.T
        HL[st.us(k), st.us(k)] += w[k] * luu
        if spec.dynamics_hess_vp is not None:
            lam_k = lam[k * spec.n : (k + 1) * spec.n]
            # constraint is x_{k+1} - f, so f-curvature enters with a minus
            M = -spec.dynamics_hess_vp(xs[k], us[k], phi, lam_k)
            if k >= 1:
                HL[st.xs(k), st.xs(k)] += M[: spec.n, : spec.n]
                HL[st.xs(k), st.us(k)] += M[: spec.n, spec.n :]
                HL[st.us(k), st.xs(k)] += M[spec.n :, : spec.n]
            HL[st.us(k), st.us(k)] += M[spec.n :, spec.n :]
    HL[st.xs(spec.H), st.xs(spec.H)] += wH * spec.terminal_hess(xs[spec.H], phi)
    return HL


def _regularize(HL, C_eq, sigma0):
    """Smallest sigma (doubling from sigma0) making Z'(HL+sigma I)Z positive
    definite on the equality null space."""
    Z = _null_basis(C_eq, HL.shape[0])
    if Z.shape[1] == 0:
        return HL, 0.0
    sigma = 0.0
    while sigma < 1e10:
        M = Z.T @ (HL + sigma * np.eye(HL.shape[0])) @ Z
        try:
            np.linalg.cholesky(M)
            return HL + sigma * np.eye(HL.shape[0]), sigma
        except np.linalg.LinAlgError:
            sigma = sigma0 if sigma == 0.0 else 2.0 * sigma
    raise DivergenceError("Hessian regularization failed to reach positive definiteness")


def _merit(F, c, h, rho):
    viol = np.sum(np.abs(c)) + np.sum(np.maximum(h, 0.0))
    return F + rho * viol, viol


def _kkt_residual(grad, c, h, C, Hj, lam, mu):
    stat = grad + C.T @ lam + (Hj.T @ mu if mu.size else 0.0)
    parts = [np.max(np.abs(stat)) if stat.size else 0.0]
    parts.append(np.max(np.abs(c)) if c.size else 0.0)
    if h.size:
        parts.append(float(np.max(np.maximum(h, 0.0))))
        parts.append(float(np.max(np.abs(mu * h))))
        parts.append(float(max(0.0, -np.min(mu))))
    return float(max(parts))


def _initial_iterate(st: _Stacker, phi, s, pinned_a):
    """Forward rollout under the spec's cold-start (or pinned) input; zeros on
    blow-up."""
    spec = st.spec
    z = np.zeros(st.nz)
    x = s
    ok = True
    u_hold = np.zeros(spec.m) if spec.u_init is None else np.asarray(spec.u_init, dtype=float)
    for k in range(spec.H):
        u = pinned_a if (k == 0 and pinned_a is not None) else u_hold
        z[st.us(k)] = u
        x = np.asarray(spec.dynamics(x, u, phi), dtype=float)
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e12:
            ok = False
            break
        z[st.xs(k + 1)] = x
    if not ok:
        z = np.zeros(st.nz)
        for k in range(spec.H):
            z[st.us(k)] = u_hold
        if pinned_a is not None:
            z[st.us(0)] = pinned_a
    return z


def solve_ocp(
    spec: OCPSpec,
    phi: ParameterVector,
    s: np.ndarray,
    pinned_a: np.ndarray | None = None,
    warm_start: KKTPoint | None = None,
    settings: SolverSettings | None = None,
) -> tuple[KKTPoint | None, SolveReport]:
    """Solve the OCP from state ``s``; pin the first input to price Q(s, a).

    Returns (kkt, report).  kkt is None when no usable iterate exists
    (infeasible problem or divergence); on status "max_iter" the best iterate
    found is returned together with its residual.
    """
    cfg = settings or SolverSettings()
    s = np.asarray(s, dtype=float)
    if s.shape != (spec.n,):
        raise ValueError(f"s shape {s.shape}, expected ({spec.n},)")
    if pinned_a is not None:
        pinned_a = np.asarray(pinned_a, dtype=float)
        if pinned_a.shape != (spec.m,):
            raise ValueError(f"pinned_a shape {pinned_a.shape}, expected ({spec.m},)")
    st = _Stacker(spec, pinned_a is not None)

    if warm_start is not None and warm_start.z.size == st.nz:
        z = warm_start.z.copy()
        lam = warm_start.lam.copy() if warm_start.lam.size == st.n_eq_rows else np.zeros(st.n_eq_rows)
        mu = warm_start.mu.copy() if warm_start.mu.size == st.n_in_rows else np.zeros(st.n_in_rows)
        active = warm_start.active_set.copy()
    else:
        z = _initial_iterate(st, phi, s, pinned_a)
        lam = np.zeros(st.n_eq_rows)
        mu = np.zeros(st.n_in_rows)
        active = np.zeros(0, dtype=int)

    rho = 1.0
    best = None  # (residual, kkt_point)

    for it in range(cfg.max_sqp_iters + 1):
        if not np.all(np.isfinite(z)):
            return None, SolveReport("diverged", it, np.inf)
        F, grad = _eval_objective(st, phi, z, s)
        c, C, h, Hj = _eval_constraints(st, phi, z, s, pinned_a)
        if not np.isfinite(F):
            return None, SolveReport("diverged", it, np.inf)
        resid = _kkt_residual(grad, c, h, C, Hj, lam, mu)
        point = KKTPoint(
            z=z.copy(),
            lam=lam.copy(),
            mu=mu.copy(),
            active_set=active.copy(),
            objective=F,
            kkt_residual=resid,
            s=s.copy(),
            pinned_a=None if pinned_a is None else pinned_a.copy(),
        )
        if best is None or resid < best[0]:
            best = (resid, point)
        if resid <= cfg.kkt_tol:
            return point, SolveReport("converged", it, resid)
        if it == cfg.max_sqp_iters:
            break

        HL = _lagrangian_hessian(st, phi, z, s, lam)
        HL, _sigma = _regularize(HL, C, cfg.sigma0)
        qp = qp_solve(
            HL,
            grad,
            Aeq=C,
            beq=-c,
            Aineq=Hj if st.n_in_rows else None,
            bineq=-h if st.n_in_rows else None,
            active0=active if active.size else None,
            max_pivots=cfg.max_qp_pivots,
        )
        if qp.status == "infeasible":
            return None, SolveReport("infeasible", it, resid)
        if qp.status in ("diverged", "max_iter"):
            return best[1], SolveReport(qp.status, it, best[0])
        p = qp.primal
        lam_new, mu_new = qp.dual_eq, qp.dual_ineq
        active = qp.active_set

        mult_inf = max(
            np.max(np.abs(lam_new)) if lam_new.size else 0.0,
            np.max(np.abs(mu_new)) if mu_new.size else 0.0,
        )
        rho = max(rho, cfg.rho_factor * mult_inf + 1e-6)
        m0, viol0 = _merit(F, c, h, rho)
        # model slope of the merit function along p
        D = float(grad @ p) - rho * viol0
        # near a solution the predicted decrease drops below what float
        # arithmetic can resolve in the merit value; allow that much slack
        slack = 100.0 * np.finfo(float).eps * (1.0 + abs(m0))
        alpha = 1.0
        while alpha >= cfg.alpha_min:
            z_try = z + alpha * p
            F_try, _ = _eval_objective(st, phi, z_try, s)
            c_try, _, h_try, _ = _eval_constraints(st, phi, z_try, s, pinned_a)
            if np.isfinite(F_try):
                m_try, _ = _merit(F_try, c_try, h_try, rho)
                if m_try <= m0 + cfg.armijo_c1 * alpha * D + slack:
                    break
            alpha *= 0.5
        else:
            # no acceptable step: stall
            return best[1], SolveReport("max_iter", it, best[0])
        z = z + alpha * p
        lam, mu = lam_new, mu_new

    return best[1], SolveReport("max_iter", cfg.max_sqp_iters, best[0])


def _require_converged(kkt, report):
    if report.status == "converged":
        return
    if report.status == "infeasible":
        raise InfeasibleError(f"OCP infeasible after {report.iterations} iterations")
    if report.status == "diverged":
        raise DivergenceError("OCP solve diverged", step=report.iterations)
    raise NonConvergenceError(
        f"OCP solve stalled at residual {report.kkt_residual:.3e}",
        residual=report.kkt_residual,
    )


def mpc_policy(
    spec: OCPSpec,
    phi: ParameterVector,
    s: np.ndarray,
    warm_start: KKTPoint | None = None,
    settings: SolverSettings | None = None,
) -> tuple[np.ndarray, KKTPoint]:
    """First input of the free-horizon solve (the receding-horizon action).

    The returned KKTPoint holds the whole plan and multipliers for warm
    starting and sensitivity analysis.
    """
    kkt, report = solve_ocp(spec, phi, s, None, warm_start, settings)
    _require_converged(kkt, report)
    st = _Stacker(spec, False)
    return kkt.z[st.us(0)].copy(), kkt


def mpc_qvalue(
    spec: OCPSpec,
    phi: ParameterVector,
    s: np.ndarray,
    a: np.ndarray,
    warm_start: KKTPoint | None = None,
    settings: SolverSettings | None = None,
) -> tuple[float, KKTPoint]:
    """Optimal cost with (x_0, u_0) pinned to (s, a) — the Q-value in cost sign."""
    kkt, report = solve_ocp(spec, phi, s, a, warm_start, settings)
    _require_converged(kkt, report)
    return kkt.objective, kkt


class MPCController:
    """Stateful closed-loop wrapper around mpc_policy with warm starting.

    Suitable as the ``policy`` argument of :func:`qmpc.mdp.rollout`.  The
    parameter vector is a plain attribute; swap it to control with updated
    parameters.
    """

    def __init__(self, spec: OCPSpec, phi: ParameterVector, settings: SolverSettings | None = None):
        self.spec = spec
        self.phi = phi
        self.settings = settings
        self._warm: KKTPoint | None = None

    def reset(self):
        self._warm = None

    def __call__(self, s: np.ndarray) -> np.ndarray:
        a, kkt = mpc_policy(self.spec, self.phi, s, self._warm, self.settings)
        self._warm = kkt
        return a

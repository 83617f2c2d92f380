"""Parametric finite-horizon optimal-control problems.

An :class:`OCPSpec` bundles the horizon, dimensions, and callbacks for stage
cost, terminal cost, dynamics, and constraints, each carrying its derivatives.
All callbacks take a :class:`ParameterVector` so the same spec can be re-solved
as parameters are learned.  The canonical problem is

    minimize   sum_k w_k * l(x_k, u_k, phi)  +  w_H * V(x_H, phi)
    subject to x_{k+1} = f(x_k, u_k, phi),  g(x_k, u_k, phi) = 0,
               h(x_k, u_k, phi) <= 0,       x_0 = s  (and optionally u_0 = a),

with w_k = gamma^k when in-horizon discounting is on, else w_k = 1.  The
objective is a cost: smaller is better.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, DivergenceError

FD_REL_TOL = 1e-4


@dataclass(frozen=True)
class ParameterVector:
    """Flat parameter vector with a named segment layout.

    ``layout`` maps segment names to (start, stop) offsets that partition
    ``phi`` exactly, in order.  Instances are immutable; updates go through
    :meth:`replace` or :meth:`with_vector`.
    """

    phi: np.ndarray
    layout: dict[str, tuple[int, int]]

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        object.__setattr__(self, "phi", phi)
        if phi.ndim != 1:
            raise DimensionError("phi must be a flat vector")
        if not np.all(np.isfinite(phi)):
            raise ValueError("non-finite parameter entry")
        cursor = 0
        for name, (start, stop) in self.layout.items():
            if start != cursor or stop < start:
                raise ValueError(f"segment '{name}' breaks the layout partition")
            cursor = stop
        if cursor != phi.size:
            raise ValueError(f"layout covers {cursor} entries, phi has {phi.size}")

    @classmethod
    def from_segments(cls, segments: dict[str, np.ndarray]) -> "ParameterVector":
        """Build from named arrays; each is flattened row-major in given order."""
        layout = {}
        parts = []
        cursor = 0
        for name, arr in segments.items():
            flat = np.asarray(arr, dtype=float).ravel()
            layout[name] = (cursor, cursor + flat.size)
            cursor += flat.size
            parts.append(flat)
        phi = np.concatenate(parts) if parts else np.zeros(0)
        return cls(phi=phi, layout=layout)

    @property
    def size(self) -> int:
        return self.phi.size

    def segment(self, name: str) -> np.ndarray:
        start, stop = self.layout[name]
        return self.phi[start:stop].copy()

    def replace(self, name: str, values: np.ndarray) -> "ParameterVector":
        """New vector with one segment overwritten (values flattened row-major)."""
        start, stop = self.layout[name]
        flat = np.asarray(values, dtype=float).ravel()
        if flat.size != stop - start:
            raise DimensionError(
                f"segment '{name}' has {stop - start} entries, got {flat.size}"
            )
        phi = self.phi.copy()
        phi[start:stop] = flat
        return ParameterVector(phi=phi, layout=self.layout)

    def with_vector(self, phi: np.ndarray) -> "ParameterVector":
        """Same layout, new values."""
        return ParameterVector(phi=np.asarray(phi, dtype=float), layout=self.layout)


@dataclass(frozen=True)
class OCPSpec:
    """Immutable description of a parametric OCP; callbacks must be pure.

    Derivative callbacks return, for p = phi.size:
      stage_grad      -> (l_x (n,), l_u (m,))
      stage_hess      -> (l_xx (n,n), l_xu (n,m), l_uu (m,m))
      stage_phi       -> dl/dphi (p,)
      stage_grad_phi  -> (d l_x/dphi (n,p), d l_u/dphi (m,p))
      terminal_grad   -> V_x (n,)
      terminal_hess   -> V_xx (n,n)
      terminal_phi    -> dV/dphi (p,)
      terminal_grad_phi -> d V_x/dphi (n,p)
      dynamics_jac    -> (f_x (n,n), f_u (n,m))
      dynamics_phi    -> df/dphi (n,p)
      dynamics_jac_phi_vp(x,u,phi,lam) -> (d(f_x'lam)/dphi (n,p), d(f_u'lam)/dphi (m,p))
      dynamics_hess_vp(x,u,phi,lam) -> (n+m, n+m) sum_i lam_i * hess f_i,
          or None to request a Gauss-Newton (curvature-free) treatment
      eq_* / ineq_*   -> analogous, with constraint rows in place of f rows.
    """

    H: int
    n: int
    m: int
    gamma: float
    discount_in_horizon: bool
    stage_cost: Callable
    stage_grad: Callable
    stage_hess: Callable
    stage_phi: Callable
    stage_grad_phi: Callable
    terminal_cost: Callable
    terminal_grad: Callable
    terminal_hess: Callable
    terminal_phi: Callable
    terminal_grad_phi: Callable
    dynamics: Callable
    dynamics_jac: Callable
    dynamics_phi: Callable
    dynamics_jac_phi_vp: Callable
    dynamics_hess_vp: Callable | None = None
    n_eq: int = 0
    eq_constraints: Callable | None = None
    eq_jac: Callable | None = None
    eq_phi: Callable | None = None
    eq_jac_phi_vp: Callable | None = None
    n_ineq: int = 0
    ineq_constraints: Callable | None = None
    ineq_jac: Callable | None = None
    ineq_phi: Callable | None = None
    ineq_jac_phi_vp: Callable | None = None
    # input used when rolling out a cold-start iterate; zero when omitted
    u_init: np.ndarray | None = None

    def __post_init__(self):
        if self.H < 1:
            raise ValueError(f"horizon must be >= 1, got {self.H}")
        if self.n < 1 or self.m < 1:
            raise DimensionError("state and input dimensions must be positive")
        if self.u_init is not None and np.asarray(self.u_init).shape != (self.m,):
            raise DimensionError("u_init must have shape (m,)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if (self.n_eq > 0) != (self.eq_constraints is not None):
            raise ValueError("n_eq inconsistent with eq_constraints")
        if (self.n_ineq > 0) != (self.ineq_constraints is not None):
            raise ValueError("n_ineq inconsistent with ineq_constraints")

    def stage_weights(self) -> tuple[np.ndarray, float]:
        """(w_0..w_{H-1}, w_H): gamma powers, or all ones when discounting is off."""
        if self.discount_in_horizon:
            return self.gamma ** np.arange(self.H), self.gamma**self.H
        return np.ones(self.H), 1.0


@dataclass(frozen=True)
class OpenLoopPlan:
    """A forward-simulated plan: states (H+1, n), inputs (H, m), total cost."""

    x_seq: np.ndarray
    u_seq: np.ndarray
    cost: float
    g_vals: np.ndarray | None = None
    h_vals: np.ndarray | None = None

    def __post_init__(self):
        if self.x_seq.shape[0] != self.u_seq.shape[0] + 1:
            raise DimensionError(
                f"plan needs H+1 states for H inputs, got {self.x_seq.shape[0]} "
                f"and {self.u_seq.shape[0]}"
            )


def _sym_quad_grad_wrt_w(x: np.ndarray) -> np.ndarray:
    """d/dvec(W) of (W + W')x for row-major vec, shape (len(x), len(x)^2)."""
    n = x.size
    eye = np.eye(n)
    xr = x.reshape(1, -1)
    return np.kron(eye, xr) + np.kron(xr, eye)


def build_lq_ocp(
    A: np.ndarray,
    B: np.ndarray,
    Qc: np.ndarray,
    Rc: np.ndarray,
    P_term: np.ndarray,
    H: int,
    gamma: float,
    u_lo: np.ndarray | None = None,
    u_hi: np.ndarray | None = None,
    discount_in_horizon: bool = True,
) -> tuple[OCPSpec, ParameterVector]:
    """Linear-quadratic OCP with every matrix learnable.

    Stage cost x'Qx + u'Ru, terminal x'Px, dynamics Ax + Bu.  The parameter
    layout has segments "A", "B" (model), "Q", "R" (stage cost), "P"
    (terminal cost), each stored row-major; the callbacks read the matrices
    back from the parameter vector, so updating phi changes the problem.
    Optional elementwise input bounds become inequality rows [u - u_hi;
    u_lo - u] <= 0.

    Returns:
        (spec, phi0) where phi0 holds the passed-in matrices.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Qc = np.asarray(Qc, dtype=float)
    Rc = np.asarray(Rc, dtype=float)
    P_term = np.asarray(P_term, dtype=float)
    if B.ndim != 2:
        raise DimensionError("B must be a matrix")
    n, m = B.shape
    for name, M, shape in (
        ("A", A, (n, n)),
        ("Qc", Qc, (n, n)),
        ("Rc", Rc, (m, m)),
        ("P_term", P_term, (n, n)),
    ):
        if M.shape != shape:
            raise DimensionError(f"{name} has shape {M.shape}, expected {shape}")
    if np.any(np.linalg.eigvalsh(0.5 * (Rc + Rc.T)) <= 0.0):
        raise ValueError("Rc must be positive definite")

    phi0 = ParameterVector.from_segments({"A": A, "B": B, "Q": Qc, "R": Rc, "P": P_term})
    p = phi0.size
    sl = {name: slice(*phi0.layout[name]) for name in phi0.layout}

    def mats(pv):
        return (
            pv.phi[sl["A"]].reshape(n, n),
            pv.phi[sl["B"]].reshape(n, m),
            pv.phi[sl["Q"]].reshape(n, n),
            pv.phi[sl["R"]].reshape(m, m),
            pv.phi[sl["P"]].reshape(n, n),
        )

    def stage_cost(x, u, pv):
        _, _, Q, R, _ = mats(pv)
        return float(x @ Q @ x + u @ R @ u)

    def stage_grad(x, u, pv):
        _, _, Q, R, _ = mats(pv)
        return (Q + Q.T) @ x, (R + R.T) @ u

    def stage_hess(x, u, pv):
        _, _, Q, R, _ = mats(pv)
        return Q + Q.T, np.zeros((n, m)), R + R.T

    def stage_phi(x, u, pv):
        out = np.zeros(p)
        out[sl["Q"]] = np.outer(x, x).ravel()
        out[sl["R"]] = np.outer(u, u).ravel()
        return out

    def stage_grad_phi(x, u, pv):
        dlx = np.zeros((n, p))
        dlu = np.zeros((m, p))
        dlx[:, sl["Q"]] = _sym_quad_grad_wrt_w(x)
        dlu[:, sl["R"]] = _sym_quad_grad_wrt_w(u)
        return dlx, dlu

    def terminal_cost(x, pv):
        P = mats(pv)[4]
        return float(x @ P @ x)

    def terminal_grad(x, pv):
        P = mats(pv)[4]
        return (P + P.T) @ x

    def terminal_hess(x, pv):
        P = mats(pv)[4]
        return P + P.T

    def terminal_phi(x, pv):
        out = np.zeros(p)
        out[sl["P"]] = np.outer(x, x).ravel()
        return out

    def terminal_grad_phi(x, pv):
        out = np.zeros((n, p))
        out[:, sl["P"]] = _sym_quad_grad_wrt_w(x)
        return out

    def dynamics(x, u, pv):
        Am, Bm = mats(pv)[0], mats(pv)[1]
        return Am @ x + Bm @ u

    def dynamics_jac(x, u, pv):
        Am, Bm = mats(pv)[0], mats(pv)[1]
        return Am.copy(), Bm.copy()

    def dynamics_phi(x, u, pv):
        out = np.zeros((n, p))
        out[:, sl["A"]] = np.kron(np.eye(n), x.reshape(1, -1))
        out[:, sl["B"]] = np.kron(np.eye(n), u.reshape(1, -1))
        return out

    def dynamics_jac_phi_vp(x, u, pv, lam):
        # d(A'lam)/dvec(A) and d(B'lam)/dvec(B); each lands in its own segment.
        dx = np.zeros((n, p))
        du = np.zeros((m, p))
        dx[:, sl["A"]] = np.kron(lam.reshape(1, -1), np.eye(n))
        du[:, sl["B"]] = np.kron(lam.reshape(1, -1), np.eye(m))
        return dx, du

    def dynamics_hess_vp(x, u, pv, lam):
        return np.zeros((n + m, n + m))

    kwargs: dict = {}
    if u_lo is not None or u_hi is not None:
        if u_lo is None or u_hi is None:
            raise ValueError("provide both input bounds or neither")
        u_lo = np.broadcast_to(np.asarray(u_lo, dtype=float), (m,)).copy()
        u_hi = np.broadcast_to(np.asarray(u_hi, dtype=float), (m,)).copy()
        if np.any(u_lo >= u_hi):
            raise ValueError("input box is empty")
        n_ineq = 2 * m
        Hu = np.vstack([np.eye(m), -np.eye(m)])
        h_off = np.concatenate([-u_hi, u_lo])

        def ineq_constraints(x, u, pv):
            return Hu @ u + h_off

        def ineq_jac(x, u, pv):
            return np.zeros((n_ineq, n)), Hu.copy()

        def ineq_phi(x, u, pv):
            return np.zeros((n_ineq, p))

        def ineq_jac_phi_vp(x, u, pv, mu):
            return np.zeros((n, p)), np.zeros((m, p))

        kwargs = dict(
            n_ineq=n_ineq,
            ineq_constraints=ineq_constraints,
            ineq_jac=ineq_jac,
            ineq_phi=ineq_phi,
            ineq_jac_phi_vp=ineq_jac_phi_vp,
        )

    spec = OCPSpec(
        H=H,
        n=n,
        m=m,
        gamma=float(gamma),
        discount_in_horizon=discount_in_horizon,
        stage_cost=stage_cost,
        stage_grad=stage_grad,
        stage_hess=stage_hess,
        stage_phi=stage_phi,
        stage_grad_phi=stage_grad_phi,
        terminal_cost=terminal_cost,
        terminal_grad=terminal_grad,
        terminal_hess=terminal_hess,
        terminal_phi=terminal_phi,
        terminal_grad_phi=terminal_grad_phi,
        dynamics=dynamics,
        dynamics_jac=dynamics_jac,
        dynamics_phi=dynamics_phi,
        dynamics_jac_phi_vp=dynamics_jac_phi_vp,
        dynamics_hess_vp=dynamics_hess_vp,  # identically zero: linear model
        **kwargs,
    )
    return spec, phi0


def lq_matrices(pv: ParameterVector, n: int, m: int):
    """Unpack (A, B, Q, R, P) from a parameter vector with the LQ layout."""
    return (
        pv.segment("A").reshape(n, n),
        pv.segment("B").reshape(n, m),
        pv.segment("Q").reshape(n, n),
        pv.segment("R").reshape(m, m),
        pv.segment("P").reshape(n, n),
    )


def eval_open_loop(
    spec: OCPSpec, phi: ParameterVector, x0: np.ndarray, u_seq: np.ndarray
) -> OpenLoopPlan:
    """Simulate an input sequence through the model and price it.

    Constraints are evaluated and reported, not enforced.

    Raises:
        DivergenceError: non-finite state during the rollout, with step index.
    """
    x0 = np.asarray(x0, dtype=float)
    u_seq = np.asarray(u_seq, dtype=float).reshape(spec.H, spec.m)
    if x0.shape != (spec.n,):
        raise DimensionError(f"x0 shape {x0.shape}, expected ({spec.n},)")
    w, wH = spec.stage_weights()
    xs = [x0]
    cost = 0.0
    g_rows, h_rows = [], []
    x = x0
    for k in range(spec.H):
        u = u_seq[k]
        cost += w[k] * spec.stage_cost(x, u, phi)
        if spec.eq_constraints is not None:
            g_rows.append(np.asarray(spec.eq_constraints(x, u, phi), dtype=float))
        if spec.ineq_constraints is not None:
            h_rows.append(np.asarray(spec.ineq_constraints(x, u, phi), dtype=float))
        x = np.asarray(spec.dynamics(x, u, phi), dtype=float)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state while rolling out step {k}", step=k)
        xs.append(x)
    cost += wH * spec.terminal_cost(x, phi)
    return OpenLoopPlan(
        x_seq=np.stack(xs),
        u_seq=u_seq,
        cost=float(cost),
        g_vals=np.stack(g_rows) if g_rows else None,
        h_vals=np.stack(h_rows) if h_rows else None,
    )


def _fd_grad(fun, x, step_scale=1e-6):
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros(x.size)
    for i in range(x.size):
        h = step_scale * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g


def _fd_jac(fun, x, step_scale=1e-6):
    """Central-difference Jacobian of a vector function of a vector."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = step_scale * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def _rel_dev(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = max(1.0, float(np.max(np.abs(numeric))) if numeric.size else 0.0)
    if analytic.shape != numeric.shape:
        return np.inf
    diff = float(np.max(np.abs(analytic - numeric))) if numeric.size else 0.0
    return diff / denom


def validate_spec(
    spec: OCPSpec, phi: ParameterVector, rng: np.random.Generator | None = None
) -> list[str]:
    """Check callback shapes and derivative consistency by finite differences.

    Probes a handful of random points; every first derivative (in x, u, and
    phi) is compared against central differences of its parent callback at
    relative tolerance 1e-4.  Returns human-readable findings; empty means the
    spec passed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    findings: list[str] = []
    n, m, p = spec.n, spec.m, phi.size

    def check(name, analytic, numeric):
        dev = _rel_dev(analytic, numeric)
        shape_a = np.shape(analytic)
        shape_n = np.shape(numeric)
        if shape_a != shape_n:
            findings.append(f"{name}: shape {shape_a}, expected {shape_n}")
        elif dev > FD_REL_TOL:
            findings.append(f"{name}: max relative deviation {dev:.2e} vs finite differences")

    for _ in range(3):
        x = rng.normal(size=n)
        u = rng.normal(size=m)
        lx, lu = spec.stage_grad(x, u, phi)
        check("stage_grad[x]", lx, _fd_grad(lambda v: spec.stage_cost(v, u, phi), x))
        check("stage_grad[u]", lu, _fd_grad(lambda v: spec.stage_cost(x, v, phi), u))
        lxx, lxu, luu = spec.stage_hess(x, u, phi)
        check("stage_hess[xx]", lxx, _fd_jac(lambda v: spec.stage_grad(v, u, phi)[0], x))
        check("stage_hess[xu]", lxu, _fd_jac(lambda v: spec.stage_grad(x, v, phi)[0], u))
        check("stage_hess[uu]", luu, _fd_jac(lambda v: spec.stage_grad(x, v, phi)[1], u))
        check(
            "stage_phi",
            spec.stage_phi(x, u, phi),
            _fd_grad(lambda v: spec.stage_cost(x, u, phi.with_vector(v)), phi.phi),
        )
        dlx, dlu = spec.stage_grad_phi(x, u, phi)
        check(
            "stage_grad_phi[x]",
            dlx,
            _fd_jac(lambda v: spec.stage_grad(x, u, phi.with_vector(v))[0], phi.phi),
        )
        check(
            "stage_grad_phi[u]",
            dlu,
            _fd_jac(lambda v: spec.stage_grad(x, u, phi.with_vector(v))[1], phi.phi),
        )
        check("terminal_grad", spec.terminal_grad(x, phi),
              _fd_grad(lambda v: spec.terminal_cost(v, phi), x))
        check("terminal_hess", spec.terminal_hess(x, phi),
              _fd_jac(lambda v: spec.terminal_grad(v, phi), x))
        check(
            "terminal_phi",
            spec.terminal_phi(x, phi),
            _fd_grad(lambda v: spec.terminal_cost(x, phi.with_vector(v)), phi.phi),
        )
        check(
            "terminal_grad_phi",
            spec.terminal_grad_phi(x, phi),
            _fd_jac(lambda v: spec.terminal_grad(x, phi.with_vector(v)), phi.phi),
        )
        fx, fu = spec.dynamics_jac(x, u, phi)
        check("dynamics_jac[x]", fx, _fd_jac(lambda v: spec.dynamics(v, u, phi), x))
        check("dynamics_jac[u]", fu, _fd_jac(lambda v: spec.dynamics(x, v, phi), u))
        check(
            "dynamics_phi",
            spec.dynamics_phi(x, u, phi),
            _fd_jac(lambda v: spec.dynamics(x, u, phi.with_vector(v)), phi.phi),
        )
        lam = rng.normal(size=n)
        djx, dju = spec.dynamics_jac_phi_vp(x, u, phi, lam)
        check(
            "dynamics_jac_phi_vp[x]",
            djx,
            _fd_jac(
                lambda v: spec.dynamics_jac(x, u, phi.with_vector(v))[0].T @ lam, phi.phi
            ),
        )
        check(
            "dynamics_jac_phi_vp[u]",
            dju,
            _fd_jac(
                lambda v: spec.dynamics_jac(x, u, phi.with_vector(v))[1].T @ lam, phi.phi
            ),
        )
        if spec.dynamics_hess_vp is not None:
            hv = spec.dynamics_hess_vp(x, u, phi, lam)

            def lam_f(xu):
                return lam @ spec.dynamics(xu[:n], xu[n:], phi)

            # Nested differences need a coarser step to stay above rounding noise.
            check(
                "dynamics_hess_vp",
                hv,
                _fd_jac(lambda v: _fd_grad(lam_f, v, 1e-5), np.concatenate([x, u]), 1e-5),
            )
        if spec.ineq_constraints is not None:
            hx, hu = spec.ineq_jac(x, u, phi)
            check("ineq_jac[x]", hx, _fd_jac(lambda v: spec.ineq_constraints(v, u, phi), x))
            check("ineq_jac[u]", hu, _fd_jac(lambda v: spec.ineq_constraints(x, v, phi), u))
            check(
                "ineq_phi",
                spec.ineq_phi(x, u, phi),
                _fd_jac(lambda v: spec.ineq_constraints(x, u, phi.with_vector(v)), phi.phi),
            )
        if spec.eq_constraints is not None:
            gx, gu = spec.eq_jac(x, u, phi)
            check("eq_jac[x]", gx, _fd_jac(lambda v: spec.eq_constraints(v, u, phi), x))
            check("eq_jac[u]", gu, _fd_jac(lambda v: spec.eq_constraints(x, v, phi), u))
            check(
                "eq_phi",
                spec.eq_phi(x, u, phi),
                _fd_jac(lambda v: spec.eq_constraints(x, u, phi.with_vector(v)), phi.phi),
            )
    if spec.dynamics_hess_vp is None:
        # Not an error: the solver falls back to a Gauss-Newton Hessian.
        pass
    return findings

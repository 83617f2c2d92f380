"""Case-study environments: a linear-quadratic system and an exothermic
continuous stirred tank reactor (CSTR).

The reactor follows the standard four-state benchmark model with states
(c_A, c_B, T_R, T_K) — concentrations of species A and B, reactor and coolant
temperatures — and inputs (F, Q_dot) — normalized feed flow and cooling power.
All physical constants come from the experiment config; none live in code.
Integration is fixed-step RK4 for bitwise reproducibility.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DivergenceError
from .mdp import Trajectory
from .ocp import OCPSpec, ParameterVector

log = logging.getLogger(__name__)

_CSTR_PARAMS = (
    "K0_ab",
    "K0_bc",
    "K0_ad",
    "E_A_ab",
    "E_A_bc",
    "E_A_ad",
    "H_R_ab",
    "H_R_bc",
    "H_R_ad",
    "rho",
    "Cp",
    "Cp_k",
    "A_R",
    "V_R",
    "m_k",
    "T_in",
    "K_w",
    "C_A0",
)


@dataclass(frozen=True)
class LQEnvConfig:
    """Linear dynamics with quadratic reward and Gaussian state noise."""

    A: np.ndarray
    B: np.ndarray
    Qc: np.ndarray
    Rc: np.ndarray
    noise_std: np.ndarray
    x0_lo: np.ndarray
    x0_hi: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "Qc", "Rc", "noise_std", "x0_lo", "x0_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.Qc.shape != (n, n) or self.Rc.shape != (m, m):
            raise DimensionError("inconsistent LQ config shapes")
        if self.noise_std.shape != (n,) or np.any(self.noise_std < 0):
            raise ValueError("noise_std must be a nonnegative per-state vector")
        if self.x0_lo.shape != (n,) or self.x0_hi.shape != (n,) or np.any(self.x0_lo > self.x0_hi):
            raise ValueError("empty initial-state box")
        if np.any(np.linalg.eigvalsh(0.5 * (self.Rc + self.Rc.T)) <= 0):
            raise ValueError("Rc must be positive definite")


def lq_step(cfg: LQEnvConfig, s: np.ndarray, a: np.ndarray, rng: np.random.Generator):
    """One step: s' = As + Ba + w, r = -(s'Qc s + a'Rc a)."""
    r = -(float(s @ cfg.Qc @ s + a @ cfg.Rc @ a))
    s_next = cfg.A @ s + cfg.B @ a + cfg.noise_std * rng.standard_normal(s.size)
    return r, s_next


class LQEnv:
    """Environment wrapper over lq_step; initial states uniform in a box."""

    def __init__(self, cfg: LQEnvConfig):
        self.cfg = cfg
        self.n, self.m = cfg.B.shape

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.cfg.x0_lo, self.cfg.x0_hi)

    def step(self, s, a, rng):
        return lq_step(self.cfg, np.asarray(s, float), np.asarray(a, float), rng)


@dataclass(frozen=True)
class CSTRConfig:
    """Reactor constants, integrator setup, boxes, and reward weights.

    ode_params must supply every named reaction/thermal constant; reward is
    r = -w_track*(c_B - setpoint)^2 - sum_i w_move_i*(a_i - a_prev_i)^2.
    """

    ode_params: dict
    dt: float
    substeps: int
    state_lo: np.ndarray
    state_hi: np.ndarray
    input_lo: np.ndarray
    input_hi: np.ndarray
    setpoint: float
    w_track: float
    w_move: np.ndarray
    reference_input: np.ndarray
    x0_lo: np.ndarray
    x0_hi: np.ndarray

    def __post_init__(self):
        missing = [k for k in _CSTR_PARAMS if k not in self.ode_params]
        if missing:
            raise ValueError(f"missing reactor constants: {missing}")
        for name in ("state_lo", "state_hi", "input_lo", "input_hi", "w_move",
                     "reference_input", "x0_lo", "x0_hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("dt must be positive and substeps >= 1")
        if self.state_lo.shape != (4,) or self.state_hi.shape != (4,):
            raise DimensionError("state box must cover the four reactor states")
        if self.input_lo.shape != (2,) or self.input_hi.shape != (2,):
            raise DimensionError("input box must cover the two reactor inputs")
        if np.any(self.state_lo >= self.state_hi) or np.any(self.input_lo >= self.input_hi):
            raise ValueError("empty state or input box")
        if self.w_track < 0 or np.any(self.w_move < 0):
            raise ValueError("reward weights must be nonnegative")


def cstr_rhs(params: dict, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Reactor ODE right-hand side; broadcasts over leading batch axes."""
    p = params
    c_A, c_B, T_R, T_K = (s[..., i] for i in range(4))
    F, Qd = a[..., 0], a[..., 1]
    theta = T_R + 273.15
    k1 = p["K0_ab"] * np.exp(-p["E_A_ab"] / theta)
    k2 = p["K0_bc"] * np.exp(-p["E_A_bc"] / theta)
    k3 = p["K0_ad"] * np.exp(-p["E_A_ad"] / theta)
    rcp = p["rho"] * p["Cp"]
    d_cA = F * (p["C_A0"] - c_A) - k1 * c_A - k3 * c_A**2
    d_cB = -F * c_B + k1 * c_A - k2 * c_B
    d_TR = (
        (k1 * c_A * p["H_R_ab"] + k2 * c_B * p["H_R_bc"] + k3 * c_A**2 * p["H_R_ad"]) / (-rcp)
        + F * (p["T_in"] - T_R)
        + p["K_w"] * p["A_R"] * (T_K - T_R) / (rcp * p["V_R"])
    )
    d_TK = (Qd + p["K_w"] * p["A_R"] * (T_R - T_K)) / (p["m_k"] * p["Cp_k"])
    return np.stack([d_cA, d_cB, d_TR, d_TK], axis=-1)


def cstr_rhs_jac(params: dict, s: np.ndarray, a: np.ndarray):
    """Jacobians (d rhs/d state (4,4), d rhs/d input (4,2)) at one point."""
    p = params
    c_A, c_B, T_R, T_K = s
    F = a[0]
    theta = T_R + 273.15
    k1 = p["K0_ab"] * np.exp(-p["E_A_ab"] / theta)
    k2 = p["K0_bc"] * np.exp(-p["E_A_bc"] / theta)
    k3 = p["K0_ad"] * np.exp(-p["E_A_ad"] / theta)
    dk1 = k1 * p["E_A_ab"] / theta**2
    dk2 = k2 * p["E_A_bc"] / theta**2
    dk3 = k3 * p["E_A_ad"] / theta**2
    rcp = p["rho"] * p["Cp"]
    kwr = p["K_w"] * p["A_R"] / (rcp * p["V_R"])
    kwk = p["K_w"] * p["A_R"] / (p["m_k"] * p["Cp_k"])
    Jx = np.zeros((4, 4))
    Jx[0, 0] = -F - k1 - 2.0 * k3 * c_A
    Jx[0, 2] = -(dk1 * c_A + dk3 * c_A**2)
    Jx[1, 0] = k1
    Jx[1, 1] = -F - k2
    Jx[1, 2] = dk1 * c_A - dk2 * c_B
    Jx[2, 0] = (k1 * p["H_R_ab"] + 2.0 * k3 * c_A * p["H_R_ad"]) / (-rcp)
    Jx[2, 1] = k2 * p["H_R_bc"] / (-rcp)
    Jx[2, 2] = (
        (dk1 * c_A * p["H_R_ab"] + dk2 * c_B * p["H_R_bc"] + dk3 * c_A**2 * p["H_R_ad"]) / (-rcp)
        - F
        - kwr
    )
    Jx[2, 3] = kwr
    Jx[3, 2] = kwk
    Jx[3, 3] = -kwk
    Ju = np.zeros((4, 2))
    Ju[0, 0] = p["C_A0"] - c_A
    Ju[1, 0] = -c_B
    Ju[2, 0] = p["T_in"] - T_R
    Ju[3, 1] = 1.0 / (p["m_k"] * p["Cp_k"])
    return Jx, Ju


def rk4_step(params: dict, s: np.ndarray, a: np.ndarray, h: float) -> np.ndarray:
    k1 = cstr_rhs(params, s, a)
    k2 = cstr_rhs(params, s + 0.5 * h * k1, a)
    k3 = cstr_rhs(params, s + 0.5 * h * k2, a)
    k4 = cstr_rhs(params, s + h * k3, a)
    return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def cstr_discrete(cfg: CSTRConfig, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """State after one control interval dt (substep-subdivided RK4); batched."""
    h = cfg.dt / cfg.substeps
    x = np.asarray(s, dtype=float)
    for _ in range(cfg.substeps):
        x = rk4_step(cfg.ode_params, x, np.asarray(a, dtype=float), h)
    return x


def cstr_discrete_jac(cfg: CSTRConfig, s: np.ndarray, a: np.ndarray):
    """Jacobians of the dt-map by chaining RK4 stage derivatives."""
    h = cfg.dt / cfg.substeps
    p = cfg.ode_params
    x = np.asarray(s, dtype=float)
    Jx_tot = np.eye(4)
    Ju_tot = np.zeros((4, 2))
    for _ in range(cfg.substeps):
        k1 = cstr_rhs(p, x, a)
        x2 = x + 0.5 * h * k1
        k2 = cstr_rhs(p, x2, a)
        x3 = x + 0.5 * h * k2
        k3 = cstr_rhs(p, x3, a)
        x4 = x + h * k3
        k4 = cstr_rhs(p, x4, a)
        A1, B1 = cstr_rhs_jac(p, x, a)
        A2, B2 = cstr_rhs_jac(p, x2, a)
        A3, B3 = cstr_rhs_jac(p, x3, a)
        A4, B4 = cstr_rhs_jac(p, x4, a)
        # stagewise chain rule for dk_i/dx and dk_i/du
        D1x, D1u = A1, B1
        D2x = A2 @ (np.eye(4) + 0.5 * h * D1x)
        D2u = B2 + A2 @ (0.5 * h * D1u)
        D3x = A3 @ (np.eye(4) + 0.5 * h * D2x)
        D3u = B3 + A3 @ (0.5 * h * D2u)
        D4x = A4 @ (np.eye(4) + h * D3x)
        D4u = B4 + A4 @ (h * D3u)
        Sx = np.eye(4) + (h / 6.0) * (D1x + 2 * D2x + 2 * D3x + D4x)
        Su = (h / 6.0) * (D1u + 2 * D2u + 2 * D3u + D4u)
        Ju_tot = Sx @ Ju_tot + Su
        Jx_tot = Sx @ Jx_tot
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return Jx_tot, Ju_tot


def cstr_step(
    cfg: CSTRConfig, s: np.ndarray, a: np.ndarray, a_prev: np.ndarray
) -> tuple[float, np.ndarray]:
    """One reward-and-transition step of the reactor.

    The move penalty needs the previously applied input; environment wrappers
    track it so policies stay state-feedback.

    Raises:
        DivergenceError: integration produced a non-finite state.
    """
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    err = cfg.setpoint - s[1]
    move = a - np.asarray(a_prev, dtype=float)
    r = -cfg.w_track * err**2 - float(cfg.w_move @ move**2)
    s_next = cstr_discrete(cfg, s, a)
    if not np.all(np.isfinite(s_next)):
        raise DivergenceError("reactor integration diverged")
    if s_next[0] < 0.0 or s_next[1] < 0.0:
        log.info("clipped negative concentration %s to 0", s_next[:2])
        s_next = s_next.copy()
        s_next[:2] = np.maximum(s_next[:2], 0.0)
    return float(r), s_next


class CSTREnv:
    """Reactor environment; initial states uniform in a (possibly degenerate)
    box, previous input tracked internally for the move penalty."""

    n = 4
    m = 2

    def __init__(self, cfg: CSTRConfig):
        self.cfg = cfg
        self._a_prev = cfg.reference_input.copy()

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._a_prev = self.cfg.reference_input.copy()
        return rng.uniform(self.cfg.x0_lo, self.cfg.x0_hi)

    def step(self, s, a, rng):
        r, s_next = cstr_step(self.cfg, s, a, self._a_prev)
        self._a_prev = np.asarray(a, dtype=float).copy()
        return r, s_next


def constraint_violation_count(traj, state_lo, state_hi, tol: float = 1e-9) -> int:
    """Number of visited post-step states strictly outside the closed box.

    Accepts a Trajectory (counts each transition's landing state) or a
    (T, n) array of states.
    """
    if isinstance(traj, Trajectory):
        states = traj.states[1:]
    else:
        states = np.atleast_2d(np.asarray(traj, dtype=float))
    lo = np.asarray(state_lo, dtype=float)
    hi = np.asarray(state_hi, dtype=float)
    outside = (states < lo - tol) | (states > hi + tol)
    return int(np.sum(np.any(outside, axis=1)))


def build_cstr_ocp(
    cfg: CSTRConfig,
    H: int,
    gamma: float,
    terminal_weights: np.ndarray,
    terminal_kind: str = "quadratic",
    terminal_centers: np.ndarray | None = None,
    terminal_lengthscale: float | None = None,
    discount_in_horizon: bool = True,
    state_constraints: bool = True,
) -> tuple[OCPSpec, ParameterVector]:
    """Tracking OCP over the reactor's dt-discretized dynamics.

    Stage cost: w_track*(c_B - setpoint)^2 + sum_i w_move_i*(u_i - u_ref_i)^2
    (the move penalty is anchored to the reference input so the stage cost
    stays a pure state-input function).  Terminal cost is the negated
    reward-sign value model defined by ``terminal_weights`` — its weights form
    the single learnable segment "V".  Inequalities put box constraints on
    inputs and, when ``state_constraints``, on states.

    Returns (spec, phi0) with phi0 holding the terminal weights.
    """
    from .rl import ValueModel  # deferred: rl imports solver machinery

    phi0 = ParameterVector.from_segments({"V": np.asarray(terminal_weights, dtype=float)})
    p = phi0.size
    n, m = 4, 2
    u_ref = cfg.reference_input
    sp = cfg.setpoint
    wt, wm = cfg.w_track, cfg.w_move

    def vmodel(pv):
        return ValueModel(
            kind=terminal_kind,
            n=n,
            weights=pv.segment("V"),
            centers=terminal_centers,
            lengthscale=terminal_lengthscale,
        )

    expected_dim = vmodel(phi0).feature_dim()
    if p != expected_dim:
        raise DimensionError(
            f"terminal weights have {p} entries, feature basis needs {expected_dim}"
        )

    def stage_cost(x, u, pv):
        du = u - u_ref
        return float(wt * (x[1] - sp) ** 2 + wm @ du**2)

    def stage_grad(x, u, pv):
        gx = np.zeros(n)
        gx[1] = 2.0 * wt * (x[1] - sp)
        return gx, 2.0 * wm * (u - u_ref)

    def stage_hess(x, u, pv):
        hxx = np.zeros((n, n))
        hxx[1, 1] = 2.0 * wt
        return hxx, np.zeros((n, m)), np.diag(2.0 * wm)

    def stage_phi(x, u, pv):
        return np.zeros(p)

    def stage_grad_phi(x, u, pv):
        return np.zeros((n, p)), np.zeros((m, p))

    def terminal_cost(x, pv):
        return -vmodel(pv).value(x)

    def terminal_grad(x, pv):
        return -vmodel(pv).value_grad(x)

    def terminal_hess(x, pv):
        return -vmodel(pv).value_hess(x)

    def terminal_phi(x, pv):
        return -vmodel(pv).features(x)

    def terminal_grad_phi(x, pv):
        return -vmodel(pv).features_jac(x).T

    def dynamics(x, u, pv):
        return cstr_discrete(cfg, x, u)

    def dynamics_jac(x, u, pv):
        return cstr_discrete_jac(cfg, x, u)

    def dynamics_phi(x, u, pv):
        return np.zeros((n, p))

    def dynamics_jac_phi_vp(x, u, pv, lam):
        return np.zeros((n, p)), np.zeros((m, p))

    rows_u = np.vstack([np.eye(m), -np.eye(m)])
    off_u = np.concatenate([-cfg.input_hi, cfg.input_lo])
    if state_constraints:
        rows_x = np.vstack([np.eye(n), -np.eye(n)])
        off_x = np.concatenate([-cfg.state_hi, cfg.state_lo])
        n_ineq = 2 * m + 2 * n
    else:
        rows_x = np.zeros((0, n))
        off_x = np.zeros(0)
        n_ineq = 2 * m

    def ineq_constraints(x, u, pv):
        return np.concatenate([rows_u @ u + off_u, rows_x @ x + off_x])

    def ineq_jac(x, u, pv):
        hx = np.vstack([np.zeros((2 * m, n)), rows_x])
        hu = np.vstack([rows_u, np.zeros((rows_x.shape[0], m))])
        return hx, hu

    def ineq_phi(x, u, pv):
        return np.zeros((n_ineq, p))

    def ineq_jac_phi_vp(x, u, pv, mu):
        return np.zeros((n, p)), np.zeros((m, p))

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
        dynamics_hess_vp=None,  # Gauss-Newton treatment of the reactor model
        n_ineq=n_ineq,
        ineq_constraints=ineq_constraints,
        ineq_jac=ineq_jac,
        ineq_phi=ineq_phi,
        ineq_jac_phi_vp=ineq_jac_phi_vp,
        u_init=cfg.reference_input.copy(),
    )
    return spec, phi0

"""Planar n-link revolute arm: rigid-body dynamics, friction, integration,
PD+feedforward control, and reference trajectories.

Conventions: joint angles are measured from the +x axis, accumulated along the
chain; gravity acts along -y.  A payload is a point mass at the tip of the last
link.  Gravity compensation mimics a robot controller that cancels the gravity
torques of its nominal (payload-free) model: commanded torque excludes those
terms, and an attached payload's weight is deliberately not compensated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

COULOMB_VEL_EPS = 1e-2  # rad/s, tanh smoothing width for Coulomb friction


class SimulationDiverged(Exception):
    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


@dataclass
class ArmModel:
    joint_count: int
    masses: np.ndarray        # kg, per link
    lengths: np.ndarray       # m
    com_offsets: np.ndarray   # m from the proximal joint along the link
    inertias: np.ndarray      # kg m^2 about each link's COM
    gravity: float = 9.81
    viscous: np.ndarray | None = None   # N m s/rad
    coulomb: np.ndarray | None = None   # N m
    payload_mass: float = 0.0
    gravity_compensated: bool = False

    def __post_init__(self):
        J = self.joint_count
        if J < 1:
            raise ValueError("joint_count must be >= 1")
        for name in ("masses", "lengths", "com_offsets", "inertias"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (J,):
                raise ValueError(f"{name} must have shape ({J},), got {arr.shape}")
            setattr(self, name, arr)
        if np.any(self.masses <= 0) or np.any(self.lengths <= 0) or np.any(self.inertias <= 0):
            raise ValueError("masses, lengths and inertias must be positive")
        if np.any(self.com_offsets <= 0) or np.any(self.com_offsets > self.lengths):
            raise ValueError("com_offsets must lie in (0, length]")
        self.viscous = self._coeff(self.viscous, J, "viscous")
        self.coulomb = self._coeff(self.coulomb, J, "coulomb")
        if self.payload_mass < 0:
            raise ValueError("payload_mass must be >= 0")

    @staticmethod
    def _coeff(value, J, name):
        if value is None:
            return np.zeros(J)
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != (J,):
            raise ValueError(f"{name} must have shape ({J},), got {arr.shape}")
        if np.any(arr < 0):
            raise ValueError(f"{name} coefficients must be >= 0")
        return arr


def with_payload(model: ArmModel, payload_mass: float) -> ArmModel:
    return replace(model, payload_mass=float(payload_mass))


@dataclass
class ArmState:
    q: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.dq = np.asarray(self.dq, dtype=np.float64)
        if self.q.shape != self.dq.shape or self.q.ndim != 1:
            raise ValueError("q and dq must be equal-length vectors")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.dq))):
            raise ValueError("ArmState entries must be finite")


@dataclass
class Gains:
    kp: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        self.kp = np.asarray(self.kp, dtype=np.float64)
        self.kd = np.asarray(self.kd, dtype=np.float64)
        if self.kp.shape != self.kd.shape or self.kp.ndim != 1:
            raise ValueError("kp and kd must be equal-length vectors")
        if np.any(self.kp < 0) or np.any(self.kd < 0):
            raise ValueError("gains must be nonnegative")


@dataclass
class RefTrajectory:
    dt: float
    q_d: np.ndarray    # T x J
    dq_d: np.ndarray
    ddq_d: np.ndarray

    def __post_init__(self):
        if not (self.q_d.shape == self.dq_d.shape == self.ddq_d.shape):
            raise ValueError("trajectory arrays must have identical shapes")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return self.q_d.shape[0]


def _effective_links(model: ArmModel, include_payload: bool):
    """Per-link (m, com, I) with the tip payload folded into the last link."""
    m = model.masses
    r = model.com_offsets
    I = model.inertias
    if include_payload and model.payload_mass > 0.0:
        m = m.copy()
        r = r.copy()
        I = I.copy()
        mp = model.payload_mass
        L = model.lengths[-1]
        m_tot = m[-1] + mp
        r_new = (m[-1] * r[-1] + mp * L) / m_tot
        I[-1] = I[-1] + m[-1] * (r[-1] - r_new) ** 2 + mp * (L - r_new) ** 2
        m[-1] = m_tot
        r[-1] = r_new
    return m, r, I


def _rne(model: ArmModel, q, dq, ddq, gravity: bool, payload: bool) -> np.ndarray:
    """Planar recursive Newton-Euler: rigid-body joint torques (no friction)."""
    J = model.joint_count
    m, r, I = _effective_links(model, payload)
    lengths = model.lengths

    a = np.cumsum(q)
    w = np.cumsum(dq)
    wd = np.cumsum(ddq)
    ux, uy = np.cos(a), np.sin(a)
    nx, ny = -uy, ux

    # joint-origin and COM accelerations, gravity embedded as +g base acceleration
    px_acc = np.empty(J + 1)
    py_acc = np.empty(J + 1)
    px_acc[0] = 0.0
    py_acc[0] = model.gravity if gravity else 0.0
    for i in range(J):
        px_acc[i + 1] = px_acc[i] + wd[i] * lengths[i] * nx[i] - w[i] ** 2 * lengths[i] * ux[i]
        py_acc[i + 1] = py_acc[i] + wd[i] * lengths[i] * ny[i] - w[i] ** 2 * lengths[i] * uy[i]
    cx_acc = px_acc[:J] + wd * r * nx - w ** 2 * r * ux
    cy_acc = py_acc[:J] + wd * r * ny - w ** 2 * r * uy

    tau = np.empty(J)
    fx = fy = 0.0  # force transmitted from the child subchain
    t_child = 0.0
    for i in range(J - 1, -1, -1):
        Fx, Fy = m[i] * cx_acc[i], m[i] * cy_acc[i]
        N = I[i] * wd[i]
        tau[i] = (N + t_child
                  + r[i] * (ux[i] * Fy - uy[i] * Fx)
                  + lengths[i] * (ux[i] * fy - uy[i] * fx))
        fx += Fx
        fy += Fy
        t_child = tau[i]
    return tau


def _check_vec(model: ArmModel, name, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.joint_count,):
        raise ValueError(f"{name} must have shape ({model.joint_count},), got {v.shape}")
    return v


def gravity_torque(model: ArmModel, q, include_payload: bool = True) -> np.ndarray:
    z = np.zeros(model.joint_count)
    return _rne(model, q, z, z, gravity=True, payload=include_payload)


def _compensation(model: ArmModel, q) -> np.ndarray:
    if not model.gravity_compensated:
        return np.zeros(model.joint_count)
    return gravity_torque(model, q, include_payload=False)


def inverse_dynamics(model: ArmModel, q, dq, ddq) -> np.ndarray:
    """Rigid-body torque for acceleration ddq (friction excluded).

    With gravity compensation on, the nominal-model gravity torque is
    subtracted, i.e. the returned value is the torque a compensated
    controller would have to command.
    """
    q = _check_vec(model, "q", q)
    dq = _check_vec(model, "dq", dq)
    ddq = _check_vec(model, "ddq", ddq)
    return _rne(model, q, dq, ddq, gravity=True, payload=True) - _compensation(model, q)


def mass_matrix(model: ArmModel, q) -> np.ndarray:
    J = model.joint_count
    q = _check_vec(model, "q", q)
    z = np.zeros(J)
    M = np.empty((J, J))
    for j in range(J):
        e = np.zeros(J)
        e[j] = 1.0
        M[:, j] = _rne(model, q, z, e, gravity=False, payload=True)
    return M


def friction_torque(model: ArmModel, dq) -> np.ndarray:
    return model.viscous * dq + model.coulomb * np.tanh(dq / COULOMB_VEL_EPS)


def forward_dynamics(model: ArmModel, q, dq, tau) -> np.ndarray:
    """Acceleration under commanded torque, friction and (optionally
    compensated) gravity: solves M(q) ddq = tau + comp - bias - friction."""
    q = _check_vec(model, "q", q)
    dq = _check_vec(model, "dq", dq)
    tau = _check_vec(model, "tau", tau)
    z = np.zeros(model.joint_count)
    bias = _rne(model, q, dq, z, gravity=True, payload=True)
    rhs = tau + _compensation(model, q) - bias - friction_torque(model, dq)
    M = mass_matrix(model, q)
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as err:  # unreachable for positive inertias
        raise SimulationDiverged(f"singular mass matrix at q={q}") from err


def step(model: ArmModel, state: ArmState, tau, dt: float, index=None) -> ArmState:
    """Semi-implicit Euler: velocity first, then position with the new velocity."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau = np.asarray(tau, dtype=np.float64)
    if not np.all(np.isfinite(tau)):
        raise ValueError("non-finite torque command")
    ddq = forward_dynamics(model, state.q, state.dq, tau)
    dq_next = state.dq + dt * ddq
    q_next = state.q + dt * dq_next
    if not (np.all(np.isfinite(q_next)) and np.all(np.isfinite(dq_next))):
        where = "" if index is None else f" at step {index}"
        raise SimulationDiverged(f"simulation diverged{where}", step_index=index)
    return ArmState(q_next, dq_next)


def pd_ff_control(q_d, dq_d, u_ff, state: ArmState, gains: Gains) -> np.ndarray:
    q_d = np.asarray(q_d, dtype=np.float64)
    dq_d = np.asarray(dq_d, dtype=np.float64)
    u_ff = np.asarray(u_ff, dtype=np.float64)
    if not (q_d.shape == dq_d.shape == u_ff.shape == state.q.shape == gains.kp.shape):
        raise ValueError("pd_ff_control: dimension mismatch")
    return u_ff + gains.kp * (q_d - state.q) + gains.kd * (dq_d - state.dq)


def sine_trajectory(A, f: float, dt: float, duration: float, q_rest) -> RefTrajectory:
    """q(t) = A sin(2 pi f t) + q_rest with analytic velocity/acceleration."""
    if f <= 0 or dt <= 0 or duration <= 0:
        raise ValueError("f, dt and duration must be positive")
    A = np.atleast_1d(np.asarray(A, dtype=np.float64))
    q_rest = np.atleast_1d(np.asarray(q_rest, dtype=np.float64))
    if A.shape != q_rest.shape:
        raise ValueError("A and q_rest must have the same length")
    T = int(round(duration / dt))
    t = np.arange(T)[:, None] * dt
    w = 2.0 * np.pi * f
    q = A * np.sin(w * t) + q_rest
    dq = w * A * np.cos(w * t)
    ddq = -(w ** 2) * A * np.sin(w * t)
    return RefTrajectory(dt, q, dq, ddq)


def min_jerk_trajectory(q0, q1, duration: float, dt: float) -> RefTrajectory:
    """Smooth point-to-point motion with zero end velocity and acceleration."""
    if dt <= 0 or duration <= 0:
        raise ValueError("dt and duration must be positive")
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    if q0.shape != q1.shape:
        raise ValueError("waypoints must have the same length")
    # sample the endpoint too, so chained moves join exactly
    T = int(round(duration / dt))
    u = np.minimum(np.arange(T + 1) * dt / duration, 1.0)[:, None]
    s = 10 * u ** 3 - 15 * u ** 4 + 6 * u ** 5
    ds = (30 * u ** 2 - 60 * u ** 3 + 30 * u ** 4) / duration
    dds = (60 * u - 180 * u ** 2 + 120 * u ** 3) / duration ** 2
    d = q1 - q0
    return RefTrajectory(dt, q0 + s * d, ds * d, dds * d)

"""Arm dynamics checks: closed-form oracles, round trips, energy, control."""

import numpy as np
import pytest

from metaloss import arm


def make_arm(J, seed=0, friction=False, compensated=False, g=9.81):
    rng = np.random.default_rng(seed)
    lengths = rng.uniform(0.15, 0.4, J)
    masses = rng.uniform(0.5, 2.5, J)
    return arm.ArmModel(
        joint_count=J,
        masses=masses,
        lengths=lengths,
        com_offsets=lengths * rng.uniform(0.3, 0.9, J),
        inertias=masses * lengths ** 2 / 12.0,
        gravity=g,
        viscous=rng.uniform(0.05, 0.3, J) if friction else None,
        coulomb=rng.uniform(0.1, 0.4, J) if friction else None,
        gravity_compensated=compensated,
    )


def two_link_lagrangian_tau(model, q, dq, ddq):
    """Independent closed-form 2-link dynamics: M(q) ddq + C(q, dq) + G(q)."""
    m1, m2 = model.masses
    l1 = model.lengths[0]
    r1, r2 = model.com_offsets
    I1, I2 = model.inertias
    g = model.gravity
    c2, s2 = np.cos(q[1]), np.sin(q[1])

    M11 = I1 + I2 + m1 * r1 ** 2 + m2 * (l1 ** 2 + r2 ** 2 + 2 * l1 * r2 * c2)
    M12 = I2 + m2 * (r2 ** 2 + l1 * r2 * c2)
    M22 = I2 + m2 * r2 ** 2
    M = np.array([[M11, M12], [M12, M22]])

    h = m2 * l1 * r2 * s2
    C = np.array([-h * dq[1] ** 2 - 2 * h * dq[0] * dq[1], h * dq[0] ** 2])

    a1, a2 = q[0], q[0] + q[1]
    G = np.array([
        (m1 * r1 + m2 * l1) * g * np.cos(a1) + m2 * r2 * g * np.cos(a2),
        m2 * r2 * g * np.cos(a2),
    ])
    return M @ ddq + C + G


def arm_energy(model, state):
    """Total mechanical energy from forward kinematics (payload included)."""
    J = model.joint_count
    a = np.cumsum(state.q)
    w = np.cumsum(state.dq)
    ux, uy = np.cos(a), np.sin(a)
    nx, ny = -uy, ux
    E = 0.0
    vx = vy = 0.0
    py = 0.0
    for i in range(J):
        cvx = vx + w[i] * model.com_offsets[i] * nx[i]
        cvy = vy + w[i] * model.com_offsets[i] * ny[i]
        cy = py + model.com_offsets[i] * uy[i]
        E += 0.5 * model.masses[i] * (cvx ** 2 + cvy ** 2)
        E += 0.5 * model.inertias[i] * w[i] ** 2
        E += model.masses[i] * model.gravity * cy
        vx += w[i] * model.lengths[i] * nx[i]
        vy += w[i] * model.lengths[i] * ny[i]
        py += model.lengths[i] * uy[i]
    if model.payload_mass > 0:
        E += 0.5 * model.payload_mass * (vx ** 2 + vy ** 2)
        E += model.payload_mass * model.gravity * py
    return E


def test_model_validation():
    with pytest.raises(ValueError):
        make_arm(0)
    with pytest.raises(ValueError):
        arm.ArmModel(1, [1.0], [1.0], [0.5], [-0.1])
    with pytest.raises(ValueError):
        arm.ArmModel(1, [1.0], [1.0], [1.5], [0.1])  # com beyond link end
    with pytest.raises(ValueError):
        arm.ArmModel(2, [1.0], [1.0], [0.5], [0.1])  # wrong lengths


def test_point_mass_pendulum_gravity_torque():
    # horizontal pendulum: gravity torque = m g l
    model = arm.ArmModel(1, [1.0], [1.0], [1.0], [1e-12], gravity=9.81)
    tau = arm.inverse_dynamics(model, np.zeros(1), np.zeros(1), np.zeros(1))
    assert tau[0] == pytest.approx(9.81, rel=1e-12)


def test_compensated_static_torque_is_zero():
    for J in (1, 3):
        model = make_arm(J, seed=J, compensated=True)
        rng = np.random.default_rng(J)
        for _ in range(10):
            q = rng.uniform(-np.pi, np.pi, J)
            tau = arm.inverse_dynamics(model, q, np.zeros(J), np.zeros(J))
            assert np.max(np.abs(tau)) < 1e-12


def test_two_link_matches_lagrangian_oracle():
    model = make_arm(2, seed=5)
    rng = np.random.default_rng(6)
    for _ in range(200):
        q = rng.uniform(-np.pi, np.pi, 2)
        dq = rng.uniform(-3, 3, 2)
        ddq = rng.uniform(-5, 5, 2)
        got = arm.inverse_dynamics(model, q, dq, ddq)
        want = two_link_lagrangian_tau(model, q, dq, ddq)
        assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-10


@pytest.mark.parametrize("J", [1, 2, 3, 7])
def test_id_fd_round_trip(J):
    model = make_arm(J, seed=J + 10)
    rng = np.random.default_rng(J)
    for _ in range(100):
        q = rng.uniform(-np.pi, np.pi, J)
        dq = rng.uniform(-3, 3, J)
        ddq = rng.uniform(-5, 5, J)
        tau = arm.inverse_dynamics(model, q, dq, ddq)
        back = arm.forward_dynamics(model, q, dq, tau)
        assert np.linalg.norm(back - ddq) / max(np.linalg.norm(ddq), 1e-12) < 1e-8


def test_round_trip_with_payload_and_compensation():
    model = make_arm(3, seed=42, compensated=True)
    model = arm.with_payload(model, 0.857)
    rng = np.random.default_rng(9)
    for _ in range(50):
        q = rng.uniform(-np.pi, np.pi, 3)
        dq = rng.uniform(-2, 2, 3)
        ddq = rng.uniform(-4, 4, 3)
        tau = arm.inverse_dynamics(model, q, dq, ddq)
        back = arm.forward_dynamics(model, q, dq, tau)
        assert np.linalg.norm(back - ddq) / np.linalg.norm(ddq) < 1e-8


@pytest.mark.parametrize("J", [2, 3, 7])
def test_mass_matrix_spd(J):
    model = make_arm(J, seed=J)
    rng = np.random.default_rng(J + 1)
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, J)
        M = arm.mass_matrix(model, q)
        assert np.max(np.abs(M - M.T)) < 1e-10
        np.linalg.cholesky(M)  # raises if not positive definite


def test_equilibrium_zero_everything():
    model = make_arm(3, seed=2, g=0.0)
    ddq = arm.forward_dynamics(model, np.array([0.3, -0.2, 0.5]), np.zeros(3), np.zeros(3))
    assert np.max(np.abs(ddq)) < 1e-14


def test_viscous_friction_opposes_motion():
    base = arm.ArmModel(1, [1.0], [0.5], [0.25], [0.02], gravity=0.0)
    wet = arm.ArmModel(1, [1.0], [0.5], [0.25], [0.02], gravity=0.0, viscous=[0.5])
    q, dq, tau = np.zeros(1), np.array([1.0]), np.array([0.2])
    assert arm.forward_dynamics(wet, q, dq, tau)[0] < arm.forward_dynamics(base, q, dq, tau)[0]


def test_gravity_compensated_arm_stays_motionless():
    model = make_arm(3, seed=3, compensated=True)
    state = arm.ArmState(np.array([0.4, -0.7, 1.1]), np.zeros(3))
    for k in range(500):
        state = arm.step(model, state, np.zeros(3), 1.0 / 240.0, index=k)
    assert np.array_equal(state.q, np.array([0.4, -0.7, 1.1]))
    assert np.array_equal(state.dq, np.zeros(3))


def test_payload_breaks_compensation():
    model = arm.with_payload(make_arm(3, seed=3, compensated=True), 0.857)
    ddq = arm.forward_dynamics(model, np.array([0.4, -0.7, 1.1]), np.zeros(3), np.zeros(3))
    assert np.max(np.abs(ddq)) > 1e-3  # uncompensated payload weight pulls the arm


def test_step_zero_dynamics_exact():
    model = arm.ArmModel(1, [1.0], [0.5], [0.25], [0.02], gravity=0.0)
    state = arm.ArmState(np.array([0.3]), np.array([0.7]))
    nxt = arm.step(model, state, np.zeros(1), 0.01)
    assert nxt.q[0] == 0.3 + 0.01 * 0.7
    assert nxt.dq[0] == 0.7


def test_step_rejects_nonfinite_torque():
    model = make_arm(2)
    state = arm.ArmState(np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        arm.step(model, state, np.array([np.nan, 0.0]), 0.01)


def test_step_divergence_carries_index():
    model = make_arm(1, seed=1)
    state = arm.ArmState(np.zeros(1), np.zeros(1))
    with pytest.raises(arm.SimulationDiverged) as err:
        arm.step(model, state, np.array([1e308]), 1e300, index=17)
    assert err.value.step_index == 17


def test_pendulum_energy_drift_below_one_percent():
    model = arm.ArmModel(1, [1.0], [1.0], [0.5], [1.0 / 12.0], gravity=9.81)
    state = arm.ArmState(np.zeros(1), np.zeros(1))  # horizontal release
    offset = 1.0 * 9.81 * 0.5  # potential zero at the bottom of the swing
    E0 = arm_energy(model, state) + offset
    for k in range(2400):
        state = arm.step(model, state, np.zeros(1), 1.0 / 240.0, index=k)
    assert abs(arm_energy(model, state) + offset - E0) / E0 < 0.01


def test_two_link_energy_drift_below_one_percent():
    # Small oscillation about the hanging equilibrium; the first-order
    # integrator cannot hold 1% through chaotic large-amplitude swings.
    model = make_arm(2, seed=8)
    state = arm.ArmState(np.array([-np.pi / 2 + 0.15, 0.1]), np.zeros(2))
    rest = arm.ArmState(np.array([-np.pi / 2, 0.0]), np.zeros(2))
    E_min = arm_energy(model, rest)
    E0 = arm_energy(model, state) - E_min
    for k in range(2400):
        state = arm.step(model, state, np.zeros(2), 1.0 / 240.0, index=k)
    assert abs(arm_energy(model, state) - E_min - E0) / E0 < 0.01


def test_pd_ff_control_cases():
    gains = arm.Gains(np.array([50.0, 50.0]), np.array([5.0, 5.0]))
    state = arm.ArmState(np.array([0.1, 0.2]), np.array([0.0, 0.0]))
    tau = arm.pd_ff_control(state.q, state.dq, np.zeros(2), state, gains)
    assert np.array_equal(tau, np.zeros(2))

    zero_g = arm.Gains(np.zeros(2), np.zeros(2))
    u_ff = np.array([1.5, -0.5])
    tau = arm.pd_ff_control(np.ones(2), np.ones(2), u_ff, state, zero_g)
    assert np.array_equal(tau, u_ff)

    kd0 = arm.Gains(np.array([50.0, 50.0]), np.zeros(2))
    tau = arm.pd_ff_control(state.q + 0.1, state.dq, np.zeros(2), state, kd0)
    assert np.allclose(tau, 5.0)


def test_sine_trajectory_values():
    A = np.array([0.5, 0.3])
    rest = np.array([0.1, -0.2])
    traj = arm.sine_trajectory(A, f=0.05, dt=1.0 / 240.0, duration=10.0, q_rest=rest)
    assert len(traj) == 2400
    assert np.array_equal(traj.q_d[0], rest)
    assert np.allclose(traj.dq_d[0], 2 * np.pi * 0.05 * A)
    assert np.allclose(traj.ddq_d[0], 0.0)


def test_sine_trajectory_quarter_period():
    A = np.array([0.5])
    traj = arm.sine_trajectory(A, f=0.025, dt=1.0 / 240.0, duration=11.0, q_rest=np.zeros(1))
    k = int(round(1.0 / (4 * 0.025) / (1.0 / 240.0)))  # sample at t = 1/(4f)
    assert traj.q_d[k, 0] == pytest.approx(0.5, abs=1e-9)


def test_sine_trajectory_derivative_consistency():
    traj = arm.sine_trajectory(np.array([0.4]), f=0.08, dt=1e-3, duration=5.0,
                               q_rest=np.zeros(1))
    fd = np.gradient(traj.q_d[:, 0], 1e-3)
    assert np.max(np.abs(fd[2:-2] - traj.dq_d[2:-2, 0])) < 1e-4


def test_min_jerk_trajectory_endpoints_and_smoothness():
    q0, q1 = np.array([0.0, 1.0]), np.array([1.0, -1.0])
    traj = arm.min_jerk_trajectory(q0, q1, duration=2.0, dt=1.0 / 240.0)
    assert np.allclose(traj.q_d[0], q0)
    assert np.allclose(traj.dq_d[0], 0.0) and np.allclose(traj.ddq_d[0], 0.0)
    assert np.allclose(traj.q_d[-1], q1, atol=1e-4)
    fd = np.gradient(traj.q_d[:, 0], 1.0 / 240.0)
    assert np.max(np.abs(fd[2:-2] - traj.dq_d[2:-2, 0])) < 1e-3


def test_with_payload_returns_new_model():
    model = make_arm(2)
    loaded = arm.with_payload(model, 1.0)
    assert loaded.payload_mass == 1.0 and model.payload_mass == 0.0

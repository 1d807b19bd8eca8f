"""Damping frame algebra, tracking force, orientation PD, variable damping."""

import numpy as np
import pytest

from lfdstack import interaction, robot


def test_frame_canonical_alignment():
    spec = interaction.DampingSpec()
    U = interaction.principal_frame(np.array([1.0, 0.0, 0.0]), spec)
    assert np.allclose(np.abs(U), np.eye(3), atol=1e-12)


def test_frame_orthonormal_and_unit_det():
    spec = interaction.DampingSpec()
    U = interaction.principal_frame(np.array([0.0, 1.0, 0.0]), spec)
    assert np.allclose(U[:, 0], [0.0, 1.0, 0.0])
    assert np.abs(U.T @ U - np.eye(3)).max() < 1e-10
    assert abs(abs(np.linalg.det(U)) - 1.0) < 1e-10


def test_frame_orthonormal_random():
    rng = np.random.default_rng(30)
    spec = interaction.DampingSpec()
    for _ in range(200):
        U = interaction.principal_frame(rng.standard_normal(3), spec)
        assert np.abs(U.T @ U - np.eye(3)).max() < 1e-10


def test_frame_zero_input_reuses_previous():
    spec = interaction.DampingSpec()
    U1 = interaction.principal_frame(np.array([0.3, 0.4, 0.0]), spec)
    U2 = interaction.principal_frame(np.zeros(3), spec)
    assert np.array_equal(U1, U2)


def test_frame_continuity_full_rotation():
    # star swept 360 degrees in 1 degree steps: no column may jump
    spec = interaction.DampingSpec()
    prev = None
    for deg in range(0, 361):
        a = np.deg2rad(deg)
        U = interaction.principal_frame(np.array([np.cos(a), np.sin(a), 0.0]), spec)
        if prev is not None:
            for j in range(3):
                cosang = np.clip(prev[:, j] @ U[:, j], -1.0, 1.0)
                assert np.degrees(np.arccos(cosang)) < 5.0
        prev = U


def test_damping_isotropic():
    rng = np.random.default_rng(31)
    spec = interaction.DampingSpec()
    U = interaction.principal_frame(rng.standard_normal(3), spec)
    D = interaction.damping_matrix(U, np.array([17.0, 17.0, 17.0]))
    assert np.abs(D - 17.0 * np.eye(3)).max() < 1e-10


def test_damping_free_motion_direction():
    # zero damping along the motion axis passes aligned force unresisted
    spec = interaction.DampingSpec()
    star = np.array([1.0, 0.0, 0.0])
    U = interaction.principal_frame(star, spec)
    D = interaction.damping_matrix(U, np.array([0.0, 50.0, 50.0]))
    assert np.linalg.norm(D @ star) < 1e-12


def test_damping_eigenvalues_are_xi():
    rng = np.random.default_rng(32)
    spec = interaction.DampingSpec()
    xi = np.array([12.0, 45.0, 80.0])
    for _ in range(20):
        U = interaction.principal_frame(rng.standard_normal(3), spec)
        D = interaction.damping_matrix(U, xi)
        w = np.linalg.eigvalsh(D)
        assert np.abs(np.sort(w) - np.sort(xi)).max() <= 1e-10


def test_tracking_force_zero_on_exact_tracking():
    v = np.array([0.1, -0.2, 0.05])
    D = 30.0 * np.eye(3)
    assert np.allclose(interaction.tracking_force(v, v, D), 0.0)


def test_tracking_force_dissipative():
    rng = np.random.default_rng(33)
    spec = interaction.DampingSpec()
    for _ in range(1000):
        U = interaction.principal_frame(rng.standard_normal(3), spec)
        D = interaction.damping_matrix(U, rng.uniform(0, 100, 3))
        err = rng.standard_normal(3)
        # the force opposes the velocity error: power extracted, never added
        F = interaction.tracking_force(err, np.zeros(3), D)
        assert err @ F <= 1e-12
        assert err @ D @ err >= 0.0


def test_joint_torque_mapping():
    model = robot.default_model()
    rng = np.random.default_rng(34)
    q = rng.uniform(-1.0, 1.0, 7)
    J = robot.jacobian(model, q)
    assert np.allclose(interaction.to_joint_torques(np.zeros(3), np.zeros(3), J), 0.0)
    F = rng.standard_normal(3)
    mom = rng.standard_normal(3)
    tau = interaction.to_joint_torques(F, mom, J)
    # tau lies in range(J^T): least squares residual vanishes
    wrench, *_ = np.linalg.lstsq(J.T, tau, rcond=None)
    assert np.linalg.norm(J.T @ wrench - tau) < 1e-10
    # virtual work identity
    qd = rng.standard_normal(7)
    assert abs(tau @ qd - np.concatenate([F, mom]) @ (J @ qd)) < 1e-10


def test_orientation_pd_zero_at_setpoint():
    model = robot.default_model()
    sp = interaction.OrientationSetpoint()
    q = robot.solve_ik(model, np.array([-0.45, 0.0, 0.35]), sp.quaternion,
                       np.array([np.pi, 0.6, 0.0, 1.2, 0.0, -0.8, 0.0]))
    _, quat = robot.forward_kinematics(model, q)
    J = robot.jacobian(model, q)
    tau = interaction.orientation_pd(quat, np.zeros(7), J, sp)
    assert np.linalg.norm(tau) < 1e-6


def test_orientation_error_sign():
    sp = interaction.OrientationSetpoint(quaternion=np.array([1.0, 0, 0, 0]))
    a = 0.05
    tilted = np.array([np.cos(a / 2), np.sin(a / 2), 0.0, 0.0])  # +x rotation
    e = interaction.orientation_error(tilted, sp)
    assert e[0] > 0  # error along +x ...
    moment = -sp.kp * e
    assert moment[0] < 0  # ... restoring moment about -x


def test_variable_damping_identity_ratio():
    D_d = np.array([40.0, 40.0, 40.0])
    L_d = np.array([2.0, 3.0, 4.0])
    D = interaction.variable_cartesian_damping(np.diag(L_d), D_d, L_d)
    assert np.abs(D - np.diag(D_d)).max() < 1e-10


def test_variable_damping_linear_scaling():
    D_d = np.array([30.0, 40.0, 50.0])
    L_d = np.array([2.0, 2.5, 3.0])
    D = interaction.variable_cartesian_damping(2.0 * np.diag(L_d), D_d, L_d)
    assert np.abs(D - 2.0 * np.diag(D_d)).max() < 1e-10


def test_variable_damping_ratio_invariance():
    rng = np.random.default_rng(35)
    D_d = np.array([40.0, 45.0, 50.0])
    L_d = np.array([2.0, 2.5, 3.0])
    # random SPD apparent inertia with mild anisotropy
    A = rng.standard_normal((3, 3)) * 0.3
    Lam = np.diag([2.2, 2.6, 3.1]) + 0.5 * (A + A.T)
    Lam = Lam @ Lam.T  # ensure SPD
    D = interaction.variable_cartesian_damping(Lam, D_d, L_d)
    w, V = np.linalg.eigh(Lam)
    from scipy.optimize import linear_sum_assignment
    row, col = linear_sum_assignment(-np.abs(V))
    for axis, vec in zip(row, col):
        d_along = V[:, vec] @ D @ V[:, vec]
        assert abs(d_along / w[vec] - D_d[axis] / L_d[axis]) <= 1e-10


def test_damping_spec_validates():
    with pytest.raises(ValueError):
        interaction.DampingSpec(xi=np.array([-1.0, 10.0, 10.0]))

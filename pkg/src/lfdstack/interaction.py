"""Compliant task-space control: velocity-direction damping and orientation.

The damping matrix D = U Xi U^T is parameterized by the desired direction of
motion: the first principal axis follows the commanded velocity, the rest
come from Gram-Schmidt over the canonical axes.  Setting the first damping
entry to zero lets motion-aligned forces pass unresisted while others are
damped.  Forces are mapped to joint torques through J^T; a separate PD
regulator holds the EE orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .robot import matrix_from_quat, rotation_log

DEFAULT_XI = (30.0, 30.0, 30.0)
EPSILON_NUM = 1e-8

# EE orientation target: tool axis pointing at the ground (rotation by pi
# about y), the quaternion equivalent of the ZYX Euler set [pi, 0, pi]
GROUND_FACING_QUAT = np.array([0.0, 0.0, 1.0, 0.0])

DEFAULT_KP_ORI = 25.0
DEFAULT_KD_ORI = 4.0


@dataclass
class DampingSpec:
    """Direction-parameterized damping: diagonal values plus frame memory."""

    xi: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_XI))
    prev_U: np.ndarray = field(default_factory=lambda: np.eye(3))
    epsilon_num: float = EPSILON_NUM

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        self.prev_U = np.asarray(self.prev_U, dtype=float)
        if np.any(self.xi < 0.0):
            raise ValueError("damping values must be non-negative")


@dataclass
class OrientationSetpoint:
    """Fixed EE orientation target with PD gains."""

    quaternion: np.ndarray = field(default_factory=lambda: GROUND_FACING_QUAT.copy())
    kp: float = DEFAULT_KP_ORI
    kd: float = DEFAULT_KD_ORI

    def __post_init__(self):
        self.quaternion = np.asarray(self.quaternion, dtype=float)
        self.quaternion /= np.linalg.norm(self.quaternion)
        if self.kp <= 0 or self.kd <= 0:
            raise ValueError("orientation gains must be positive")


def principal_frame(star: np.ndarray, spec: DampingSpec) -> np.ndarray:
    """Orthonormal frame whose first column follows the desired velocity.

    Remaining columns: canonical axes with all previously chosen directions
    projected out (axes with negligible remainder are skipped).  Column signs
    follow spec.prev_U for continuity; the accepted frame is stored back as
    the new memory.  A negligible input keeps the previous frame.
    """
    star = np.asarray(star, dtype=float)
    norm = np.linalg.norm(star)
    if norm <= spec.epsilon_num:
        return spec.prev_U.copy()
    cols = [star / norm]
    for k in range(3):
        if len(cols) == 3:
            break
        e = np.zeros(3)
        e[k] = 1.0
        v = e.copy()
        for c in cols:
            v -= (c @ e) * c
        nv = np.linalg.norm(v)
        if nv > spec.epsilon_num:
            cols.append(v / nv)
    U = np.column_stack(cols)
    for j in range(3):
        if U[:, j] @ spec.prev_U[:, j] < 0.0:
            U[:, j] = -U[:, j]
    spec.prev_U = U.copy()
    return U


def damping_matrix(U: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """D = U diag(xi) U^T, symmetric PSD with eigenvalues xi."""
    U = np.asarray(U, dtype=float)
    D = (U * np.asarray(xi, dtype=float)) @ U.T
    return 0.5 * (D + D.T)


def tracking_force(ydot_msr: np.ndarray, ydot_ekf: np.ndarray,
                   D: np.ndarray) -> np.ndarray:
    """Velocity-tracking control force.

    The damping acts on the velocity error; the applied force opposes it
    (F = -D (ydot_msr - ydot_ekf)), so exact tracking draws zero force and
    the quadratic form the error sees is dissipative.
    """
    err = np.asarray(ydot_msr, dtype=float) - np.asarray(ydot_ekf, dtype=float)
    return -np.asarray(D, dtype=float) @ err


def to_joint_torques(force: np.ndarray, moment: np.ndarray,
                     J: np.ndarray) -> np.ndarray:
    """tau = J^T [force; moment]; pass moment = 0 when a separate
    orientation controller owns the rotational channel."""
    wrench = np.concatenate([np.asarray(force, dtype=float),
                             np.asarray(moment, dtype=float)])
    return np.asarray(J, dtype=float).T @ wrench


def orientation_error(current_quat: np.ndarray, setpoint: OrientationSetpoint) -> np.ndarray:
    """World-frame rotation vector from the setpoint to the current pose."""
    R_cur = matrix_from_quat(current_quat)
    R_des = matrix_from_quat(setpoint.quaternion)
    return rotation_log(R_cur @ R_des.T)


def orientation_pd(current_quat: np.ndarray, qd: np.ndarray, J: np.ndarray,
                   setpoint: OrientationSetpoint) -> np.ndarray:
    """Joint torques of the fixed-setpoint orientation PD regulator."""
    Jw = np.asarray(J, dtype=float)[3:]
    omega = Jw @ np.asarray(qd, dtype=float)
    e = orientation_error(current_quat, setpoint)
    moment = -setpoint.kp * e - setpoint.kd * omega
    return Jw.T @ moment


def variable_cartesian_damping(Lambda: np.ndarray, D_d: np.ndarray,
                               Lambda_d: np.ndarray) -> np.ndarray:
    """Damping that keeps the felt damping ratio equal in every direction.

    Each principal direction of the apparent inertia gets the damping that
    preserves D_d[i]/Lambda_d[i] for the canonical axis it is closest to, so
    an arm that feels heavier along one direction is damped proportionally
    more there.  D_d and Lambda_d are the diagonals of the desired damping
    and inertia.
    """
    Lambda = np.asarray(Lambda, dtype=float)
    D_d = np.atleast_1d(np.asarray(D_d, dtype=float))
    Lambda_d = np.atleast_1d(np.asarray(Lambda_d, dtype=float))
    if D_d.ndim == 2:
        D_d = np.diag(D_d)
    if Lambda_d.ndim == 2:
        Lambda_d = np.diag(Lambda_d)
    w, V = np.linalg.eigh(Lambda)
    # match eigenvectors to canonical axes (one-to-one, dominant overlap)
    row, col = linear_sum_assignment(-np.abs(V))
    ratios = np.empty(3)
    for axis, vec in zip(row, col):
        ratios[vec] = D_d[axis] / Lambda_d[axis]
    D = (V * (ratios * w)) @ V.T
    return 0.5 * (D + D.T)

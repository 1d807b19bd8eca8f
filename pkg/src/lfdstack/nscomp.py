"""Reproduction-stage full-body compliance.

External contact anywhere on the arm is absorbed by the redundant joints:
a friction feedforward on the desired joint velocity plus a damping term on
the joint-velocity deviation, both projected into the kinematic null space
of the full Jacobian so the Cartesian main task keeps its channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .robot import pseudoinverse


@dataclass
class ComplianceGains:
    d_n: float = 1.0       # null-space damping parameter
    alpha_f: float = 0.1   # frictional feedforward gain
    alpha_d: float = 20.0  # damping gain; the compliance-level knob

    def __post_init__(self):
        if self.d_n < 0 or self.alpha_f < 0 or self.alpha_d < 0:
            raise ValueError("compliance gains must be non-negative")


def desired_joint_velocity(J: np.ndarray, ydot_ekf: np.ndarray) -> np.ndarray:
    """Minimum-norm joint velocity realizing the translational command.

    The commanded angular velocity is augmented as exact zeros before the
    (damped) pseudoinverse is applied.
    """
    twist = np.concatenate([np.asarray(ydot_ekf, dtype=float), np.zeros(3)])
    return pseudoinverse(np.asarray(J, dtype=float)) @ twist


def compliance_torque(N: np.ndarray, qd_d: np.ndarray, qd: np.ndarray,
                      gains: ComplianceGains) -> np.ndarray:
    """tau_n = N d_n alpha_f qd_d + N alpha_d (qd_d - qd).

    The first term smoothly compensates joint friction on the redundant
    DOFs; the second dissipates externally injected null-space motion while
    letting the joints give way.
    """
    N = np.asarray(N, dtype=float)
    qd_d = np.asarray(qd_d, dtype=float)
    qd = np.asarray(qd, dtype=float)
    return N @ (gains.d_n * gains.alpha_f * qd_d) + N @ (gains.alpha_d * (qd_d - qd))

"""Teaching-stage null-space optimization.

Builds the composite posture cost (directional manipulability, apparent
inertia unification, singularity avoidance), its finite-difference gradient
with the singularity-gated third term, and projects the descent torque
through the dynamically consistent null-space projector so the main task
never sees it (away from singularities).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import robot

LCI_EPS = 1e-6
FD_STEP = 1e-5

# 15% of the workspace-median smallest manipulability eigenvalue of the
# bundled arm (median 0.020 m^2 over uniform random postures)
DEFAULT_R_THR = 0.003


@dataclass
class OptimizationWeights:
    """Cost weights, gate gains, and torque gains for the teaching stage."""

    w1: float = 1.0
    w2: float = 3.0
    w3: float = 3.0
    mu_bar: float = 2.0
    u: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    r_thr: float = DEFAULT_R_THR
    kp: float = 50.0
    kd: float = 5.0
    alpha_ns: float = 1.0
    alpha_f: float = 0.1
    k_d: float = 2.0
    t_init: float = 3.0
    t_anneal: float = 1.0
    lci_eps: float = LCI_EPS
    # torque budget for the descent term: the raw cost gradient can spike by
    # orders of magnitude near ill-conditioned postures, which no actuator
    # could follow; the direction is kept, the magnitude saturated (N m)
    grad_clip: float = 5.0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.u /= np.linalg.norm(self.u)
        for w in (self.w1, self.w2, self.w3):
            if not 1.0 <= w <= 5.0:
                raise ValueError("cost weights must lie within [1, 5]")
        if self.mu_bar < 1.0:
            raise ValueError("mu_bar must be >= 1")
        if not 1.0 <= self.k_d <= 3.0:
            raise ValueError("joint damping gain must lie within [1, 3]")
        if self.kp <= 0 or self.kd <= 0:
            raise ValueError("gate gains must be positive")


def _components_batch(model, Q, u, mu_bar, eps):
    """(C1, C2, C3, r_min) for a batch of configurations Q (..., n)."""
    Rs, os_, zs, coms, ee_p, _ = robot._chain(model, Q)
    M = robot._mass_from_chain(model, Rs, os_, zs, coms)
    jv = np.swapaxes(np.cross(zs, ee_p[..., None, :] - os_), -1, -2)
    ups = jv @ np.swapaxes(jv, -1, -2)
    c1 = np.sqrt(np.einsum("i,...ij,j->...", u, ups, u))
    A = jv @ np.linalg.solve(M, np.swapaxes(jv, -1, -2))
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    w, V = np.linalg.eigh(A)
    floor = np.maximum(w[..., -1:], 1e-12) / robot.LAMBDA_COND_CAP
    w = np.maximum(w, floor)
    lam = (V / w[..., None, :]) @ np.swapaxes(V, -1, -2)
    diag = np.sort(np.diagonal(lam, axis1=-2, axis2=-1), axis=-1)[..., ::-1]
    dbar = 0.5 * (diag[..., 0] + diag[..., 1])
    c2 = 0.5 * mu_bar * ((diag[..., 0] - dbar) ** 2
                         + (diag[..., 1] - dbar) ** 2 + diag[..., 2] ** 2)
    ew = np.linalg.eigvalsh(ups)
    c3 = ew[..., 0] / (ew[..., -1] + eps)
    return c1, c2, c3, ew[..., 0]


def directional_manipulability(model, q, u) -> float:
    """C1 = sqrt(u^T Upsilon u): manipulability ellipsoid radius along u."""
    u = np.asarray(u, dtype=float)
    ups = robot.manipulability_matrix(model, q)
    return float(np.sqrt(u @ ups @ u))


def mdci(model, q, mu_bar: float = 2.0) -> float:
    """Apparent-inertia unification cost.

    The two dominant diagonal entries of the apparent inertia are penalized
    toward their mean; the smallest enters the residual directly.
    """
    lam = robot.apparent_inertia(model, q)
    d = np.sort(np.diag(lam))[::-1]
    dbar = 0.5 * (d[0] + d[1])
    e = np.array([d[0] - dbar, d[1] - dbar, d[2]])
    return float(0.5 * mu_bar * (e @ e))


def lci(model, q, eps: float = LCI_EPS) -> float:
    """Local conditioning index of the manipulability matrix, in [0, 1).

    Eigenvalues of Upsilon stand in for singular values of Jv (squared), and
    the small positive bias keeps the gradient finite at rank drops.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    w = np.linalg.eigvalsh(robot.manipulability_matrix(model, q))
    return float(w[0] / (w[-1] + eps))


def smallest_manipulability_eig(model, q) -> float:
    return float(np.linalg.eigvalsh(robot.manipulability_matrix(model, q))[0])


def singularity_gate(r_min: float, r_min_rate: float, r_thr: float,
                     kp: float, kd: float) -> float:
    """Scale for the singularity-avoidance gradient.

    Zero while r_min stays above the threshold; below it a PD law on the
    violation depth (never negative, so the gate cannot attract toward the
    singularity).
    """
    if r_min >= r_thr:
        return 0.0
    delta = r_thr - r_min
    delta_rate = -r_min_rate
    return max(kp * delta + kd * delta_rate, 0.0)


class GateTracker:
    """Per-control-loop memory for the gate's violation rate."""

    def __init__(self, weights: OptimizationWeights):
        self.weights = weights
        self.prev_r_min = None

    def update(self, r_min: float, dt: float) -> float:
        rate = 0.0 if self.prev_r_min is None else (r_min - self.prev_r_min) / dt
        self.prev_r_min = r_min
        return singularity_gate(r_min, rate, self.weights.r_thr,
                                self.weights.kp, self.weights.kd)


def initial_phase_scale(t: float, weights: OptimizationWeights) -> float:
    """Weight schedule of the directional-manipulability term: full during
    the initial phase, annealed linearly to zero afterwards."""
    if t <= weights.t_init:
        return 1.0
    if t >= weights.t_init + weights.t_anneal:
        return 0.0
    return 1.0 - (t - weights.t_init) / weights.t_anneal


def cost_gradient_parts(model, q, weights: OptimizationWeights,
                        gate_a: float | None = None, c1_scale: float = 1.0,
                        fd_step: float = FD_STEP):
    """(C, posture gradient, singularity gradient) of the composite cost.

    The posture part carries the directional and inertia-unification terms,
    the singularity part is the gate-scaled conditioning term; both come
    from one batched central-difference sweep over the joints.
    """
    q = np.asarray(q, dtype=float)
    n = model.n
    eye = np.eye(n)
    Q = np.concatenate([q[None, :], q[None, :] + fd_step * eye,
                        q[None, :] - fd_step * eye])
    c1, c2, c3, rmin = _components_batch(model, Q, weights.u,
                                         weights.mu_bar, weights.lci_eps)
    if gate_a is None:
        gate_a = singularity_gate(float(rmin[0]), 0.0, weights.r_thr,
                                  weights.kp, weights.kd)
    value = float(-weights.w1 * c1[0] + weights.w2 * c2[0] - weights.w3 * c3[0])
    d1 = (c1[1:n + 1] - c1[n + 1:]) / (2.0 * fd_step)
    d2 = (c2[1:n + 1] - c2[n + 1:]) / (2.0 * fd_step)
    d3 = (c3[1:n + 1] - c3[n + 1:]) / (2.0 * fd_step)
    grad_posture = -weights.w1 * c1_scale * d1 + weights.w2 * d2
    grad_gate = -weights.w3 * gate_a * d3
    return value, grad_posture, grad_gate


def total_cost_gradient(model, q, weights: OptimizationWeights,
                        gate_a: float | None = None, c1_scale: float = 1.0,
                        fd_step: float = FD_STEP):
    """Composite cost C = -w1 C1 + w2 C2 - w3 C3 and its gradient.

    The gradient is central finite differences over the joints; the
    singularity term's gradient is scaled by the gate output and the
    directional term by the initial-phase schedule.  Returns (C, grad).
    """
    value, grad_posture, grad_gate = cost_gradient_parts(
        model, q, weights, gate_a=gate_a, c1_scale=c1_scale, fd_step=fd_step)
    return value, grad_posture + grad_gate


def nullspace_opt_torque(model, q, qd, weights: OptimizationWeights,
                         gate_a: float | None = None,
                         c1_scale: float = 1.0) -> np.ndarray:
    """Posture-optimization torque, dynamically consistent.

    Descent direction of the composite cost plus friction feedforward and
    joint damping, all pushed through N_dyn so the task-space acceleration
    stays untouched.
    """
    qd = np.asarray(qd, dtype=float)
    _, grad_posture, grad_gate = cost_gradient_parts(model, q, weights,
                                                     gate_a=gate_a,
                                                     c1_scale=c1_scale)
    nd = robot.dyn_consistent_projector(model, q)
    inner = (descent_torque(grad_posture, grad_gate, weights)
             + weights.alpha_f * qd - weights.k_d * qd)
    return nd @ inner


def descent_torque(grad_posture, grad_gate,
                   weights: OptimizationWeights) -> np.ndarray:
    """Descent direction with the posture terms on the torque budget.

    The posture gradient can spike by orders of magnitude near
    ill-conditioned postures and is saturated; the singularity repulsion is
    already scaled by the gate PD, whose gains set the repulsion strength,
    and passes unclipped.
    """
    step = weights.alpha_ns * (-np.asarray(grad_posture, dtype=float))
    peak = np.abs(step).max()
    if peak > weights.grad_clip:
        step = step * (weights.grad_clip / peak)
    return step + weights.alpha_ns * (-np.asarray(grad_gate, dtype=float))

"""Kinematics, dynamics, and redundancy algebra for a 7-DOF serial arm.

Every configuration-dependent matrix the controllers consume (J, M, C, g,
apparent inertia, null-space projectors) comes from here.  All functions are
pure in (model, q, qdot) and safe for concurrent read-only use.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .errors import ConfigError, SingularityError

GRAVITY = np.array([0.0, 0.0, -9.81])

# Damped least squares engages below this smallest singular value.
SIGMA_MIN_THRESHOLD = 1e-3

# Eigenvalue condition cap used when inverting Jv M^-1 Jv^T.
LAMBDA_COND_CAP = 1e8

# Step for the complex-step derivative of the mass matrix (exact to roundoff).
_CSTEP = 1e-30


@dataclass
class RobotModel:
    """Parameter set for an n-joint serial manipulator (revolute joints).

    Joint i sits at ``joint_offsets[i]`` expressed in the parent frame and
    rotates about the unit axis ``joint_axes[i]`` expressed in its own frame.
    Link i extends from joint i; its COM and inertia are expressed in frame i.
    """

    joint_offsets: np.ndarray   # (n, 3) m
    joint_axes: np.ndarray      # (n, 3) unit
    tool_offset: np.ndarray     # (3,)  m, EE point in the last frame
    masses: np.ndarray          # (n,)  kg
    coms: np.ndarray            # (n, 3) m, in link frame
    inertias: np.ndarray        # (n, 3, 3) kg m^2, about COM, link frame
    q_limits: np.ndarray        # (n, 2) rad
    qd_limits: np.ndarray       # (n,)  rad/s
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    # reflected rotor/gear inertia per joint, added on the mass matrix
    # diagonal (harmonic-drive class actuators dominate the felt inertia)
    drive_inertia: np.ndarray = field(default_factory=lambda: np.full(7, 0.15))

    def __post_init__(self):
        for name in ("joint_offsets", "joint_axes", "tool_offset", "masses",
                     "coms", "inertias", "q_limits", "qd_limits", "gravity",
                     "drive_inertia"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.drive_inertia < 0.0):
            raise ConfigError("drive inertia must be non-negative")
        n = self.n
        if self.joint_axes.shape != (n, 3):
            raise ConfigError("joint_axes shape mismatch")
        if np.any(self.masses <= 0.0):
            raise ConfigError("every link mass must be positive")
        for i, I in enumerate(self.inertias):
            if not np.allclose(I, I.T, atol=1e-12):
                raise ConfigError(f"inertia {i} not symmetric")
            if np.any(np.linalg.eigvalsh(I) <= 0.0):
                raise ConfigError(f"inertia {i} not positive definite")
        if np.any(self.q_limits[:, 0] >= self.q_limits[:, 1]):
            raise ConfigError("joint limits must satisfy lower < upper")
        norms = np.linalg.norm(self.joint_axes, axis=1)
        self.joint_axes = self.joint_axes / norms[:, None]

    @property
    def n(self) -> int:
        return self.joint_offsets.shape[0]

    def to_dict(self) -> dict:
        return {
            "joint_offsets": self.joint_offsets.tolist(),
            "joint_axes": self.joint_axes.tolist(),
            "tool_offset": self.tool_offset.tolist(),
            "masses": self.masses.tolist(),
            "coms": self.coms.tolist(),
            "inertias": self.inertias.tolist(),
            "q_limits": self.q_limits.tolist(),
            "qd_limits": self.qd_limits.tolist(),
            "gravity": self.gravity.tolist(),
            "drive_inertia": self.drive_inertia.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobotModel":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass
class JointState:
    """Joint angles and velocities."""

    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))):
            raise ConfigError("joint state must be finite")

    def copy(self) -> "JointState":
        return JointState(self.q.copy(), self.qd.copy())


@dataclass
class TaskFrames:
    """Bundle of configuration-dependent matrices at one joint state."""

    position: np.ndarray    # (3,)
    quaternion: np.ndarray  # (4,) scalar-first, unit
    J: np.ndarray           # (6, n) geometric, linear rows first
    Jv: np.ndarray          # (3, n)
    M: np.ndarray           # (n, n)
    Cmat: np.ndarray        # (n, n)
    g: np.ndarray           # (n,)
    Lambda: np.ndarray      # (3, 3) apparent inertia
    Upsilon: np.ndarray     # (3, 3) Jv Jv^T


def _default_model() -> RobotModel:
    # 7-DOF arm with LWR-like proportions: ~1 m reach, alternating
    # yaw/pitch axes, shoulder and wrist joint pairs nearly coincident.
    d = [0.31, 0.0, 0.40, 0.0, 0.39, 0.0, 0.08]
    offsets = np.array([[0.0, 0.0, di] for di in d])
    axes = np.array([
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ])
    masses = np.array([2.7, 2.7, 2.4, 2.4, 1.7, 1.6, 1.0])
    # COM roughly halfway to the next joint; small lateral offset on the
    # zero-length links so their inertia still couples realistically.
    coms = np.array([
        [0.0, 0.02, 0.0],
        [0.0, -0.03, 0.20],
        [0.0, 0.02, 0.0],
        [0.0, -0.03, 0.19],
        [0.0, 0.02, 0.0],
        [0.0, -0.02, 0.04],
        [0.0, 0.0, 0.04],
    ])
    inertias = []
    for m, len_z in zip(masses, [0.1, 0.40, 0.1, 0.39, 0.1, 0.1, 0.08]):
        ixx = m * (len_z ** 2 / 12.0 + 0.002)
        izz = m * 0.002
        inertias.append(np.diag([ixx, ixx, izz]))
    q_lim = np.array([[-2.97, 2.97], [-2.09, 2.09], [-2.97, 2.97],
                      [-2.09, 2.09], [-2.97, 2.97], [-2.09, 2.09],
                      [-2.97, 2.97]])
    qd_lim = np.array([1.9, 1.9, 2.2, 2.2, 3.1, 3.1, 3.1])
    return RobotModel(offsets, axes, np.array([0.0, 0.0, 0.06]),
                      masses, coms, np.array(inertias), q_lim, qd_lim)


_DEFAULT = None


def default_model() -> RobotModel:
    """The bundled 7-DOF arm (shared immutable instance)."""
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = _default_model()
    return _DEFAULT


def load_model(path) -> RobotModel:
    """Load robot parameters from a YAML file (schema: RobotModel.to_dict)."""
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"robot config {path} is not a mapping")
    try:
        return RobotModel.from_dict(data)
    except (TypeError, KeyError) as e:
        raise ConfigError(f"robot config {path}: {e}") from None


def save_model(model: RobotModel, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(model.to_dict(), f, sort_keys=False)


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------

def _skew(a: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])


def _rot_terms(model: RobotModel):
    # Rodrigues split R(q) = P + cos(q) (I - P) + sin(q) [a]x with P = a a^T;
    # the three constant parts are cached on the model instance.
    cached = getattr(model, "_rot_cache", None)
    if cached is None:
        P = np.einsum("ni,nj->nij", model.joint_axes, model.joint_axes)
        K = np.stack([_skew(a) for a in model.joint_axes])
        cached = (P, np.eye(3) - P, K)
        object.__setattr__(model, "_rot_cache", cached)
    return cached


def _chain(model: RobotModel, q: np.ndarray):
    """FK pass. q has shape (..., n).

    Returns world-frame per-joint rotation R (..., n, 3, 3), joint origins
    o (..., n, 3), joint axes z (..., n, 3), link COMs (..., n, 3), and the
    EE position/rotation.  q may be complex (complex-step derivatives).
    """
    q = np.asarray(q)
    batch = q.shape[:-1]
    n = model.n
    dtype = q.dtype if np.iscomplexobj(q) else float
    P, Q_, K = _rot_terms(model)
    c = np.cos(q)[..., None, None]
    s = np.sin(q)[..., None, None]
    Rloc = P + c * Q_ + s * K                       # (..., n, 3, 3)
    R = np.broadcast_to(np.eye(3, dtype=dtype), batch + (3, 3)).copy()
    p = np.zeros(batch + (3,), dtype=dtype)
    Rs = np.empty(batch + (n, 3, 3), dtype=dtype)
    os_ = np.empty(batch + (n, 3), dtype=dtype)
    for i in range(n):
        p = p + R @ model.joint_offsets[i]
        R = R @ Rloc[..., i, :, :]
        Rs[..., i, :, :] = R
        os_[..., i, :] = p
    zs = np.einsum("...nij,nj->...ni", Rs, model.joint_axes)
    coms = os_ + np.einsum("...nij,nj->...ni", Rs, model.coms)
    ee_p = p + R @ model.tool_offset
    return Rs, os_, zs, coms, ee_p, R


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix."""
    t = np.trace(R)
    if t > 0.0:
        w = 0.5 * np.sqrt(1.0 + t)
        f = 0.25 / w
        q = np.array([w, f * (R[2, 1] - R[1, 2]), f * (R[0, 2] - R[2, 0]),
                      f * (R[1, 0] - R[0, 1])])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        q = np.empty(4)
        q[1 + i] = 0.5 * s
        f = 0.25 / (0.5 * s)
        q[0] = f * (R[k, j] - R[j, k])
        q[1 + j] = f * (R[j, i] + R[i, j])
        q[1 + k] = f * (R[k, i] + R[i, k])
    q /= np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return q


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(c)
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near pi the off-diagonal formula degenerates; use the diagonal
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        i = int(np.argmax(axis))
        axis = A[:, i] / axis[i] if axis[i] > 0 else np.zeros(3)
        axis /= np.linalg.norm(axis)
        return angle * axis
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return angle / (2.0 * np.sin(angle)) * v


def forward_kinematics(model: RobotModel, q: np.ndarray):
    """EE pose for joint angles q. Returns (position (3,), quaternion (4,))."""
    _, _, _, _, ee_p, ee_R = _chain(model, np.asarray(q, dtype=float))
    return ee_p, quat_from_matrix(ee_R)


def jacobian(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Geometric 6xn Jacobian of the EE, linear velocity rows first."""
    _, os_, zs, _, ee_p, _ = _chain(model, np.asarray(q, dtype=float))
    jv = np.cross(zs, ee_p[None, :] - os_).T
    return np.vstack([jv, zs.T])


def translational_jacobian(model: RobotModel, q: np.ndarray) -> np.ndarray:
    return jacobian(model, q)[:3]


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

def _link_jacobians(model: RobotModel, Rs, os_, zs, coms):
    """Per-link COM Jacobians, batched.

    Returns Jv (..., n, 3, n) and Jw (..., n, 3, n); column j of link i is
    zero for j > i.
    """
    n = model.n
    diff = coms[..., :, None, :] - os_[..., None, :, :]       # (...,link,joint,3)
    jv = np.cross(zs[..., None, :, :], diff)                  # (...,link,joint,3)
    mask = np.tril(np.ones((n, n)))                           # joint j <= link i
    jv = jv * mask[..., :, :, None]
    jw = np.broadcast_to(zs[..., None, :, :], jv.shape) * mask[..., :, :, None]
    return np.swapaxes(jv, -1, -2), np.swapaxes(jw, -1, -2)


def _mass_matrix_raw(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Mass matrix for batched (and possibly complex) q of shape (..., n)."""
    Rs, os_, zs, coms, _, _ = _chain(model, q)
    return _mass_from_chain(model, Rs, os_, zs, coms)


def _mass_from_chain(model: RobotModel, Rs, os_, zs, coms) -> np.ndarray:
    """Mass matrix assembly from an existing FK pass (batched)."""
    Jv, Jw = _link_jacobians(model, Rs, os_, zs, coms)
    n = model.n
    Iw = Rs @ model.inertias @ np.swapaxes(Rs, -1, -2)
    # sum_l m_l Jv_l^T Jv_l + Jw_l^T Iw_l Jw_l, flattened over (link, axis)
    batch = Jv.shape[:-3]
    a = Jv.reshape(batch + (n * 3, n))
    b = (Jv * model.masses[:, None, None]).reshape(batch + (n * 3, n))
    M = np.swapaxes(a, -1, -2) @ b
    c = Jw.reshape(batch + (n * 3, n))
    d = (Iw @ Jw).reshape(batch + (n * 3, n))
    M += np.swapaxes(c, -1, -2) @ d
    M += np.diag(model.drive_inertia)
    return M


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    M = _mass_matrix_raw(model, np.asarray(q, dtype=float))
    return 0.5 * (M + M.T)


def mass_matrix_gradient(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """dM/dq as a (n, n, n) tensor T[k] = dM/dq_k, via complex step."""
    q = np.asarray(q, dtype=float)
    n = model.n
    qc = q[None, :] + 1j * _CSTEP * np.eye(n)
    Mc = _mass_matrix_raw(model, qc)
    T = Mc.imag / _CSTEP
    return 0.5 * (T + np.swapaxes(T, -1, -2))


def coriolis_matrix(model: RobotModel, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """Coriolis/centrifugal matrix from Christoffel symbols.

    Built so that Mdot - 2C is skew-symmetric exactly.
    """
    qd = np.asarray(qd, dtype=float)
    T = mass_matrix_gradient(model, q)
    t1 = np.einsum("kij,k->ij", T, qd)
    t2 = np.einsum("jik,k->ij", T, qd)
    t3 = np.einsum("ijk,k->ij", T, qd)
    return 0.5 * (t1 + t2 - t3)


def gravity_torques(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Joint torques that gravity exerts on the arm (g in M qdd + C qd + g = tau)."""
    Rs, os_, zs, coms, _, _ = _chain(model, np.asarray(q, dtype=float))
    Jv, _ = _link_jacobians(model, Rs, os_, zs, coms)
    return -np.einsum("l,lai,a->i", model.masses, Jv, model.gravity)


def mass_coriolis(model: RobotModel, q: np.ndarray, qd: np.ndarray):
    """(M, Cmat) at one joint state; one batched complex-step evaluation."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    n = model.n
    qc = np.concatenate([q[None, :].astype(complex), q[None, :] + 1j * _CSTEP * np.eye(n)])
    Mc = _mass_matrix_raw(model, qc)
    M = Mc[0].real
    M = 0.5 * (M + M.T)
    T = Mc[1:].imag / _CSTEP
    T = 0.5 * (T + np.swapaxes(T, -1, -2))
    t1 = np.einsum("kij,k->ij", T, qd)
    t2 = np.einsum("jik,k->ij", T, qd)
    t3 = np.einsum("ijk,k->ij", T, qd)
    C = 0.5 * (t1 + t2 - t3)
    return M, C


def dynamics(model: RobotModel, q: np.ndarray, qd: np.ndarray):
    """(M, Cmat, g) at one joint state."""
    M, C = mass_coriolis(model, q, qd)
    return M, C, gravity_torques(model, q)


def kinetic_energy(model: RobotModel, q: np.ndarray, qd: np.ndarray) -> float:
    qd = np.asarray(qd, dtype=float)
    return 0.5 * float(qd @ mass_matrix(model, q) @ qd)


def potential_energy(model: RobotModel, q: np.ndarray) -> float:
    _, _, _, coms, _, _ = _chain(model, np.asarray(q, dtype=float))
    return -float(np.sum(model.masses * (coms @ model.gravity)))


# ---------------------------------------------------------------------------
# redundancy algebra
# ---------------------------------------------------------------------------

def _damping_factor(sigma_min: float, threshold: float) -> float:
    if sigma_min >= threshold:
        return 0.0
    return 0.5 * threshold * (1.0 - sigma_min / threshold)


def pseudoinverse(J: np.ndarray, threshold: float = SIGMA_MIN_THRESHOLD) -> np.ndarray:
    """Damped Moore-Penrose pseudoinverse.

    Exact pinv while the smallest singular value stays above ``threshold``;
    below it the damping ramps up linearly, which bounds ||J+|| by
    1/(2 lambda) near rank loss.
    """
    U, s, Vt = np.linalg.svd(np.asarray(J, dtype=float), full_matrices=False)
    lam = _damping_factor(float(s[-1]), threshold)
    inv_s = s / (s * s + lam * lam) if lam > 0.0 else np.divide(
        1.0, s, out=np.zeros_like(s), where=s > 1e-14)
    return Vt.T @ np.diag(inv_s) @ U.T


def nullspace_projector(J: np.ndarray, threshold: float = SIGMA_MIN_THRESHOLD) -> np.ndarray:
    """Kinematic null-space projector N = I - J+ J."""
    J = np.asarray(J, dtype=float)
    return np.eye(J.shape[1]) - pseudoinverse(J, threshold) @ J


def apparent_inertia(model: RobotModel, q: np.ndarray,
                     cond_cap: float = LAMBDA_COND_CAP) -> np.ndarray:
    """Task-space apparent inertia Lambda = (Jv M^-1 Jv^T)^-1, 3x3 SPD.

    Near singularities the inverse is damped by flooring eigenvalues of
    Jv M^-1 Jv^T at lam_max/cond_cap, which keeps Lambda finite and SPD.
    """
    Jv = translational_jacobian(model, q)
    M = mass_matrix(model, q)
    A = Jv @ np.linalg.solve(M, Jv.T)
    A = 0.5 * (A + A.T)
    if not np.all(np.isfinite(A)):
        raise SingularityError("apparent inertia could not be stabilized")
    w, V = np.linalg.eigh(A)
    floor = max(float(w[-1]), 1e-12) / cond_cap
    w = np.maximum(w, floor)
    return (V / w) @ V.T


def dyn_projector_from_matrices(Jv: np.ndarray, M: np.ndarray,
                                cond_cap: float = LAMBDA_COND_CAP) -> np.ndarray:
    """N_dyn = I - Jv^T Jbar^T from precomputed Jv and M."""
    Jv = np.asarray(Jv, dtype=float)
    A = Jv @ np.linalg.solve(M, Jv.T)
    A = 0.5 * (A + A.T)
    if not np.all(np.isfinite(A)):
        raise SingularityError("apparent inertia could not be stabilized")
    w, V = np.linalg.eigh(A)
    floor = max(float(w[-1]), 1e-12) / cond_cap
    Lam = (V / np.maximum(w, floor)) @ V.T
    jbar_t = Lam @ Jv @ np.linalg.inv(M)
    return np.eye(M.shape[0]) - Jv.T @ jbar_t


def dyn_consistent_projector(model: RobotModel, q: np.ndarray,
                             cond_cap: float = LAMBDA_COND_CAP) -> np.ndarray:
    """Dynamically consistent null-space projector N_dyn = I - Jv^T Jbar^T.

    Jbar = M^-1 Jv^T Lambda; torques through N_dyn produce zero task-space
    acceleration (Jv M^-1 N_dyn = 0) wherever Lambda needs no damping.
    """
    Jv = translational_jacobian(model, q)
    M = mass_matrix(model, q)
    return dyn_projector_from_matrices(Jv, M, cond_cap)


def manipulability_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Upsilon = Jv Jv^T, symmetric PSD 3x3."""
    Jv = translational_jacobian(model, q)
    U = Jv @ Jv.T
    return 0.5 * (U + U.T)


def task_frames(model: RobotModel, q: np.ndarray, qd: np.ndarray) -> TaskFrames:
    """Aggregate every controller-facing matrix at one joint state."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    _, os_, zs, _, ee_p, ee_R = _chain(model, q)
    jv = np.cross(zs, ee_p[None, :] - os_).T
    J = np.vstack([jv, zs.T])
    M, C, g = dynamics(model, q, qd)
    A = jv @ np.linalg.solve(M, jv.T)
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    floor = max(float(w[-1]), 1e-12) / LAMBDA_COND_CAP
    Lam = (V / np.maximum(w, floor)) @ V.T
    return TaskFrames(position=ee_p, quaternion=quat_from_matrix(ee_R),
                      J=J, Jv=jv, M=M, Cmat=C, g=g, Lambda=Lam,
                      Upsilon=0.5 * (jv @ jv.T + (jv @ jv.T).T))


def solve_ik(model: RobotModel, target_pos: np.ndarray,
             target_quat: np.ndarray | None, q0: np.ndarray,
             tol: float = 1e-10, max_iter: int = 300) -> np.ndarray:
    """Damped least-squares IK for position (and optionally orientation).

    Raises SingularityError when the residual stalls above tolerance.
    """
    q = np.asarray(q0, dtype=float).copy()
    R_des = matrix_from_quat(target_quat) if target_quat is not None else None
    for _ in range(max_iter):
        _, os_, zs, _, ee_p, ee_R = _chain(model, q)
        jv = np.cross(zs, ee_p[None, :] - os_).T
        err_p = np.asarray(target_pos, dtype=float) - ee_p
        if R_des is None:
            err, Jt = err_p, jv
        else:
            err_o = rotation_log(R_des @ ee_R.T)
            err = np.concatenate([err_p, err_o])
            Jt = np.vstack([jv, zs.T])
        if np.linalg.norm(err) < tol:
            return q
        q = q + pseudoinverse(Jt) @ err
    raise SingularityError(
        f"IK did not converge (residual {np.linalg.norm(err):.3e})")

"""Reproduction velocity generation.

The velocity command is assembled in three stages: the diffeomorphism-based
dynamical system (a straight-line attractor in source coordinates pushed
through the fitted map), an offline-calibrated 3x3 modulation gain, and an
online EKF that estimates an additive velocity bias against the original
demonstration.  An optional constant surface-directed term supports contact
tasks.  The generator is a function of position only, never of time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fdm
from .fdm import DemonstrationPath, Diffeomorphism

DEFAULT_ETA = 0.02
DEFAULT_EPSILON = 0.05
DEFAULT_WINDOW = 20
DEFAULT_CLAMP = 5.0

DEFAULT_Q = 1e-4
DEFAULT_R = 1e-6
DEFAULT_P0 = 1e-2
DEFAULT_P_CAP = 1.0

# residuals larger than this are perturbation displacements, not velocity
# bias; they are clipped so the bias estimate cannot blow up (m)
DEFAULT_INNOVATION_CLIP = 0.02
# hard bound on the norm of the bias estimate (m/s); also limits how hard
# the correction can fight the plant's tracking lag around corners
DEFAULT_BIAS_CAP = 0.15

# windowed nearest-point search: look this many samples ahead of the hint
SEARCH_WINDOW = 40
# if the windowed nearest point is farther than this, fall back to a full
# search (perturbation-recovery re-entry), meters
REENTRY_DISTANCE = 0.05


@dataclass
class VelocityModulation:
    """Modulation gain and its offline adaptation parameters."""

    zeta: np.ndarray = field(default_factory=lambda: np.eye(3))
    eta: float = DEFAULT_ETA
    epsilon: float = DEFAULT_EPSILON
    window: int = DEFAULT_WINDOW
    clamp: float = DEFAULT_CLAMP

    def __post_init__(self):
        self.zeta = np.asarray(self.zeta, dtype=float)
        if self.eta <= 0 or self.epsilon <= 0:
            raise ValueError("eta and epsilon must be positive")
        if not np.all(np.isfinite(self.zeta)) or np.abs(self.zeta).max() > self.clamp:
            raise ValueError("zeta entries must be finite and within the clamp")


@dataclass
class EkfState:
    """Velocity-bias filter state: 3-state random-walk EKF."""

    b: np.ndarray = field(default_factory=lambda: np.zeros(3))
    P: np.ndarray = field(default_factory=lambda: DEFAULT_P0 * np.eye(3))
    Q: np.ndarray = field(default_factory=lambda: DEFAULT_Q * np.eye(3))
    R: np.ndarray = field(default_factory=lambda: DEFAULT_R * np.eye(3))
    p_cap: float = DEFAULT_P_CAP
    innovation_clip: float = DEFAULT_INNOVATION_CLIP
    bias_cap: float = DEFAULT_BIAS_CAP

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        for name in ("P", "Q", "R"):
            m = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, 0.5 * (m + m.T))
            if np.any(np.linalg.eigvalsh(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be symmetric positive definite")


@dataclass
class ReproductionState:
    """Where the reproduction currently is relative to the demonstration."""

    y: np.ndarray
    ydot_fdm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ydot_ekf: np.ndarray = field(default_factory=lambda: np.zeros(3))
    nearest_index: int = 0
    t: float = 0.0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)


def fdm_velocity(diffeo: Diffeomorphism, y: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """Dynamical-system velocity at EE position y.

    The preimage of y is attracted straight toward the source goal; the
    source velocity -xhat is pushed through the map Jacobian and scaled by
    the modulation gain.
    """
    x = fdm.inverse(diffeo, y)
    J = fdm.jacobian_of(diffeo, x)
    xhat = x - diffeo.source_goal
    return -np.asarray(zeta, dtype=float) @ (J @ xhat)


def adapt_zeta(demo: DemonstrationPath, diffeo: Diffeomorphism,
               params: VelocityModulation) -> np.ndarray:
    """Offline calibration pass of the modulation gain over the demo.

    At each demo sample the velocity error v_e between the recorded velocity
    and the generated one drives a rank-1 update -v_e m^T (m = J xhat, the
    gain sensitivity direction), normalized by its Frobenius norm.  Updates
    pass through a moving-average filter and the entries are clamped; the
    returned gain is frozen afterwards.
    """
    zeta = params.zeta.copy()
    history = []
    for i in range(demo.n):
        y = demo.points[i]
        x = fdm.inverse(diffeo, y)
        J = fdm.jacobian_of(diffeo, x)
        m = J @ (x - diffeo.source_goal)
        v_fdm = -zeta @ m
        v_e = demo.velocities[i] - v_fdm
        update = -np.outer(v_e, m)
        update /= np.linalg.norm(update) + params.epsilon
        history.append(update)
        if len(history) > params.window:
            history.pop(0)
        filtered = np.mean(history, axis=0)
        zeta = np.clip(zeta + params.eta * filtered, -params.clamp, params.clamp)
    return zeta


def nearest_demo_point(y: np.ndarray, demo: DemonstrationPath,
                       hint: int | None = None,
                       window: int | None = SEARCH_WINDOW):
    """Index and point of the demo sample closest to y.

    With a hint, only [hint, hint + window] is searched, which enforces
    monotone progress along the demo.  hint=None (or window=None) searches
    the whole path.  Ties resolve to the lower index.
    """
    pts = demo.points
    if hint is None or window is None:
        d = np.linalg.norm(pts - np.asarray(y), axis=1)
        idx = int(np.argmin(d))
        return idx, pts[idx]
    lo = max(int(hint), 0)
    hi = min(lo + window + 1, demo.n)
    d = np.linalg.norm(pts[lo:hi] - np.asarray(y), axis=1)
    idx = lo + int(np.argmin(d))
    return idx, pts[idx]


def _project_on_demo(y: np.ndarray, demo: DemonstrationPath, hint: int) -> float:
    """Continuous (fractional-index) projection of y onto the demo polyline,
    restricted to the segments adjacent to the hinted sample."""
    pts = demo.points
    best_f, best_d = float(hint), np.inf
    for i in (hint - 1, hint):
        if i < 0 or i + 1 >= demo.n:
            continue
        a, b = pts[i], pts[i + 1]
        ab = b - a
        u = float(np.clip((y - a) @ ab / (ab @ ab), 0.0, 1.0))
        d = float(np.linalg.norm(a + u * ab - y))
        if d < best_d:
            best_f, best_d = i + u, d
    return best_f


def _demo_point_at(demo: DemonstrationPath, f: float) -> np.ndarray:
    """Demo point at fractional sample index f (clamped, linear interp)."""
    f = min(max(f, 0.0), float(demo.n - 1))
    i = min(int(f), demo.n - 2)
    u = f - i
    return (1.0 - u) * demo.points[i] + u * demo.points[i + 1]


def ekf_correct(state: EkfState, repro: ReproductionState,
                demo: DemonstrationPath, dt: float):
    """One predict/update cycle of the velocity-bias EKF.

    Prediction is a random walk (b constant, P grows by Q dt).  The
    measurement compares the position the uncorrected generator would reach
    in dt against the matched demonstration point advanced by the same dt
    (measurement Jacobian dt*I), so an on-path, correctly-paced reproduction
    has zero residual.  Large residuals are perturbation displacements and
    get clipped; the bias norm is capped.  Returns (state, ydot_ekf).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    # predict
    P = state.P + state.Q * dt
    b = state.b
    # measure against the original demonstration: the matched demo point,
    # advanced along the demo by dt, is where the reproduction should land
    f = _project_on_demo(repro.y, demo, repro.nearest_index)
    target = _demo_point_at(demo, f + dt / demo.dt)
    r = target - (repro.y + repro.ydot_fdm * dt)
    nr = np.linalg.norm(r)
    if nr > state.innovation_clip:
        r = r * (state.innovation_clip / nr)
    # H = dt * I
    S = dt * dt * P + state.R
    K = dt * np.linalg.solve(S.T, P.T).T
    b = b + K @ (r - dt * b)
    nb = np.linalg.norm(b)
    if nb > state.bias_cap:
        b = b * (state.bias_cap / nb)
    # Joseph form keeps P symmetric positive definite over long runs
    A = np.eye(3) - dt * K
    P = A @ P @ A.T + K @ state.R @ K.T
    P = 0.5 * (P + P.T)
    if np.trace(P) > state.p_cap:
        w, V = np.linalg.eigh(P)
        w = np.clip(w, 1e-15, state.p_cap)
        P = (V * w) @ V.T
    state.P = P
    state.b = b
    return state, repro.ydot_fdm + b


def surface_velocity(alpha_c: float, e3: np.ndarray) -> np.ndarray:
    """Constant surface-directed velocity alpha_c * e3 (e3 a unit vector)."""
    e3 = np.asarray(e3, dtype=float)
    if abs(np.linalg.norm(e3) - 1.0) > 1e-6:
        raise ValueError("surface normal must be a unit vector")
    return alpha_c * e3


class ReproductionSession:
    """Owns the mutable per-run reproduction state.

    One instance per simulated robot; step() turns the current EE position
    into the corrected velocity command and advances the nearest-point
    cursor (with full re-search when a perturbation displaced the EE).
    """

    def __init__(self, diffeo: Diffeomorphism, demo: DemonstrationPath,
                 zeta: np.ndarray, ekf: EkfState | None = None,
                 use_ekf: bool = True, alpha_c: float = 0.0,
                 surface_normal=(0.0, 0.0, -1.0)):
        self.diffeo = diffeo
        self.demo = demo
        self.zeta = np.asarray(zeta, dtype=float)
        self.ekf = ekf if ekf is not None else EkfState()
        self.use_ekf = use_ekf
        self.surface = surface_velocity(alpha_c, surface_normal) if alpha_c else None
        self.state = ReproductionState(y=demo.points[0].copy())

    def step(self, y: np.ndarray, dt: float) -> np.ndarray:
        s = self.state
        s.y = np.asarray(y, dtype=float)
        idx, pt = nearest_demo_point(s.y, self.demo, s.nearest_index)
        if np.linalg.norm(pt - s.y) > REENTRY_DISTANCE:
            # perturbation pushed us off the path: re-enter at the global
            # nearest point, allowing the cursor to move backwards
            idx, _ = nearest_demo_point(s.y, self.demo, hint=None)
        s.nearest_index = idx
        s.ydot_fdm = fdm_velocity(self.diffeo, s.y, self.zeta)
        if self.use_ekf:
            _, v = ekf_correct(self.ekf, s, self.demo, dt)
        else:
            v = s.ydot_fdm.copy()
        if self.surface is not None:
            v = v + self.surface
        s.ydot_ekf = v
        s.t += dt
        return v


def integrate_reproduction(session: ReproductionSession, y0: np.ndarray,
                           duration: float, dt: float):
    """Kinematic rollout of the generator (y advances at the commanded
    velocity).  Returns (times, positions) including the start point."""
    y = np.asarray(y0, dtype=float).copy()
    steps = int(round(duration / dt))
    ys = np.empty((steps + 1, 3))
    ys[0] = y
    for k in range(steps):
        v = session.step(y, dt)
        y = y + v * dt
        ys[k + 1] = y
    return np.arange(steps + 1) * dt, ys

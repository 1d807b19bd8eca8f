"""Fixed-step forward-dynamics simulation of the torque-controlled arm.

Semi-implicit Euler at a 1 kHz inner rate with the controller held at
200 Hz.  Gravity is compensated exactly inside the plant wrapper (the
controllers operate on the gravity-free model), friction is viscous plus
smoothed Coulomb and always dissipative, and scheduled external
perturbations enter either as EE wrenches through J^T or directly on a
joint.  Everything is deterministic: same inputs, bit-identical traces.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import robot
from .errors import InstabilityAbort
from .robot import RobotModel, JointState

INNER_DT = 0.001
CONTROL_DT = 0.005

DEFAULT_VISCOUS = 0.1
DEFAULT_COULOMB = 0.05
DEFAULT_SMOOTHING = 0.05

HAND_FORCE_CAP = 50.0


@dataclass
class FrictionModel:
    """Viscous + smoothed Coulomb joint friction (dissipative by sign)."""

    viscous: np.ndarray = field(default_factory=lambda: np.full(7, DEFAULT_VISCOUS))
    coulomb: np.ndarray = field(default_factory=lambda: np.full(7, DEFAULT_COULOMB))
    smoothing: float = DEFAULT_SMOOTHING  # rad/s width of the tanh transition

    def __post_init__(self):
        self.viscous = np.asarray(self.viscous, dtype=float)
        self.coulomb = np.asarray(self.coulomb, dtype=float)
        if np.any(self.viscous < 0) or np.any(self.coulomb < 0) or self.smoothing <= 0:
            raise ValueError("friction coefficients must be non-negative")

    def torque(self, qd: np.ndarray) -> np.ndarray:
        return -(self.viscous * qd + self.coulomb * np.tanh(qd / self.smoothing))


@dataclass
class PerturbationEvent:
    """Constant-magnitude pulse within [t_start, t_end].

    target: "ee" applies magnitude * direction (N) through Jv^T;
    an integer applies the magnitude (N m) straight onto that joint.
    """

    t_start: float
    t_end: float
    target: object
    magnitude: float
    direction: np.ndarray | None = None

    def __post_init__(self):
        if self.t_end < self.t_start:
            raise ValueError("perturbation window has negative duration")
        if not np.isfinite(self.magnitude):
            raise ValueError("perturbation magnitude must be finite")
        if self.target == "ee":
            d = np.asarray(self.direction, dtype=float)
            self.direction = d / np.linalg.norm(d)
        else:
            self.target = int(self.target)


@dataclass
class PerturbationSchedule:
    events: list = field(default_factory=list)

    def torque(self, t: float, model: RobotModel, q: np.ndarray) -> np.ndarray:
        tau = np.zeros(model.n)
        jv = None
        for ev in self.events:
            if not ev.t_start <= t < ev.t_end:
                continue
            if ev.target == "ee":
                if jv is None:
                    jv = robot.translational_jacobian(model, q)
                tau += jv.T @ (ev.magnitude * ev.direction)
            else:
                tau[ev.target] += ev.magnitude
        return tau


@dataclass
class SimState:
    """Simulation clock, joint state, and the torques applied this step."""

    t: float
    joints: JointState
    tau_c: np.ndarray = field(default_factory=lambda: np.zeros(7))
    tau_n: np.ndarray = field(default_factory=lambda: np.zeros(7))
    tau_no: np.ndarray = field(default_factory=lambda: np.zeros(7))
    tau_f: np.ndarray = field(default_factory=lambda: np.zeros(7))
    tau_ext: np.ndarray = field(default_factory=lambda: np.zeros(7))


@dataclass
class ControlTorques:
    """Controller outputs by source, held constant between control updates."""

    tau_c: np.ndarray = field(default_factory=lambda: np.zeros(7))
    tau_n: np.ndarray = field(default_factory=lambda: np.zeros(7))
    tau_no: np.ndarray = field(default_factory=lambda: np.zeros(7))

    def total(self) -> np.ndarray:
        return self.tau_c + self.tau_n + self.tau_no


def step(model: RobotModel, state: SimState, control: ControlTorques,
         schedule: PerturbationSchedule | None, friction: FrictionModel | None,
         dt: float = INNER_DT) -> SimState:
    """One semi-implicit Euler step of M qdd + C qd + g = tau.

    Gravity is compensated exactly (g_comp = g), so the torque balance the
    integrator sees is control + external + friction - C qd.  Velocities
    beyond twice the model limit abort the run: the scenario went unstable.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    q = state.joints.q
    qd = state.joints.qd
    tau_ext = (schedule.torque(state.t, model, q) if schedule is not None
               else np.zeros(model.n))
    tau_f = friction.torque(qd) if friction is not None else np.zeros(model.n)
    M, C = robot.mass_coriolis(model, q, qd)
    # exact gravity compensation: the -g + g_comp pair cancels identically,
    # so the gravity vector never enters the torque balance
    rhs = control.total() + tau_ext + tau_f - C @ qd
    qdd = np.linalg.solve(M, rhs)
    qd_new = qd + dt * qdd
    q_new = q + dt * qd_new
    if np.any(np.abs(qd_new) > 2.0 * model.qd_limits):
        raise InstabilityAbort(
            f"joint velocity {np.abs(qd_new).max():.2f} rad/s exceeded twice "
            f"the model limit at t={state.t:.3f}")
    return SimState(t=state.t + dt, joints=JointState(q_new, qd_new),
                    tau_c=control.tau_c, tau_n=control.tau_n,
                    tau_no=control.tau_no, tau_f=tau_f, tau_ext=tau_ext)


def perturbation_torque(schedule: PerturbationSchedule, t: float,
                        model: RobotModel, q: np.ndarray) -> np.ndarray:
    """External torque of the schedule at time t (zero outside windows)."""
    return schedule.torque(t, model, q)


def simulated_hand(target_pos, target_vel, ee_pos, ee_vel,
                   kp: float = 400.0, kd: float = 40.0,
                   cap: float = HAND_FORCE_CAP) -> np.ndarray:
    """Spring-damper stand-in for the human dragging the EE along a target.

    Returns the applied EE force, saturated at the cap (a hand can only
    pull so hard).
    """
    f = kp * (np.asarray(target_pos, dtype=float) - np.asarray(ee_pos, dtype=float)) \
        + kd * (np.asarray(target_vel, dtype=float) - np.asarray(ee_vel, dtype=float))
    n = np.linalg.norm(f)
    if n > cap:
        f = f * (cap / n)
    return f


class Simulator:
    """Control loop runner: controller at control_dt, dynamics at inner dt.

    The controller callback receives (t, JointState) and returns
    ControlTorques; its output is held for the following inner steps.
    Counters expose the rate discipline for verification.
    """

    def __init__(self, model: RobotModel, q0: np.ndarray,
                 schedule: PerturbationSchedule | None = None,
                 friction: FrictionModel | None = None,
                 inner_dt: float = INNER_DT, control_dt: float = CONTROL_DT):
        ratio = control_dt / inner_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("control_dt must be an integer multiple of inner_dt")
        self.model = model
        self.state = SimState(t=0.0, joints=JointState(np.asarray(q0, dtype=float),
                                                       np.zeros(model.n)))
        self.schedule = schedule if schedule is not None else PerturbationSchedule()
        self.friction = friction if friction is not None else FrictionModel()
        self.inner_dt = inner_dt
        self.steps_per_control = int(round(ratio))
        self.inner_steps = 0
        self.control_evals = 0

    def run(self, duration: float, controller, observer=None):
        """Run for duration seconds.  observer(state) is called after every
        inner step when given (trace recording)."""
        n_ctrl = int(round(duration / (self.inner_dt * self.steps_per_control)))
        for _ in range(n_ctrl):
            control = controller(self.state.t, self.state.joints)
            self.control_evals += 1
            for _ in range(self.steps_per_control):
                self.state = step(self.model, self.state, control,
                                  self.schedule, self.friction, self.inner_dt)
                self.inner_steps += 1
                if observer is not None:
                    observer(self.state)
        return self.state

"""Scenario configuration, controller stacks, runners, metrics, exports.

Four scenario kinds mirror the validation experiments:

* learn      - fit the diffeomorphism to a demo CSV and calibrate the gain
* reproduce  - closed-loop reproduction on the simulated arm, optional
               perturbations, optional EKF-off baseline
* teach      - simulated-hand kinesthetic teaching: L-shape force-isotropy
               comparison against a gravity-compensation baseline, plus the
               singularity pull sub-scenario
* comply     - circular main task with joint-4 torque pulses, compliant
               null-space stack against a rigid posture-hold baseline

Every run writes a versioned metrics JSON and plain CSV traces.
"""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import fdm, interaction, motion, nscomp, nsopt, robot, shapes, sim
from .errors import ConfigError, InstabilityAbort

METRICS_SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "LFDSTACK_OUT"

KINDS = ("learn", "reproduce", "teach", "comply")

DEFAULTS = {
    "fdm": {"translations": fdm.DEFAULT_TRANSLATIONS, "mu": fdm.DEFAULT_MU,
            "beta": fdm.DEFAULT_BETA, "resample": fdm.DEFAULT_RESAMPLE},
    "modulation": {"eta": motion.DEFAULT_ETA, "epsilon": motion.DEFAULT_EPSILON,
                   "window": motion.DEFAULT_WINDOW, "clamp": motion.DEFAULT_CLAMP},
    "ekf": {"enabled": True, "q": motion.DEFAULT_Q, "r": motion.DEFAULT_R,
            "p0": motion.DEFAULT_P0, "p_cap": motion.DEFAULT_P_CAP,
            "innovation_clip": motion.DEFAULT_INNOVATION_CLIP,
            "bias_cap": motion.DEFAULT_BIAS_CAP},
    "damping": {"xi": [30.0, 30.0, 30.0], "epsilon_num": interaction.EPSILON_NUM},
    "orientation": {"kp": interaction.DEFAULT_KP_ORI, "kd": interaction.DEFAULT_KD_ORI},
    "optimization": {"w1": 1.0, "w2": 3.0, "w3": 3.0, "mu_bar": 2.0,
                     "u": [0.0, 0.0, 1.0], "r_thr": nsopt.DEFAULT_R_THR,
                     "kp": 50.0, "kd": 5.0, "alpha_ns": 1.0, "alpha_f": 0.1,
                     "k_d": 2.0, "t_init": 3.0, "t_anneal": 1.0,
                     "grad_clip": 5.0},
    "compliance": {"enabled": True, "d_n": 1.0, "alpha_f": 0.1, "alpha_d": 20.0},
    "friction": {"viscous": sim.DEFAULT_VISCOUS, "coulomb": sim.DEFAULT_COULOMB,
                 "smoothing": sim.DEFAULT_SMOOTHING},
    "sim": {"inner_dt": sim.INNER_DT, "control_dt": sim.CONTROL_DT,
            "duration": None},
    "surface": {"alpha_c": 0.0, "normal": [0.0, 0.0, -1.0]},
    "hand": {"kp": 400.0, "kd": 40.0, "cap": sim.HAND_FORCE_CAP,
             "speed": 0.10, "repeats": 5, "segment": 0.20},
    "teach": {"mode": "both", "settle": 4.0, "plane": "xz",
              "d_desired": [40.0, 40.0, 40.0],
              "lambda_desired": [3.0, 3.0, 3.0],
              "pull_speed": 0.04, "pull_cap": 25.0, "pull_duration": 10.0,
              # the pull demo engages the gate well before the kinematic
              # stall so the repulsion, not the reach limit, blocks extension
              "pull_r_thr": 0.04},
    "comply": {"center": [-0.50, 0.0, 0.305], "radius": 0.10, "period": 8.0,
               "k_radial": 4.0, "baseline": True},
    "perturbations": [],
}


@dataclass
class ScenarioConfig:
    kind: str
    out: str = ""
    seed: int = 0
    demo: str | None = None
    model: str | None = None
    robot_config: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        merged = copy.deepcopy(DEFAULTS)
        for section, values in self.params.items():
            if section not in merged:
                raise ConfigError(f"unknown config section {section!r}")
            if section == "perturbations":
                merged[section] = values
                continue
            for key, val in values.items():
                if key not in merged[section]:
                    raise ConfigError(f"unknown key {section}.{key!r}")
                merged[section][key] = val
        self.params = merged
        if not self.out:
            self.out = os.environ.get(OUTPUT_ROOT_ENV, "runs")

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {"kind": self.kind, "out": self.out, "seed": self.seed,
                "demo": self.demo, "model": self.model,
                "robot_config": self.robot_config,
                "params": copy.deepcopy(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {"kind", "out", "seed", "demo", "model", "robot_config", "params"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("config needs a scenario kind")
        return cls(kind=d["kind"], out=d.get("out", ""), seed=d.get("seed", 0),
                   demo=d.get("demo"), model=d.get("model"),
                   robot_config=d.get("robot_config"),
                   params=d.get("params", {}))

    def validate_files(self):
        for label, path in (("demo", self.demo), ("model", self.model),
                            ("robot_config", self.robot_config)):
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"{label} file {path!r} does not exist")

    # -- typed accessors -------------------------------------------------

    def robot_model(self) -> robot.RobotModel:
        if self.robot_config:
            return robot.load_model(self.robot_config)
        return robot.default_model()

    def modulation(self) -> motion.VelocityModulation:
        p = self.params["modulation"]
        return motion.VelocityModulation(eta=p["eta"], epsilon=p["epsilon"],
                                         window=int(p["window"]), clamp=p["clamp"])

    def ekf_state(self) -> motion.EkfState:
        p = self.params["ekf"]
        return motion.EkfState(P=p["p0"] * np.eye(3), Q=p["q"] * np.eye(3),
                               R=p["r"] * np.eye(3), p_cap=p["p_cap"],
                               innovation_clip=p["innovation_clip"],
                               bias_cap=p["bias_cap"])

    def damping_spec(self) -> interaction.DampingSpec:
        p = self.params["damping"]
        return interaction.DampingSpec(xi=np.asarray(p["xi"], dtype=float),
                                       epsilon_num=p["epsilon_num"])

    def orientation_setpoint(self) -> interaction.OrientationSetpoint:
        p = self.params["orientation"]
        return interaction.OrientationSetpoint(kp=p["kp"], kd=p["kd"])

    def optimization_weights(self) -> nsopt.OptimizationWeights:
        p = self.params["optimization"]
        return nsopt.OptimizationWeights(
            w1=p["w1"], w2=p["w2"], w3=p["w3"], mu_bar=p["mu_bar"],
            u=np.asarray(p["u"], dtype=float), r_thr=p["r_thr"], kp=p["kp"],
            kd=p["kd"], alpha_ns=p["alpha_ns"], alpha_f=p["alpha_f"],
            k_d=p["k_d"], t_init=p["t_init"], t_anneal=p["t_anneal"],
            grad_clip=p["grad_clip"])

    def compliance_gains(self) -> nscomp.ComplianceGains:
        p = self.params["compliance"]
        return nscomp.ComplianceGains(d_n=p["d_n"], alpha_f=p["alpha_f"],
                                      alpha_d=p["alpha_d"])

    def friction_model(self) -> sim.FrictionModel:
        p = self.params["friction"]
        return sim.FrictionModel(viscous=np.full(7, p["viscous"]),
                                 coulomb=np.full(7, p["coulomb"]),
                                 smoothing=p["smoothing"])

    def perturbation_schedule(self) -> sim.PerturbationSchedule:
        events = []
        for ev in self.params["perturbations"]:
            events.append(sim.PerturbationEvent(
                t_start=ev["t_start"], t_end=ev["t_end"], target=ev["target"],
                magnitude=ev["magnitude"], direction=ev.get("direction")))
        return sim.PerturbationSchedule(events)


def load_config(path) -> ScenarioConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ConfigError(f"{path} is not a config mapping")
    cfg = ScenarioConfig.from_dict(data)
    cfg.validate_files()
    return cfg


def save_config(cfg: ScenarioConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Measured counterparts of the reported experiment quantities."""

    kind: str
    fdm_mean_error_cm: float | None = None
    fdm_max_error_cm: float | None = None
    fit_seconds: float | None = None
    reproduction_mean_error_cm: float | None = None
    reproduction_max_error_cm: float | None = None
    recovery_time_s: float | None = None
    isotropy_ratio: float | None = None
    isotropy_ratio_baseline: float | None = None
    per_axis_force_n: list | None = None
    per_axis_force_baseline_n: list | None = None
    min_r_min: float | None = None
    r_thr: float | None = None
    resistance_force_max_n: float | None = None
    resistance_monotone: bool | None = None
    max_joint_deviation_deg: float | None = None
    ee_rms_deviation_mm: float | None = None
    ee_rms_deviation_rigid_mm: float | None = None
    z_fluctuation_mm: float | None = None
    runtime_s: float | None = None
    notes: str | None = None

    def to_dict(self) -> dict:
        d = {"schema_version": METRICS_SCHEMA_VERSION}
        for k, v in self.__dict__.items():
            if v is not None:
                d[k] = v
        return d

    def write(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)


def load_metrics(path) -> dict:
    with open(path) as f:
        data = json.load(f)
    if data.get("schema_version") != METRICS_SCHEMA_VERSION:
        raise ConfigError(f"unsupported metrics schema in {path}")
    return data


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

IK_SEED = np.array([np.pi, 0.6, 0.0, 1.2, 0.0, -0.8, 0.0])


def _write_csv(path, header: str, rows) -> None:
    arr = np.asarray(rows, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(0, len(header.split(",")))
    np.savetxt(path, arr, delimiter=",", header=header, comments="")


SIM_TRACE_HEADER = (
    "t," + ",".join(f"q{i}" for i in range(7)) + ","
    + ",".join(f"qd{i}" for i in range(7))
    + ",px,py,pz,qw,qx,qy,qz,"
    + ",".join(f"tau_c{i}" for i in range(7)) + ","
    + ",".join(f"tau_n{i}" for i in range(7)) + ","
    + ",".join(f"tau_no{i}" for i in range(7)) + ","
    + ",".join(f"tau_f{i}" for i in range(7)) + ","
    + ",".join(f"tau_ext{i}" for i in range(7)))

REPRO_TRACE_HEADER = ("t,y0,y1,y2,yd_fdm0,yd_fdm1,yd_fdm2,"
                      "yd_ekf0,yd_ekf1,yd_ekf2,b0,b1,b2,nearest_index")


class TraceRecorder:
    """Collects one sim-trace row per control step."""

    def __init__(self, model):
        self.model = model
        self.rows = []

    def record(self, state: sim.SimState):
        pos, quat = robot.forward_kinematics(self.model, state.joints.q)
        self.rows.append(np.concatenate([
            [state.t], state.joints.q, state.joints.qd, pos, quat,
            state.tau_c, state.tau_n, state.tau_no, state.tau_f, state.tau_ext]))


def _distance_to_path(y, points) -> float:
    return float(np.linalg.norm(points - y, axis=1).min())


def _recovery_time(times, dists, t_release, band, hold=0.5):
    """First time after release at which the error re-enters the band and
    stays inside it for the hold period; None if it never does."""
    for i in np.nonzero(times >= t_release)[0]:
        if dists[i] <= band:
            window = (times >= times[i]) & (times <= times[i] + hold)
            if np.all(dists[window] <= band):
                return float(times[i] - t_release)
    return None


def _ensure_out(cfg: ScenarioConfig) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


# ---------------------------------------------------------------------------
# learn
# ---------------------------------------------------------------------------

def run_learn(cfg: ScenarioConfig) -> MetricsReport:
    """Fit the diffeomorphism and calibrate the modulation gain."""
    if cfg.demo is None:
        raise ConfigError("learn needs a demo CSV")
    out = _ensure_out(cfg)
    p = cfg.params["fdm"]
    demo = fdm.demo_from_csv(cfg.demo, n=int(p["resample"]))
    X = fdm.source_line(demo)
    t0 = time.perf_counter()
    diffeo = fdm.fit(X, demo.points, n_translations=int(p["translations"]),
                     mu=p["mu"], beta=p["beta"])
    fit_seconds = time.perf_counter() - t0
    zeta = motion.adapt_zeta(demo, diffeo, cfg.modulation())
    mean_m, max_m = fdm.matching_error(diffeo, X, demo.points)

    model_path = os.path.join(out, "model.json")
    fdm.save_diffeo(diffeo, model_path, extra={
        "zeta": zeta.tolist(),
        "demo_points": demo.points.tolist(),
        "demo_velocities": demo.velocities.tolist(),
        "demo_dt": demo.dt,
    })
    report = MetricsReport(kind="learn",
                           fdm_mean_error_cm=mean_m * 100.0,
                           fdm_max_error_cm=max_m * 100.0,
                           fit_seconds=fit_seconds)
    report.write(os.path.join(out, "metrics.json"))
    return report


def load_learned(model_path):
    """(diffeo, zeta, demo) from a learn-run model file."""
    diffeo, payload = fdm.load_diffeo(model_path)
    zeta = np.asarray(payload["zeta"], dtype=float)
    demo = fdm.DemonstrationPath(np.asarray(payload["demo_points"]),
                                 np.asarray(payload["demo_velocities"]),
                                 float(payload["demo_dt"]))
    return diffeo, zeta, demo


# ---------------------------------------------------------------------------
# reproduce
# ---------------------------------------------------------------------------

class ReproduceController:
    """Full reproduction stack: velocity generation, direction-parameterized
    damping, orientation PD, null-space compliance."""

    def __init__(self, cfg: ScenarioConfig, model, diffeo, zeta, demo):
        self.model = model
        self.session = motion.ReproductionSession(
            diffeo, demo, zeta, ekf=cfg.ekf_state(),
            use_ekf=bool(cfg.params["ekf"]["enabled"]),
            alpha_c=cfg.params["surface"]["alpha_c"],
            surface_normal=np.asarray(cfg.params["surface"]["normal"], dtype=float))
        self.spec = cfg.damping_spec()
        self.setpoint = cfg.orientation_setpoint()
        self.gains = cfg.compliance_gains()
        self.compliance_on = bool(cfg.params["compliance"]["enabled"])
        self.control_dt = cfg.params["sim"]["control_dt"]
        self.trace = []

    def __call__(self, t, js):
        pos, quat = robot.forward_kinematics(self.model, js.q)
        J = robot.jacobian(self.model, js.q)
        v_msr = J[:3] @ js.qd
        v_cmd = self.session.step(pos, self.control_dt)
        U = interaction.principal_frame(v_cmd, self.spec)
        D = interaction.damping_matrix(U, self.spec.xi)
        F = interaction.tracking_force(v_msr, v_cmd, D)
        tau_c = interaction.to_joint_torques(F, np.zeros(3), J)
        tau_c = tau_c + interaction.orientation_pd(quat, js.qd, J, self.setpoint)
        tau_n = np.zeros(7)
        if self.compliance_on:
            N = robot.nullspace_projector(J)
            qd_d = nscomp.desired_joint_velocity(J, v_cmd)
            tau_n = nscomp.compliance_torque(N, qd_d, js.qd, self.gains)
        s = self.session.state
        self.trace.append(np.concatenate([
            [t], pos, s.ydot_fdm, s.ydot_ekf, self.session.ekf.b,
            [s.nearest_index]]))
        return sim.ControlTorques(tau_c=tau_c, tau_n=tau_n)


def run_reproduce(cfg: ScenarioConfig) -> MetricsReport:
    if cfg.model is None:
        raise ConfigError("reproduce needs a fitted model file")
    out = _ensure_out(cfg)
    model = cfg.robot_model()
    diffeo, zeta, demo = load_learned(cfg.model)
    q0 = robot.solve_ik(model, demo.points[0],
                        cfg.orientation_setpoint().quaternion, IK_SEED,
                        tol=1e-9)
    duration = cfg.params["sim"]["duration"] or demo.duration + 4.0
    schedule = cfg.perturbation_schedule()
    controller = ReproduceController(cfg, model, diffeo, zeta, demo)
    recorder = TraceRecorder(model)
    simulator = sim.Simulator(model, q0, schedule, cfg.friction_model(),
                              inner_dt=cfg.params["sim"]["inner_dt"],
                              control_dt=cfg.params["sim"]["control_dt"])
    steps_per = simulator.steps_per_control
    count = [0]

    def observer(state):
        count[0] += 1
        if count[0] % steps_per == 0:
            recorder.record(state)

    t0 = time.perf_counter()
    simulator.run(duration, controller, observer)
    runtime = time.perf_counter() - t0

    rows = np.asarray(recorder.rows)
    ee = rows[:, 15:18]
    times = rows[:, 0]
    dists = np.array([_distance_to_path(y, demo.points) for y in ee])

    # exclude perturbation windows plus recovery margin from the error stats
    mask = np.ones(len(times), dtype=bool)
    recovery_time = None
    band = 0.02
    for ev in schedule.events:
        mask &= ~((times >= ev.t_start) & (times < ev.t_end + 3.0))
        rec = _recovery_time(times, dists, ev.t_end, band)
        if rec is not None:
            recovery_time = max(recovery_time or 0.0, rec)

    report = MetricsReport(kind="reproduce",
                           reproduction_mean_error_cm=float(dists[mask].mean()) * 100.0,
                           reproduction_max_error_cm=float(dists[mask].max()) * 100.0,
                           recovery_time_s=recovery_time,
                           runtime_s=runtime)
    report.write(os.path.join(out, "metrics.json"))
    _write_csv(os.path.join(out, "sim_trace.csv"), SIM_TRACE_HEADER, recorder.rows)
    _write_csv(os.path.join(out, "reproduction_trace.csv"), REPRO_TRACE_HEADER,
               controller.trace)
    np.savetxt(os.path.join(out, "demo_path.csv"),
               np.column_stack([np.arange(demo.n) * demo.dt, demo.points]),
               delimiter=",", header="t,x,y,z", comments="")
    return report


# ---------------------------------------------------------------------------
# teach
# ---------------------------------------------------------------------------

class TeachController:
    """Teaching stack: simulated hand + posture optimization + variable
    Cartesian damping (or the gravity-compensation baseline)."""

    def __init__(self, cfg: ScenarioConfig, model, follower, optimized: bool):
        self.model = model
        self.follower = follower
        self.optimized = optimized
        self.weights = cfg.optimization_weights()
        self.gate = nsopt.GateTracker(self.weights)
        self.setpoint = cfg.orientation_setpoint()
        hp = cfg.params["hand"]
        self.hand_kp, self.hand_kd, self.hand_cap = hp["kp"], hp["kd"], hp["cap"]
        tp = cfg.params["teach"]
        self.d_desired = np.asarray(tp["d_desired"], dtype=float)
        self.lambda_desired = np.asarray(tp["lambda_desired"], dtype=float)
        self.control_dt = cfg.params["sim"]["control_dt"]
        self.trace = []  # t, ee(3), v(3), f_hand(3), r_min, a, C, C1, C2, C3

    def __call__(self, t, js):
        tf = robot.task_frames(self.model, js.q, js.qd)
        v_msr = tf.Jv @ js.qd
        target_pos, target_vel = self.follower.at(t)
        f_hand = sim.simulated_hand(target_pos, target_vel, tf.position, v_msr,
                                    self.hand_kp, self.hand_kd, self.hand_cap)
        tau_c = tf.Jv.T @ f_hand
        tau_c = tau_c + interaction.orientation_pd(tf.quaternion, js.qd, tf.J,
                                                   self.setpoint)
        tau_no = np.zeros(7)
        r_min = nsopt.smallest_manipulability_eig(self.model, js.q)
        a = c = c1 = c2 = c3 = 0.0
        if self.optimized:
            a = self.gate.update(r_min, self.control_dt)
            scale = nsopt.initial_phase_scale(t, self.weights)
            c, grad = nsopt.total_cost_gradient(self.model, js.q, self.weights,
                                                gate_a=a, c1_scale=scale)
            nd = robot.dyn_projector_from_matrices(tf.Jv, tf.M)
            inner = (nsopt.clipped_descent(grad, self.weights)
                     + self.weights.alpha_f * js.qd - self.weights.k_d * js.qd)
            tau_no = nd @ inner
            D_var = interaction.variable_cartesian_damping(
                tf.Lambda, self.d_desired, self.lambda_desired)
            tau_c = tau_c + tf.Jv.T @ (-D_var @ v_msr)
        self.trace.append(np.concatenate([
            [t], tf.position, v_msr, f_hand, [r_min, a, c, c1, c2, c3]]))
        return sim.ControlTorques(tau_c=tau_c, tau_no=tau_no)


TEACH_TRACE_HEADER = ("t,px,py,pz,vx,vy,vz,fx,fy,fz,r_min,gate_a,C,C1,C2,C3")


def _teach_start_posture(cfg: ScenarioConfig, model):
    origin = np.asarray(shapes.DEMO_ORIGIN, dtype=float) + np.array([0.0, 0.0, 0.05])
    return robot.solve_ik(model, origin, cfg.orientation_setpoint().quaternion,
                          IK_SEED, tol=1e-9), origin


AXES_OF_PLANE = {"xy": (0, 1), "xz": (0, 2)}


def _axis_mean_forces(rows, settle, plane="xz"):
    """Mean |F| per axis over samples where the motion is clearly aligned
    with that axis (the L-shape segments are axis-aligned by construction)."""
    rows = np.asarray(rows)
    t = rows[:, 0]
    v = rows[:, 4:7]
    f = rows[:, 7:10]
    axes = AXES_OF_PLANE[plane]
    speed = np.linalg.norm(v[:, axes], axis=1)
    means = []
    for axis in axes:
        sel = (t > settle) & (speed > 0.02) & (np.abs(v[:, axis]) > 0.7 * speed)
        means.append(float(np.abs(f[sel, axis]).mean()) if np.any(sel) else 0.0)
    return means


def run_teach(cfg: ScenarioConfig) -> MetricsReport:
    out = _ensure_out(cfg)
    model = cfg.robot_model()
    mode = cfg.params["teach"]["mode"]
    report = MetricsReport(kind="teach")
    t_start = time.perf_counter()

    if mode in ("lshape", "both"):
        q0, origin = _teach_start_posture(cfg, model)
        hp = cfg.params["hand"]
        plane = cfg.params["teach"]["plane"]
        waypoints = shapes.lshape_waypoints(origin, hp["segment"], plane)
        settle = cfg.params["teach"]["settle"]
        length = 2.0 * hp["segment"] * 2.0  # there and back
        duration = settle + hp["repeats"] * length / hp["speed"]
        ratios = {}
        for label, optimized in (("optimized", True), ("baseline", False)):
            follower = _DelayedFollower(
                shapes.PathFollower(waypoints, hp["speed"], loop=True), settle)
            controller = TeachController(cfg, model, follower, optimized)
            simulator = sim.Simulator(model, q0, None, cfg.friction_model(),
                                      inner_dt=cfg.params["sim"]["inner_dt"],
                                      control_dt=cfg.params["sim"]["control_dt"])
            simulator.run(duration, controller)
            forces = _axis_mean_forces(controller.trace, settle, plane)
            lo = min(forces)
            ratios[label] = max(forces) / lo if lo > 0 else np.inf
            _write_csv(os.path.join(out, f"teach_{label}.csv"),
                       TEACH_TRACE_HEADER, controller.trace)
            if label == "optimized":
                report.per_axis_force_n = forces
            else:
                report.per_axis_force_baseline_n = forces
        report.isotropy_ratio = ratios["optimized"]
        report.isotropy_ratio_baseline = ratios["baseline"]

    if mode in ("pull", "both"):
        pull = _run_pull(cfg, model, out)
        report.min_r_min = pull["min_r_min"]
        report.r_thr = cfg.params["teach"]["pull_r_thr"]
        report.resistance_force_max_n = pull["max_force"]
        report.resistance_monotone = pull["monotone"]

    report.runtime_s = time.perf_counter() - t_start
    report.write(os.path.join(out, "metrics.json"))
    return report


class _DelayedFollower:
    """Holds the first waypoint for a settling period, then follows."""

    def __init__(self, follower, delay):
        self.follower = follower
        self.delay = delay

    def at(self, t):
        if t < self.delay:
            pos, _ = self.follower.at(0.0)
            return pos, np.zeros(3)
        return self.follower.at(t - self.delay)


def _run_pull(cfg: ScenarioConfig, model, out: str) -> dict:
    """Singularity pull sub-scenario: the hand drags the EE radially outward
    until the gate blocks further extension."""
    tp = cfg.params["teach"]
    q0, origin = _teach_start_posture(cfg, model)
    direction = origin.copy()
    direction[2] = 0.0
    direction /= np.linalg.norm(direction)  # radially away from the base
    far = origin + 0.6 * direction
    follower = _DelayedFollower(
        shapes.PathFollower(np.array([origin, far]), tp["pull_speed"]), 1.0)
    pull_cfg = copy.deepcopy(cfg.to_dict())
    pull_cfg["params"]["hand"]["cap"] = tp["pull_cap"]
    pull_cfg["params"]["optimization"]["r_thr"] = tp["pull_r_thr"]
    controller = TeachController(ScenarioConfig.from_dict(pull_cfg), model,
                                 follower, optimized=True)
    simulator = sim.Simulator(model, q0, None, cfg.friction_model(),
                              inner_dt=cfg.params["sim"]["inner_dt"],
                              control_dt=cfg.params["sim"]["control_dt"])
    simulator.run(tp["pull_duration"], controller)
    rows = np.asarray(controller.trace)
    _write_csv(os.path.join(out, "teach_pull.csv"), TEACH_TRACE_HEADER, rows)
    r_min = rows[:, 10]
    force = np.linalg.norm(rows[:, 7:10], axis=1)
    engaged = np.nonzero(rows[:, 11] > 0.0)[0]
    monotone = True
    max_force = float(force.max())
    if engaged.size:
        start = engaged[0]
        # smoothed force while pulling beyond the threshold
        win = 40
        seg = force[start:]
        smooth = np.convolve(seg, np.ones(win) / win, mode="valid")
        peak = int(np.argmax(smooth))
        monotone = bool(np.all(np.diff(smooth[:peak + 1]) > -0.25))
    return {"min_r_min": float(r_min.min()), "max_force": max_force,
            "monotone": monotone}


# ---------------------------------------------------------------------------
# comply
# ---------------------------------------------------------------------------

class ComplyController:
    """Circle-tracking stack with null-space compliance (or rigid hold)."""

    def __init__(self, cfg: ScenarioConfig, model, circle, q_ref, rigid: bool):
        self.model = model
        self.circle = circle
        self.k_radial = cfg.params["comply"]["k_radial"]
        self.spec = cfg.damping_spec()
        self.setpoint = cfg.orientation_setpoint()
        self.gains = cfg.compliance_gains()
        self.rigid = rigid
        self.q_ref = q_ref
        surface = cfg.params["surface"]
        self.v_surface = (motion.surface_velocity(surface["alpha_c"],
                                                  np.asarray(surface["normal"], dtype=float))
                          if surface["alpha_c"] else np.zeros(3))
        self.trace = []

    def reference_velocity(self, t, pos):
        ref_pos, ref_vel = self.circle.at(t)
        return ref_vel + self.k_radial * (ref_pos - pos) + self.v_surface

    def __call__(self, t, js):
        pos, quat = robot.forward_kinematics(self.model, js.q)
        J = robot.jacobian(self.model, js.q)
        v_msr = J[:3] @ js.qd
        v_cmd = self.reference_velocity(t, pos)
        U = interaction.principal_frame(v_cmd, self.spec)
        D = interaction.damping_matrix(U, self.spec.xi)
        F = interaction.tracking_force(v_msr, v_cmd, D)
        tau_c = interaction.to_joint_torques(F, np.zeros(3), J)
        tau_c = tau_c + interaction.orientation_pd(quat, js.qd, J, self.setpoint)
        N = robot.nullspace_projector(J)
        if self.rigid:
            tau_n = N @ (-120.0 * (js.q - self.q_ref) - 25.0 * js.qd)
        else:
            qd_d = nscomp.desired_joint_velocity(J, v_cmd)
            tau_n = nscomp.compliance_torque(N, qd_d, js.qd, self.gains)
        self.trace.append(np.concatenate([[t], pos, js.q]))
        return sim.ControlTorques(tau_c=tau_c, tau_n=tau_n)


def _circle_deviation(rows, circle):
    rows = np.asarray(rows)
    pos = rows[:, 1:4]
    radial = np.linalg.norm(pos[:, :2] - circle.center[:2], axis=1)
    return np.abs(radial - circle.radius), np.abs(pos[:, 2] - circle.center[2])


def default_comply_schedule(period: float) -> list:
    # two opposite-direction pulses on the 4th joint, the 27 N hand reading
    # mapped through the 0.4 m contact lever arm
    return [
        {"t_start": 0.35 * period, "t_end": 0.35 * period + 0.6,
         "target": 3, "magnitude": 10.8},
        {"t_start": 0.80 * period, "t_end": 0.80 * period + 0.6,
         "target": 3, "magnitude": -10.8},
    ]


def run_comply(cfg: ScenarioConfig) -> MetricsReport:
    out = _ensure_out(cfg)
    model = cfg.robot_model()
    cp = cfg.params["comply"]
    circle = shapes.CirclePath(cp["center"], cp["radius"], cp["period"])
    duration = cfg.params["sim"]["duration"] or 1.5 * cp["period"]
    if not cfg.params["perturbations"]:
        cfg.params["perturbations"] = default_comply_schedule(cp["period"])
    schedule = cfg.perturbation_schedule()

    start_pos, _ = circle.at(0.0)
    q0 = robot.solve_ik(model, start_pos, cfg.orientation_setpoint().quaternion,
                        IK_SEED, tol=1e-9)

    results = {}
    t0 = time.perf_counter()
    variants = [("compliant", False)] + ([("rigid", True)] if cp["baseline"] else [])
    for label, rigid in variants:
        controller = ComplyController(cfg, model, circle, q0, rigid)
        recorder = TraceRecorder(model)
        simulator = sim.Simulator(model, q0, schedule, cfg.friction_model(),
                                  inner_dt=cfg.params["sim"]["inner_dt"],
                                  control_dt=cfg.params["sim"]["control_dt"])
        steps_per = simulator.steps_per_control
        count = [0]

        def observer(state):
            count[0] += 1
            if count[0] % steps_per == 0:
                recorder.record(state)

        simulator.run(duration, controller)
        rows = np.asarray(controller.trace)
        radial_dev, z_dev = _circle_deviation(rows, circle)
        q_traj = rows[:, 4:11]
        joint_dev = np.abs(q_traj - q0[None, :])
        results[label] = {
            "rms_mm": float(np.sqrt(np.mean(radial_dev ** 2))) * 1000.0,
            "z_peak_mm": float(z_dev.max()) * 1000.0,
            "max_joint_deviation_deg": float(np.degrees(joint_dev.max())),
            "rows": rows,
        }
    runtime = time.perf_counter() - t0

    comp = results["compliant"]
    report = MetricsReport(kind="comply",
                           ee_rms_deviation_mm=comp["rms_mm"],
                           max_joint_deviation_deg=comp["max_joint_deviation_deg"],
                           z_fluctuation_mm=comp["z_peak_mm"],
                           runtime_s=runtime)
    if "rigid" in results:
        report.ee_rms_deviation_rigid_mm = results["rigid"]["rms_mm"]
    report.write(os.path.join(out, "metrics.json"))
    for label, res in results.items():
        _write_csv(os.path.join(out, f"comply_{label}.csv"),
                   "t,px,py,pz," + ",".join(f"q{i}" for i in range(7)),
                   res["rows"])
    return report


# ---------------------------------------------------------------------------
# plot-data export
# ---------------------------------------------------------------------------

def export_plots(run_dir, out_dir=None) -> list:
    """Turn the traces of a finished run into per-panel plot-data files.

    Produces plain columnar text files any plotting tool can consume; which
    panels appear depends on which traces exist.  Returns the written paths.
    """
    out_dir = out_dir or os.path.join(run_dir, "plots")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def emit(name, header, columns):
        path = os.path.join(out_dir, name)
        _write_csv(path, header, columns)
        written.append(path)

    repro = os.path.join(run_dir, "reproduction_trace.csv")
    demo = os.path.join(run_dir, "demo_path.csv")
    if os.path.exists(repro):
        rows = _read_csv(repro)
        emit("path_reproduction.csv", "t,x,y,z",
             rows[:, [0, 1, 2, 3]] if rows.size else rows.reshape(0, 4))
        if os.path.exists(demo) and rows.size:
            d = _read_csv(demo)
            dists = [ _distance_to_path(y, d[:, 1:4]) for y in rows[:, 1:4] ]
            emit("error_curve.csv", "t,error_m",
                 np.column_stack([rows[:, 0], dists]))
        else:
            emit("error_curve.csv", "t,error_m", np.empty((0, 2)))
    if os.path.exists(demo):
        d = _read_csv(demo)
        emit("path_demo.csv", "t,x,y,z", d)

    for label in ("optimized", "baseline", "pull"):
        path = os.path.join(run_dir, f"teach_{label}.csv")
        if os.path.exists(path):
            rows = _read_csv(path)
            if rows.size:
                force = np.linalg.norm(rows[:, 7:10], axis=1)
                emit(f"force_trace_{label}.csv", "t,fx,fy,fz,fnorm",
                     np.column_stack([rows[:, 0], rows[:, 7:10], force]))
            else:
                emit(f"force_trace_{label}.csv", "t,fx,fy,fz,fnorm",
                     np.empty((0, 5)))

    comply = os.path.join(run_dir, "comply_compliant.csv")
    if os.path.exists(comply):
        rows = _read_csv(comply)
        emit("comply_xy.csv", "t,px,py,pz",
             rows[:, :4] if rows.size else np.empty((0, 4)))
        if rows.size:
            q0 = rows[0, 4:11]
            dev = np.degrees(rows[:, 4:11] - q0[None, :])
            emit("joint_deviation.csv",
                 "t," + ",".join(f"dq{i}_deg" for i in range(7)),
                 np.column_stack([rows[:, 0], dev]))
            emit("z_trace.csv", "t,z", rows[:, [0, 3]])
        else:
            emit("joint_deviation.csv",
                 "t," + ",".join(f"dq{i}_deg" for i in range(7)),
                 np.empty((0, 8)))
            emit("z_trace.csv", "t,z", np.empty((0, 2)))
    return written


def _read_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


RUNNERS = {"learn": run_learn, "reproduce": run_reproduce,
           "teach": run_teach, "comply": run_comply}


def run_scenario(cfg: ScenarioConfig) -> MetricsReport:
    return RUNNERS[cfg.kind](cfg)

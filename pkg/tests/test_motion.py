"""Motion generator: FDM velocity field, gain adaptation, EKF correction."""

import numpy as np
import pytest

from lfdstack import fdm, motion


def identity_diffeo(start=(0.0, 0.0, 0.0), goal=(0.4, 0.0, 0.0)):
    return fdm.Diffeomorphism(
        [fdm.LocalTranslation(0.0, np.zeros(3), np.zeros(3))],
        source_start=np.array(start, dtype=float),
        source_goal=np.array(goal, dtype=float))


def line_demo(start=(0.0, 0.0, 0.0), goal=(0.4, 0.0, 0.0), n=400, speed=0.1):
    pts = np.linspace(start, goal, n)
    length = np.linalg.norm(np.asarray(goal) - np.asarray(start))
    dt = length / speed / (n - 1)
    vel = np.gradient(pts, dt, axis=0)
    return fdm.DemonstrationPath(pts, vel, dt)


# -- fdm_velocity ------------------------------------------------------------

def test_velocity_zero_at_attractor(trapezoid_fit):
    diffeo, _ = trapezoid_fit
    y_star = fdm.apply(diffeo, diffeo.source_goal)
    v = motion.fdm_velocity(diffeo, y_star, np.eye(3))
    assert np.linalg.norm(v) < 1e-10


def test_velocity_small_at_demo_end(trapezoid_fit, trapezoid_demo):
    # the mapped goal coincides with the demo end up to the fit error
    diffeo, X = trapezoid_fit
    _, max_err = fdm.matching_error(diffeo, X, trapezoid_demo.points)
    v = motion.fdm_velocity(diffeo, trapezoid_demo.points[-1], np.eye(3))
    assert np.linalg.norm(v) <= 5 * max_err + 1e-9


def test_velocity_linear_attractor():
    diffeo = identity_diffeo()
    y = np.array([0.1, 0.05, -0.02])
    v = motion.fdm_velocity(diffeo, y, np.eye(3))
    assert np.allclose(v, -(y - diffeo.source_goal), atol=1e-12)


def test_velocity_field_is_time_independent(trapezoid_fit):
    diffeo, _ = trapezoid_fit
    zeta = np.diag([0.8, 1.1, 0.9])
    y = np.array([-0.52, -0.02, 0.31])
    v1 = motion.fdm_velocity(diffeo, y, zeta)
    v2 = motion.fdm_velocity(diffeo, y, zeta)
    assert np.array_equal(v1, v2)


def test_integration_converges_to_goal(trapezoid_fit, trapezoid_demo):
    diffeo, _ = trapezoid_fit
    sess = motion.ReproductionSession(diffeo, trapezoid_demo, np.eye(3),
                                      use_ekf=False)
    _, ys = motion.integrate_reproduction(sess, trapezoid_demo.points[0],
                                          30.0, 0.005)
    assert np.linalg.norm(ys[-1] - trapezoid_demo.points[-1]) < 1e-3


# -- adapt_zeta --------------------------------------------------------------

def test_adapt_zeta_fixed_point():
    # demo velocities exactly equal the generated ones: zeta must not move
    diffeo = identity_diffeo()
    zeta0 = np.diag([1.0, 1.2, 0.9])
    pts = np.linspace([0.0, 0.0, 0.0], [0.38, 0.0, 0.0], 150)
    vel = np.array([-zeta0 @ (p - diffeo.source_goal) for p in pts])
    demo = fdm.DemonstrationPath(pts, vel, 0.01)
    out = motion.adapt_zeta(demo, diffeo, motion.VelocityModulation(zeta=zeta0))
    assert np.array_equal(out, zeta0)


def test_adapt_zeta_speeds_up_fast_demo():
    diffeo = identity_diffeo()
    pts = np.linspace([0.0, 0.0, 0.0], [0.38, 0.0, 0.0], 200)
    # uniformly twice the generated velocity at zeta = I
    vel = np.array([-2.0 * (p - diffeo.source_goal) for p in pts])
    demo = fdm.DemonstrationPath(pts, vel, 0.01)
    params = motion.VelocityModulation()
    zeta = motion.adapt_zeta(demo, diffeo, params)

    def mean_ve(z):
        errs = [np.linalg.norm(demo.velocities[i]
                               - motion.fdm_velocity(diffeo, pts[i], z))
                for i in range(demo.n)]
        return np.mean(errs)

    assert mean_ve(zeta) <= 0.5 * mean_ve(np.eye(3))


def test_adapt_zeta_zero_clamp_freezes():
    diffeo = identity_diffeo()
    demo = line_demo()
    params = motion.VelocityModulation(zeta=np.zeros((3, 3)), clamp=0.0)
    out = motion.adapt_zeta(demo, diffeo, params)
    assert np.array_equal(out, np.zeros((3, 3)))


def test_modulation_validates():
    with pytest.raises(ValueError):
        motion.VelocityModulation(zeta=np.full((3, 3), 9.0))
    with pytest.raises(ValueError):
        motion.VelocityModulation(eta=-1.0)


# -- EKF ---------------------------------------------------------------------

def test_ekf_zero_residual_decays_bias():
    demo = line_demo()
    state = motion.EkfState(b=np.array([0.05, 0.0, 0.0]))
    repro = motion.ReproductionState(y=demo.points[10].copy())
    repro.nearest_index = 10
    repro.ydot_fdm = demo.velocities[10].copy()  # exactly tangent
    norms = []
    for _ in range(200):
        state, _ = motion.ekf_correct(state, repro, demo, dt=0.005)
        norms.append(np.linalg.norm(state.b))
    assert norms[-1] < 0.2 * norms[0]
    assert norms[-1] < 1e-3


def test_ekf_recovers_constant_bias():
    demo = line_demo()
    state = motion.EkfState()
    repro = motion.ReproductionState(y=demo.points[0].copy())
    y = demo.points[0].copy()
    dt = 0.005
    err = np.array([0.01, 0.0, 0.0])
    for _ in range(400):  # 2 s simulated
        repro.y = y
        idx, _ = motion.nearest_demo_point(y, demo, repro.nearest_index)
        repro.nearest_index = idx
        repro.ydot_fdm = demo.velocities[idx] + err
        state, v = motion.ekf_correct(state, repro, demo, dt)
        y = y + v * dt
    assert np.linalg.norm(state.b - (-err)) <= 0.2 * np.linalg.norm(err)


def test_ekf_covariance_spd_and_capped():
    demo = line_demo()
    state = motion.EkfState()
    repro = motion.ReproductionState(y=demo.points[5].copy())
    repro.nearest_index = 5
    repro.ydot_fdm = demo.velocities[5]
    for k in range(100_000):
        state, _ = motion.ekf_correct(state, repro, demo, dt=0.005)
        if k % 5000 == 0:
            w = np.linalg.eigvalsh(state.P)
            assert w[0] > 0.0
            assert w[-1] <= state.p_cap + 1e-12
    w = np.linalg.eigvalsh(state.P)
    assert w[0] > 0.0 and w[-1] <= state.p_cap + 1e-12


def test_ekf_state_validates():
    with pytest.raises(ValueError):
        motion.EkfState(Q=np.zeros((3, 3)))


# -- surface velocity --------------------------------------------------------

def test_surface_velocity_zero():
    assert np.allclose(motion.surface_velocity(0.0, np.array([0, 0, -1.0])), 0.0)


def test_surface_velocity_definition():
    v = motion.surface_velocity(0.01, np.array([0.0, 0.0, -1.0]))
    assert np.allclose(v, [0.0, 0.0, -0.01], atol=1e-15)


def test_surface_velocity_requires_unit_normal():
    with pytest.raises(ValueError):
        motion.surface_velocity(0.01, np.array([0.0, 0.0, -2.0]))


# -- nearest demo point ------------------------------------------------------

def test_nearest_exact_sample(trapezoid_demo):
    idx, pt = motion.nearest_demo_point(trapezoid_demo.points[137],
                                        trapezoid_demo, hint=120)
    assert idx == 137
    assert np.array_equal(pt, trapezoid_demo.points[137])


def test_nearest_tie_breaks_low():
    demo = line_demo(n=50)
    mid = 0.5 * (demo.points[10] + demo.points[11])
    idx, _ = motion.nearest_demo_point(mid, demo, hint=8)
    assert idx == 10


def test_nearest_full_search_after_displacement(trapezoid_demo):
    # brute-force oracle over the whole demo
    y = trapezoid_demo.points[300] + np.array([0.05, 0.0, 0.0])
    d = np.linalg.norm(trapezoid_demo.points - y, axis=1)
    expected = int(np.argmin(d))
    idx, _ = motion.nearest_demo_point(y, trapezoid_demo, hint=None)
    assert idx == expected


def test_session_reenters_after_displacement(trapezoid_fit, trapezoid_demo):
    diffeo, _ = trapezoid_fit
    sess = motion.ReproductionSession(diffeo, trapezoid_demo, np.eye(3))
    # walk the cursor forward, then teleport far off near the path start
    for i in range(0, 200, 5):
        sess.step(trapezoid_demo.points[i], 0.005)
    assert sess.state.nearest_index >= 190
    displaced = trapezoid_demo.points[40] + np.array([0.0, 0.06, 0.0])
    sess.step(displaced, 0.005)
    d = np.linalg.norm(trapezoid_demo.points - displaced, axis=1)
    assert sess.state.nearest_index == int(np.argmin(d))


def test_nearest_index_monotone_nominal(trapezoid_fit, trapezoid_demo):
    diffeo, _ = trapezoid_fit
    zeta = motion.adapt_zeta(trapezoid_demo, diffeo, motion.VelocityModulation())
    sess = motion.ReproductionSession(diffeo, trapezoid_demo, zeta)
    y = trapezoid_demo.points[0].copy()
    prev = 0
    for _ in range(1600):
        v = sess.step(y, 0.005)
        y = y + v * 0.005
        assert sess.state.nearest_index >= prev
        prev = sess.state.nearest_index


# -- code-path regression ----------------------------------------------------

def test_zero_bias_reproduces_pure_fdm_trace(trapezoid_fit, trapezoid_demo):
    # EKF with the bias hard-capped at zero must equal the EKF-off path bitwise
    diffeo, _ = trapezoid_fit
    zeta = np.eye(3)
    capped = motion.ReproductionSession(
        diffeo, trapezoid_demo, zeta,
        ekf=motion.EkfState(bias_cap=0.0), use_ekf=True)
    off = motion.ReproductionSession(diffeo, trapezoid_demo, zeta, use_ekf=False)
    _, ys_a = motion.integrate_reproduction(capped, trapezoid_demo.points[0], 5.0, 0.005)
    _, ys_b = motion.integrate_reproduction(off, trapezoid_demo.points[0], 5.0, 0.005)
    assert np.array_equal(ys_a, ys_b)

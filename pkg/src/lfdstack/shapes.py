"""Analytic demo shapes and reference paths used by the shipped scenarios.

The two handwriting-like demos (trapezoid, W) are synthesized from control
points instead of redistributing any external dataset: a cubic spline through
the corners, traversed with a smoothstep timing law (bell-shaped speed), and
lifted out of the plane by a single-arch height profile that starts and ends
at zero height.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import make_interp_spline

# workspace anchor for the shipped demos (robot base frame, meters)
DEMO_ORIGIN = np.array([-0.62, -0.10, 0.30])
DEMO_SCALE = 0.20
DEMO_HEIGHT = 0.04

TRAPEZOID_CORNERS = np.array([
    [0.00, 0.05],
    [0.25, 0.95],
    [0.75, 0.95],
    [1.00, 0.05],
])

W_CORNERS = np.array([
    [0.00, 0.95],
    [0.22, 0.05],
    [0.50, 0.70],
    [0.78, 0.05],
    [1.00, 0.95],
])


def _spline_through(corners: np.ndarray, n: int) -> np.ndarray:
    chord = np.linalg.norm(np.diff(corners, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(chord)])
    u /= u[-1]
    k = min(3, len(corners) - 1)
    spl = make_interp_spline(u, corners, k=k, axis=0)
    return spl(np.linspace(0.0, 1.0, n))


def _timed_3d(shape_2d: np.ndarray, duration: float, origin, scale, height):
    # uniform time grid; arc-length progress follows a smoothstep, so the
    # speed profile is bell-shaped like a human stroke
    n = shape_2d.shape[0]
    t = np.linspace(0.0, duration, n)
    r = t / duration
    progress = 3.0 * r ** 2 - 2.0 * r ** 3
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(shape_2d, axis=0), axis=1))])
    arc /= arc[-1]
    xy = np.column_stack([np.interp(progress, arc, shape_2d[:, k]) for k in range(2)])
    z = height * np.sin(np.pi * progress)
    pts = np.column_stack([origin[0] + scale * xy[:, 0],
                           origin[1] + scale * xy[:, 1],
                           origin[2] + z])
    return t, pts


def trapezoid_demo(duration: float = 6.0, n: int = 1500,
                   origin=DEMO_ORIGIN, scale: float = DEMO_SCALE,
                   height: float = DEMO_HEIGHT):
    """Raw timestamped samples (t, points) of the trapezoid-shaped demo."""
    return _timed_3d(_spline_through(TRAPEZOID_CORNERS, n), duration,
                     origin, scale, height)


def w_demo(duration: float = 6.0, n: int = 1500,
           origin=DEMO_ORIGIN, scale: float = DEMO_SCALE,
           height: float = DEMO_HEIGHT):
    """Raw timestamped samples (t, points) of the W-shaped demo."""
    return _timed_3d(_spline_through(W_CORNERS, n), duration,
                     origin, scale, height)


def demo_by_name(name: str, **kwargs):
    try:
        return {"trapezoid": trapezoid_demo, "w": w_demo}[name.lower()](**kwargs)
    except KeyError:
        raise ValueError(f"unknown demo shape {name!r}") from None


class PathFollower:
    """Constant-speed target along a polyline, optionally ping-ponging.

    Gives the moving target (position, velocity) the simulated hand drags the
    EE toward; after the final waypoint the target either holds or retraces.
    """

    def __init__(self, waypoints: np.ndarray, speed: float,
                 loop: bool = False, hold_end: bool = True):
        self.waypoints = np.asarray(waypoints, dtype=float)
        seg = np.diff(self.waypoints, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.length = float(self.seg_len.sum())
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.speed = float(speed)
        self.loop = loop
        self.hold_end = hold_end

    def at(self, t: float):
        s = self.speed * t
        direction = 1.0
        if self.loop:
            period = 2.0 * self.length
            s = s % period
            if s > self.length:
                s = period - s
                direction = -1.0
        elif s >= self.length:
            if self.hold_end:
                return self.waypoints[-1].copy(), np.zeros(3)
            s = self.length
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.seg_len) - 1)
        frac = (s - self.cum[i]) / self.seg_len[i]
        pos = self.waypoints[i] + frac * (self.waypoints[i + 1] - self.waypoints[i])
        tangent = (self.waypoints[i + 1] - self.waypoints[i]) / self.seg_len[i]
        return pos, direction * self.speed * tangent


def lshape_waypoints(origin, segment: float = 0.20, plane: str = "xz") -> np.ndarray:
    """L-shaped path with axis-aligned segments in the given base plane.

    The vertical xz plane contains the two dominant apparent-inertia
    directions of the bundled arm in its writing posture, which is the pair
    the posture optimization equalizes.
    """
    o = np.asarray(origin, dtype=float)
    second = {"xy": [0.0, segment, 0.0], "xz": [0.0, 0.0, segment]}[plane]
    return np.array([o, o + [segment, 0.0, 0.0], o + [segment, 0.0, 0.0] + second])


class CirclePath:
    """Reference circle in the XY plane at fixed height."""

    def __init__(self, center, radius: float, period: float):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.period = float(period)

    def at(self, t: float):
        w = 2.0 * np.pi / self.period
        a = w * t
        pos = self.center + self.radius * np.array([np.cos(a), np.sin(a), 0.0])
        vel = self.radius * w * np.array([-np.sin(a), np.cos(a), 0.0])
        return pos, vel

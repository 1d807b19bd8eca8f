"""3D fast diffeomorphic matching between a straight line and a demo path.

A demonstrated path Y is matched by deforming the straight source line X
(connecting the demo start and end) with an ordered sequence of locally
weighted translations

    x -> x + exp(-rho^2 ||x - c||^2) * v.

Each translation is fitted greedily at the worst-matched point; the kernel
width rho is kept inside the contraction band [0, mu * rho_max] with
rho_max = e^(1/4) / (sqrt(2) ||v||), which keeps the composed map invertible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import exp

import numpy as np

from .errors import DegenerateDemo, NoConvergence

MODEL_FORMAT = "fdm-model"
MODEL_VERSION = 1

DEFAULT_TRANSLATIONS = 120
DEFAULT_MU = 0.9
DEFAULT_BETA = 0.5
DEFAULT_RESAMPLE = 400

# mean matching error (m) below which the fit loop stops early
FIT_EARLY_EXIT = 1e-5

_GOLDEN_ITERS = 40
_INVERT_MAX_ITERS = 100


def rho_max(v: np.ndarray) -> float:
    """Largest kernel width keeping a single translation invertible."""
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return np.inf
    return np.exp(0.25) / (np.sqrt(2.0) * nv)


@dataclass
class LocalTranslation:
    """One Gaussian-kernel weighted shift: x -> x + exp(-rho^2 |x-c|^2) v."""

    rho: float
    c: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        nv = float(np.linalg.norm(self.v))
        if nv == 0.0:
            self.rho = 0.0
        elif not 0.0 <= self.rho <= rho_max(self.v) + 1e-12:
            raise ValueError("rho outside the invertibility band")


@dataclass
class Diffeomorphism:
    """Ordered composition of locally weighted translations.

    ``translations[0]`` is applied first.  ``source_start``/``source_goal``
    are the ends of the straight source line; the goal doubles as the
    attractor origin of the motion generator.
    """

    translations: list
    source_start: np.ndarray
    source_goal: np.ndarray
    mu: float = DEFAULT_MU
    beta: float = DEFAULT_BETA
    fit_errors: list = field(default_factory=list)

    def __post_init__(self):
        self.source_start = np.asarray(self.source_start, dtype=float)
        self.source_goal = np.asarray(self.source_goal, dtype=float)
        if len(self.translations) == 0:
            raise ValueError("a diffeomorphism needs at least one translation")

    # packed arrays for the vectorized forward/inverse paths
    def _packed(self):
        cached = getattr(self, "_pack_cache", None)
        if cached is None or cached[0] != len(self.translations):
            rho = np.array([t.rho for t in self.translations])
            c = np.array([t.c for t in self.translations])
            v = np.array([t.v for t in self.translations])
            flat = [(float(t.rho), float(t.c[0]), float(t.c[1]), float(t.c[2]),
                     float(t.v[0]), float(t.v[1]), float(t.v[2]))
                    for t in self.translations]
            cached = (len(self.translations), rho, c, v, flat)
            object.__setattr__(self, "_pack_cache", cached)
        return cached[1], cached[2], cached[3]

    def _packed_flat(self):
        self._packed()
        return getattr(self, "_pack_cache")[4]


@dataclass
class DemonstrationPath:
    """Uniformly resampled demo: N points, per-point velocities, sample dt."""

    points: np.ndarray      # (N, 3) m
    velocities: np.ndarray  # (N, 3) m/s
    dt: float               # s

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if self.points.shape[0] < 2:
            raise DegenerateDemo("a demonstration needs at least two points")
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(seg == 0.0):
            raise DegenerateDemo("consecutive demo points must be distinct")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def duration(self) -> float:
        return self.dt * (self.n - 1)

    def arc_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


# ---------------------------------------------------------------------------
# demonstration handling
# ---------------------------------------------------------------------------

def resample(t: np.ndarray, points: np.ndarray, n: int = DEFAULT_RESAMPLE) -> DemonstrationPath:
    """Resample raw timestamped samples to n points uniform in arc length.

    The sample period is chosen so the total duration is preserved; the
    velocities are the finite differences of the resampled points, i.e. the
    resampled demo moves at constant speed along the original geometry.
    """
    t = np.asarray(t, dtype=float)
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise DegenerateDemo("raw demo must be (N, 3)")
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(points, axis=0), axis=1) > 0.0
    points = points[keep]
    t = t[keep]
    if len(points) < 2:
        raise DegenerateDemo("raw demo has fewer than two distinct points")
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] < 1e-4:
        raise DegenerateDemo(f"total arc length {arc[-1]:.2e} m is too short")
    s_new = np.linspace(0.0, arc[-1], n)
    resampled = np.column_stack([np.interp(s_new, arc, points[:, k]) for k in range(3)])
    duration = t[-1] - t[0]
    if duration <= 0.0:
        raise DegenerateDemo("time stamps must be increasing")
    dt = duration / (n - 1)
    vel = np.gradient(resampled, dt, axis=0)
    return DemonstrationPath(resampled, vel, dt)


def source_line(demo: DemonstrationPath) -> np.ndarray:
    """Straight source line X from demo start to demo end, N uniform points.

    Near-closed demos (gap below 5% of arc length) would give a degenerate
    line; the goal is then nudged one resample step along the final segment.
    """
    start = demo.points[0]
    end = demo.points[-1]
    arc = demo.arc_length()
    if arc < 1e-4:
        raise DegenerateDemo("demonstration arc length is too short")
    if np.linalg.norm(end - start) < 0.05 * arc:
        step = arc / (demo.n - 1)
        last = demo.points[-1] - demo.points[-2]
        end = end + step * last / np.linalg.norm(last)
        if np.linalg.norm(end - start) < 1e-9:
            raise DegenerateDemo("closed demo could not be opened")
    alphas = np.linspace(0.0, 1.0, demo.n)[:, None]
    return start[None, :] * (1.0 - alphas) + end[None, :] * alphas


# ---------------------------------------------------------------------------
# fit and evaluation
# ---------------------------------------------------------------------------

def _apply_one(rho, c, v, pts):
    d2 = np.sum((pts - c) ** 2, axis=-1)
    return pts + np.exp(-rho * rho * d2)[..., None] * v


def fit(X: np.ndarray, Y: np.ndarray, n_translations: int = DEFAULT_TRANSLATIONS,
        mu: float = DEFAULT_MU, beta: float = DEFAULT_BETA) -> Diffeomorphism:
    """Fit the diffeomorphism mapping line X onto path Y.

    Greedy loop: pick the index with the largest residual, center a
    translation there aimed at the paired target point, and line-search the
    kernel width on [0, mu*rho_max] (golden section, kept no worse than the
    rho = 0 endpoint so the error trace never increases).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("X and Y must both be (N, 3)")
    if not (0.0 < mu < 1.0 and 0.0 < beta < 1.0):
        raise ValueError("mu and beta must lie in (0, 1)")
    if n_translations < 1:
        raise ValueError("need at least one translation")

    cur = X.copy()
    translations = []
    errors = []
    for _ in range(n_translations):
        resid = np.linalg.norm(cur - Y, axis=1)
        m = int(np.argmax(resid))
        c = cur[m].copy()
        v = beta * (Y[m] - c)
        nv = float(np.linalg.norm(v))
        if nv < 1e-15:
            translations.append(LocalTranslation(0.0, c, np.zeros(3)))
            errors.append(float(resid.mean()))
            continue
        hi = mu * rho_max(v)
        d2 = np.sum((cur - c) ** 2, axis=1)

        def cost(rho):
            moved = cur + np.exp(-rho * rho * d2)[:, None] * v
            return float(np.mean(np.sum((moved - Y) ** 2, axis=1)))

        rho = _golden_min(cost, 0.0, hi)
        if cost(rho) > cost(0.0):
            rho = 0.0
        translations.append(LocalTranslation(rho, c, v))
        cur = _apply_one(rho, c, v, cur)
        errors.append(float(np.linalg.norm(cur - Y, axis=1).mean()))
        if errors[-1] < FIT_EARLY_EXIT:
            break
    return Diffeomorphism(translations, X[0].copy(), X[-1].copy(),
                          mu=mu, beta=beta, fit_errors=errors)


def _golden_min(f, lo, hi):
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - inv_phi * (b - a)
    x2 = a + inv_phi * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(_GOLDEN_ITERS):
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - inv_phi * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + inv_phi * (b - a)
            f2 = f(x2)
    return 0.5 * (a + b)


def apply(diffeo: Diffeomorphism, x: np.ndarray) -> np.ndarray:
    """Forward map of a single 3-vector (translations in fit order)."""
    return apply_all(diffeo, np.asarray(x, dtype=float)[None, :])[0]


def apply_all(diffeo: Diffeomorphism, X: np.ndarray) -> np.ndarray:
    """Forward map of an (N, 3) point set."""
    rho, c, v = diffeo._packed()
    pts = np.asarray(X, dtype=float).copy()
    for j in range(len(rho)):
        d2 = np.sum((pts - c[j]) ** 2, axis=-1)
        pts += np.exp(-rho[j] * rho[j] * d2)[..., None] * v[j]
    return pts


def inverse(diffeo: Diffeomorphism, y: np.ndarray) -> np.ndarray:
    """Preimage of y under the composed map.

    Each translation is inverted in reverse order.  Because the preimage sits
    at x = y - s v with scalar kernel weight s in [0, 1], each step reduces
    to the scalar root of f(s) = s - exp(-rho^2 |y - s v - c|^2), solved by
    Newton iterations with a bisection fallback.  Scalar math on purpose:
    this runs inside the 200 Hz control loop.
    """
    y = np.asarray(y, dtype=float)
    x0, x1, x2 = float(y[0]), float(y[1]), float(y[2])
    for rho, c0, c1, c2, v0, v1, v2 in reversed(diffeo._packed_flat()):
        if rho == 0.0:
            x0 -= v0
            x1 -= v1
            x2 -= v2
            continue
        if v0 == 0.0 and v1 == 0.0 and v2 == 0.0:
            continue
        r2 = rho * rho
        d0 = x0 - c0
        d1 = x1 - c1
        d2 = x2 - c2
        s = exp(-r2 * (d0 * d0 + d1 * d1 + d2 * d2))
        lo, hi = 0.0, 1.0
        for _ in range(_INVERT_MAX_ITERS):
            e0 = x0 - s * v0 - c0
            e1 = x1 - s * v1 - c1
            e2 = x2 - s * v2 - c2
            k = exp(-r2 * (e0 * e0 + e1 * e1 + e2 * e2))
            fs = s - k
            if -1e-13 < fs < 1e-13:
                break
            if fs > 0.0:
                hi = s
            else:
                lo = s
            dfs = 1.0 - 2.0 * r2 * k * (e0 * v0 + e1 * v1 + e2 * v2)
            s_new = s - fs / dfs if dfs > 1e-12 else 0.5 * (lo + hi)
            if not lo <= s_new <= hi:
                s_new = 0.5 * (lo + hi)
            if abs(s_new - s) < 1e-14 * (1.0 + s):
                s = s_new
                break
            s = s_new
        else:
            raise NoConvergence(
                "translation inversion stalled; the fitted map may be too aggressive")
        x0 -= s * v0
        x1 -= s * v1
        x2 -= s * v2
    return np.array([x0, x1, x2])


def jacobian_of(diffeo: Diffeomorphism, x: np.ndarray) -> np.ndarray:
    """3x3 Jacobian of the forward map at source point x (chain rule).

    Each factor is I + v (dk/dx)^T with dk/dx = -2 rho^2 k (x - c); the
    product is accumulated along the forward pass.
    """
    x = np.asarray(x, dtype=float)
    p0, p1, p2 = float(x[0]), float(x[1]), float(x[2])
    j00, j01, j02 = 1.0, 0.0, 0.0
    j10, j11, j12 = 0.0, 1.0, 0.0
    j20, j21, j22 = 0.0, 0.0, 1.0
    for rho, c0, c1, c2, v0, v1, v2 in diffeo._packed_flat():
        d0 = p0 - c0
        d1 = p1 - c1
        d2 = p2 - c2
        k = exp(-rho * rho * (d0 * d0 + d1 * d1 + d2 * d2))
        a = -2.0 * rho * rho * k
        # J <- (I + v grad^T) J, expanded as J += v (d^T J) * a
        g0 = a * (d0 * j00 + d1 * j10 + d2 * j20)
        g1 = a * (d0 * j01 + d1 * j11 + d2 * j21)
        g2 = a * (d0 * j02 + d1 * j12 + d2 * j22)
        j00 += v0 * g0
        j01 += v0 * g1
        j02 += v0 * g2
        j10 += v1 * g0
        j11 += v1 * g1
        j12 += v1 * g2
        j20 += v2 * g0
        j21 += v2 * g1
        j22 += v2 * g2
        p0 += k * v0
        p1 += k * v1
        p2 += k * v2
    return np.array([[j00, j01, j02], [j10, j11, j12], [j20, j21, j22]])


def matching_error(diffeo: Diffeomorphism, X: np.ndarray, Y: np.ndarray):
    """(mean, max) pointwise distances between the mapped X and Y, meters."""
    d = np.linalg.norm(apply_all(diffeo, X) - np.asarray(Y, dtype=float), axis=1)
    return float(d.mean()), float(d.max())


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_diffeo(diffeo: Diffeomorphism, path, extra: dict | None = None) -> None:
    """Write the fitted map as self-describing JSON (canonical text form)."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "mu": diffeo.mu,
        "beta": diffeo.beta,
        "source_start": diffeo.source_start.tolist(),
        "source_goal": diffeo.source_goal.tolist(),
        "fit_errors": list(diffeo.fit_errors),
        "translations": [
            {"rho": t.rho, "c": t.c.tolist(), "v": t.v.tolist()}
            for t in diffeo.translations
        ],
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def load_diffeo(path):
    """Load a fitted map; returns (Diffeomorphism, full payload dict)."""
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a fitted-model file")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {payload.get('version')}")
    translations = [LocalTranslation(t["rho"], t["c"], t["v"])
                    for t in payload["translations"]]
    diffeo = Diffeomorphism(translations, payload["source_start"],
                            payload["source_goal"], mu=payload["mu"],
                            beta=payload["beta"],
                            fit_errors=payload.get("fit_errors", []))
    return diffeo, payload


def demo_to_csv(demo: DemonstrationPath, path) -> None:
    """Write a demo as t,x,y,z CSV (the on-disk demonstration format)."""
    t = np.arange(demo.n) * demo.dt
    data = np.column_stack([t, demo.points])
    np.savetxt(path, data, delimiter=",", header="t,x,y,z", comments="")


def demo_from_csv(path, n: int = DEFAULT_RESAMPLE) -> DemonstrationPath:
    """Load raw t,x,y,z samples and resample to n uniform points."""
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1)
    except (OSError, ValueError) as e:
        raise DegenerateDemo(f"could not read demo CSV {path}: {e}") from None
    if data.ndim != 2 or data.shape[1] != 4:
        raise DegenerateDemo(f"demo CSV {path} must have columns t,x,y,z")
    return resample(data[:, 0], data[:, 1:], n)

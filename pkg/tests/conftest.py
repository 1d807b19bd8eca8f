import numpy as np
import pytest

from lfdstack import fdm, shapes


@pytest.fixture(scope="session")
def trapezoid_demo():
    t, pts = shapes.trapezoid_demo()
    return fdm.resample(t, pts, fdm.DEFAULT_RESAMPLE)


@pytest.fixture(scope="session")
def w_demo():
    t, pts = shapes.w_demo()
    return fdm.resample(t, pts, fdm.DEFAULT_RESAMPLE)


@pytest.fixture(scope="session")
def trapezoid_fit(trapezoid_demo):
    X = fdm.source_line(trapezoid_demo)
    return fdm.fit(X, trapezoid_demo.points), X


@pytest.fixture(scope="session")
def w_fit(w_demo):
    X = fdm.source_line(w_demo)
    return fdm.fit(X, w_demo.points), X


@pytest.fixture(scope="session")
def straight_demo():
    t = np.linspace(0.0, 4.0, 200)
    pts = np.linspace([-0.5, -0.1, 0.3], [-0.5, 0.1, 0.3], 200)
    return fdm.resample(t, pts, 120)

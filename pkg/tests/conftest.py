"""Shared fixtures: bundled cases, the lossless two-bus toy, oracles.

The toy network (one lossless line, x = 0.1) admits a closed scalar
reduction of its power-flow equations, so tests can solve it by
bisection without touching any package code and compare solver output
against that independent value.
"""

import math

import numpy as np
import pytest

from opfproxy.cases import load_case
from opfproxy.grid import parse_case

## ref bus (with a wide generator) + one load bus drawing 0.1 pu,
## single lossless line x = 0.1 -> B = [[-10, 10], [10, -10]], G = 0
TOY2_TEXT = """
function mpc = toy2
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
 1 3 0  0 0 0 1 1 0 138 1 1.10 0.90;
 2 1 10 0 0 0 1 1 0 138 1 1.10 0.90;
];
mpc.gen = [
 1 0 0 100 -100 1 100 1 300 -300;
];
mpc.branch = [
 1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
 2 0 0 3 0.02 30 0;
];
"""


@pytest.fixture(scope="session")
def toy2():
    return parse_case(TOY2_TEXT, "toy2")


@pytest.fixture(scope="session")
def case2s():
    return load_case("case2s")


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118s")


def toy2_solution(p_load=0.1):
    """Bisection oracle for the toy: theta_2 and V_2 at V_ref = 1.

    Eliminating V_2 = cos(theta) from the reactive balance leaves
    g(theta) = 10 cos(theta) sin(theta) + p_load = 0.
    """
    def g(th):
        return 10.0 * math.cos(th) * math.sin(th) + p_load

    lo, hi = -0.5, 0.0
    assert g(lo) * g(hi) < 0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(lo) * g(mid) <= 0:
            hi = mid
        else:
            lo = mid
    th = 0.5 * (lo + hi)
    return th, math.cos(th)


def complex_injections(net, theta, vmag):
    """Independent complex-power oracle S = diag(V) conj(Y V)."""
    v = np.asarray(vmag) * np.exp(1j * np.asarray(theta))
    s = v * np.conj(net.admittance.ybus @ v)
    return s.real, s.imag


def central_fd(fun, x0, eps=1e-6, coords=None):
    """Central finite differences of a scalar or vector function."""
    x0 = np.asarray(x0, dtype=float)
    idx = range(x0.size) if coords is None else coords
    cols = {}
    for k in idx:
        xp, xm = x0.copy(), x0.copy()
        xp[k] += eps
        xm[k] -= eps
        cols[k] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * eps)
    return cols

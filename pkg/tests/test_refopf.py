"""Interior-point reference solver: optima, KKT residuals, cross-checks."""

import json
import pathlib

import numpy as np
import pytest

from opfproxy.cases import load_case
from opfproxy.grid import parse_case
from opfproxy.powerflow import fdpf_solve, injections
from opfproxy.refopf import (OPFOptions, generation_cost, kkt_residual,
                             solve_opf)

FIXTURES = pathlib.Path(__file__).parent / "fixtures"

ONE_BUS = """
function mpc = one
mpc.baseMVA = 100;
mpc.bus = [ 1 3 50 10 0 0 1 1 0 138 1 1.06 0.94; ];
mpc.gen = [ 1 0 0 80 -80 1 100 1 120 0; ];
mpc.branch = [ ];
mpc.gencost = [ 2 0 0 3 0.1 40 0; ];
"""

## ref gen (expensive) + cheap generator bus + load bus; both regulated
## magnitudes pinned to 1.0 so the dispatch of the cheap unit is the
## only real decision and grid enumeration is exhaustive
THREE_BUS = """
function mpc = three
mpc.baseMVA = 100;
mpc.bus = [
 1 3 0  0 0 0 1 1 0 138 1 1.0 1.0;
 2 2 0  0 0 0 1 1 0 138 1 1.0 1.0;
 3 1 90 20 0 0 1 1 0 138 1 1.10 0.90;
];
mpc.gen = [
 1 0 0 100 -100 1 100 1 200 0;
 2 0 0 100 -100 1 100 1 60 0;
];
mpc.branch = [
 1 3 0.01 0.08 0 0 0 0 0 0 1 -360 360;
 2 3 0.01 0.08 0 0 0 0 0 0 1 -360 360;
];
mpc.gencost = [
 2 0 0 3 0 40 0;
 2 0 0 3 0 15 0;
];
"""


@pytest.fixture(scope="module")
def one_bus():
    return parse_case(ONE_BUS)


@pytest.fixture(scope="module")
def three_bus():
    return parse_case(THREE_BUS)


def test_single_bus_pinned_optimum(one_bus):
    sol = solve_opf(one_bus, one_bus.demand_vector())
    assert sol.status == "optimal"
    ## the balance equality pins Pg at the demand; objective = c(0.5)
    assert sol.pg[0] == pytest.approx(0.5, abs=1e-7)
    assert sol.objective == pytest.approx(generation_cost(one_bus, [0.5]), rel=1e-6)


def test_three_bus_vs_enumeration(three_bus):
    """1-D oracle: sweep the cheap unit's dispatch on a fine grid, let
    the power flow absorb losses into the reference unit, keep the
    feasible minimum."""
    x = three_bus.demand_vector()
    best = np.inf
    for pg2 in np.arange(0.0, 0.6 + 1e-12, 1e-4):
        st = fdpf_solve(three_bus, x, np.array([pg2, 1.0, 1.0]))
        p, _ = injections(three_bus, st.theta, st.vmag)
        pg1 = p[0] + x[0]
        if not (0.0 <= pg1 <= 2.0):
            continue
        best = min(best, generation_cost(three_bus, [pg1, pg2]))
    sol = solve_opf(three_bus, x)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(best, rel=2e-4)
    ## unequal linear costs with no binding line limit: the cheap unit
    ## saturates its upper bound
    assert sol.pg[1] == pytest.approx(0.6, abs=1e-6)


def test_generation_cost_arithmetic(one_bus):
    assert generation_cost(one_bus, [0.0]) == pytest.approx(0.0)
    net = parse_case(ONE_BUS.replace("2 0 0 3 0.1 40 0", "2 0 0 3 3 2 1"))
    ## c(P) = 1 + 2P + 3P^2 in $/MWh terms; per unit P=0.01 is 1 MW
    assert generation_cost(net, [0.01]) == pytest.approx(1 + 2 * 1 + 3 * 1, rel=1e-12)


def test_objective_consistent_with_cost(case118):
    sol = solve_opf(case118, case118.demand_vector())
    assert sol.objective == pytest.approx(generation_cost(case118, sol.pg), abs=1e-9)


def test_kkt_residual_optimal_and_perturbed(one_bus):
    sol = solve_opf(one_bus, one_bus.demand_vector())
    assert kkt_residual(one_bus, sol) <= 1e-6
    sol.pg[0] += 0.01
    assert kkt_residual(one_bus, sol) > 1e-4


def test_failure_reported_not_silent(case9):
    sol = solve_opf(case9, 40.0 * case9.demand_vector(),
                    OPFOptions(max_iter=60))
    assert sol.status != "optimal"


def test_crosscheck_objectives():
    """Frozen objectives from the independent scipy trust-constr model."""
    doc = json.loads((FIXTURES / "crosscheck.json").read_text())
    for name, entry in doc.items():
        net = load_case(name)
        sol = solve_opf(net, net.demand_vector())
        assert sol.status == "optimal"
        rel = abs(sol.objective - entry["objective"]) / abs(entry["objective"])
        assert rel < 1e-3, f"{name}: {sol.objective} vs {entry['objective']}"


def test_self_consistency_with_fdpf(case9, case118):
    for net in (case9, case118):
        x = net.demand_vector()
        sol = solve_opf(net, x)
        st = fdpf_solve(net, x, sol.setpoints(net))
        assert st.converged
        assert np.max(np.abs(st.theta - sol.state.theta)) <= 1e-6
        assert np.max(np.abs(st.vmag - sol.state.vmag)) <= 1e-6


def test_box_relaxation_monotone(three_bus):
    """Widening the binding upper bound can only improve the optimum."""
    x = three_bus.demand_vector()
    tight = solve_opf(three_bus, x).objective
    relaxed_net = parse_case(THREE_BUS.replace(
        " 2 0 0 100 -100 1 100 1 60 0;", " 2 0 0 100 -100 1 100 1 90 0;"))
    relaxed = solve_opf(relaxed_net, x).objective
    assert relaxed <= tight + 1e-9

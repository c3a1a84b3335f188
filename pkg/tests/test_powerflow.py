"""Fast-decoupled solver, injections, residuals, and reconstruction."""

import numpy as np
import pytest

from conftest import central_fd, complex_injections, toy2_solution
from opfproxy.powerflow import (DivergedError, FdpfSolver, PFState,
                                batch_reconstruct, branch_flows, fdpf_solve,
                                injections, newton_solve, pf_residual,
                                reconstruct, state_z1)
from opfproxy.refopf import solve_opf


def _random_state(net, seed, spread=0.2):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-spread, spread, net.n_bus)
    theta[net.partition.ref] = 0.0
    vmag = rng.uniform(0.95, 1.05, net.n_bus)
    return theta, vmag


def test_injections_flat_lossless(toy2):
    p, q = injections(toy2, np.zeros(2), np.ones(2))
    assert np.max(np.abs(p)) == 0.0
    assert np.max(np.abs(q)) == 0.0


def test_injections_at_oracle_point(toy2):
    th, v2 = toy2_solution()
    p, q = injections(toy2, np.array([0.0, th]), np.array([1.0, v2]))
    assert p[1] == pytest.approx(-0.1, abs=1e-10)
    assert q[1] == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("case_name", ["toy2", "case2s", "case9", "case118"])
def test_injections_match_complex_oracle(case_name, request):
    net = request.getfixturevalue(case_name)
    for seed in (0, 1, 2):
        theta, vmag = _random_state(net, seed)
        p, q = injections(net, theta, vmag)
        p_ref, q_ref = complex_injections(net, theta, vmag)
        assert np.max(np.abs(p - p_ref)) < 1e-12
        assert np.max(np.abs(q - q_ref)) < 1e-12


def test_fdpf_toy_matches_bisection(toy2):
    st = fdpf_solve(toy2, toy2.demand_vector(), np.array([1.0]))
    th, v2 = toy2_solution()
    assert st.converged
    assert st.theta[1] == pytest.approx(th, abs=1e-8)
    assert st.vmag[1] == pytest.approx(v2, abs=1e-8)


def test_fdpf_zero_demand_flat(toy2):
    x = np.zeros(4)
    st = fdpf_solve(toy2, x, np.array([1.0]))
    assert st.converged
    assert st.iterations <= 1
    assert np.max(np.abs(st.theta)) == 0.0
    assert np.max(np.abs(st.vmag - 1.0)) == 0.0


def test_fdpf_118_from_opf_setpoints(case118):
    sol = solve_opf(case118, case118.demand_vector())
    assert sol.status == "optimal"
    st = fdpf_solve(case118, case118.demand_vector(), sol.setpoints(case118))
    assert st.converged
    assert st.max_mismatch <= 1e-8


def test_newton_agrees_with_fdpf(case9):
    x = case9.demand_vector()
    sol = solve_opf(case9, x)
    y = sol.setpoints(case9)
    a = fdpf_solve(case9, x, y)
    b = newton_solve(case9, x, y)
    assert a.converged and b.converged
    assert np.max(np.abs(a.theta - b.theta)) <= 1e-6
    assert np.max(np.abs(a.vmag - b.vmag)) <= 1e-6


def test_fdpf_diverges_on_absurd_demand(case9):
    x = 40.0 * case9.demand_vector()
    y = solve_opf(case9, case9.demand_vector()).setpoints(case9)
    with pytest.raises(DivergedError):
        fdpf_solve(case9, x, y)


def test_reconstruct_toy(toy2):
    st = fdpf_solve(toy2, toy2.demand_vector(), np.array([1.0]))
    z2, flows = reconstruct(toy2, st)
    ## lossless line conserves active power; |S| = 0.1 at the sending end
    assert z2[0] == pytest.approx(0.1, abs=1e-8)
    assert z2[-1] == pytest.approx(flows.s2[0], abs=1e-15)
    assert flows.s2[0] == pytest.approx(0.01, rel=1e-3)


def test_reconstruct_flat_zero(toy2):
    st = PFState(theta=np.zeros(2), vmag=np.ones(2), converged=True,
                 iterations=0, max_mismatch=0.0)
    z2, flows = reconstruct(toy2, st, np.zeros(4))
    assert np.max(np.abs(z2)) == 0.0
    assert np.max(np.abs(flows.p)) == 0.0


def test_s2_definitional(case118):
    theta, vmag = _random_state(case118, 7)
    flows = branch_flows(case118, theta, vmag)
    assert np.array_equal(flows.s2, flows.p ** 2 + flows.q ** 2)


def test_residual_solved_state(case9):
    x = case9.demand_vector()
    y = solve_opf(case9, x).setpoints(case9)
    st = fdpf_solve(case9, x, y)
    r = pf_residual(case9, st, x, y)
    assert np.max(np.abs(r)) <= 1e-8


def test_residual_flat_equals_negated_demand(toy2):
    st = PFState(theta=np.zeros(2), vmag=np.ones(2), converged=False,
                 iterations=0, max_mismatch=np.nan)
    x = toy2.demand_vector()
    r = pf_residual(toy2, st, x, np.array([1.0]))
    ## injections vanish at the flat state of a lossless line, leaving
    ## f = 0 - scheduled = +demand in both balance rows
    assert r[0] == pytest.approx(x[1], abs=1e-14)
    assert r[1] == pytest.approx(x[3], abs=1e-14)


def test_residual_composes_from_injections(case118):
    theta, vmag = _random_state(case118, 11)
    st = PFState(theta=theta, vmag=vmag, converged=False, iterations=0,
                 max_mismatch=np.nan)
    x = case118.demand_vector()
    y = solve_opf(case118, x).setpoints(case118)
    r = pf_residual(case118, st, x, y)
    p, q = complex_injections(case118, theta, vmag)
    part = case118.partition
    pg = np.zeros(case118.n_bus)
    pg[part.gen] = y[:part.gen.size]
    sched_p = pg[part.nonref] - x[:case118.n_bus][part.nonref]
    sched_q = -x[case118.n_bus:][part.load]
    expect = np.concatenate([p[part.nonref] - sched_p, q[part.load] - sched_q])
    assert np.max(np.abs(r - expect)) < 1e-12


def test_energy_bookkeeping(case118):
    x = case118.demand_vector()
    sol = solve_opf(case118, x)
    losses = np.sum(sol.pg) - np.sum(x[:case118.n_bus])
    assert losses >= 0.0
    assert losses < 0.1 * np.sum(x[:case118.n_bus])


def test_batch_solve_matches_scalar(case9):
    x = case9.demand_vector()
    y = solve_opf(case9, x).setpoints(case9)
    rng = np.random.default_rng(0)
    xs = x[None, :] * rng.uniform(0.9, 1.1, (16, 1))
    ys = np.tile(y, (16, 1))
    solver = FdpfSolver(case9)
    bpf = solver.solve_batch(xs, ys)
    assert bpf.converged.all()
    for s in range(16):
        st = fdpf_solve(case9, xs[s], y)
        assert np.max(np.abs(bpf.theta[:, s] - st.theta)) < 1e-9
        assert np.max(np.abs(bpf.vmag[:, s] - st.vmag)) < 1e-9


def test_batch_reconstruct_matches_scalar(case118):
    x = case118.demand_vector()
    y = solve_opf(case118, x).setpoints(case118)
    rng = np.random.default_rng(1)
    xs = x[None, :] * rng.uniform(0.9, 1.1, (8, 1))
    solver = FdpfSolver(case118)
    bpf = solver.solve_batch(xs, np.tile(y, (8, 1)))
    assert bpf.converged.all()
    z1b, z2b = batch_reconstruct(case118, bpf.theta, bpf.vmag, xs)
    for s in range(8):
        st = PFState(theta=bpf.theta[:, s], vmag=bpf.vmag[:, s], converged=True,
                     iterations=0, max_mismatch=0.0)
        z2, _ = reconstruct(case118, st, xs[s])
        assert np.max(np.abs(z1b[s] - state_z1(case118, st))) < 1e-12
        assert np.max(np.abs(z2b[s] - z2)) < 1e-12


def test_regulated_voltages_held(case118):
    """Magnitudes named by y stay exactly at their setpoints."""
    x = case118.demand_vector()
    y = solve_opf(case118, x).setpoints(case118)
    st = fdpf_solve(case118, 1.05 * x, y)
    part = case118.partition
    ng = part.gen.size
    assert np.array_equal(st.vmag[part.regulated], y[ng:])
    assert st.theta[part.ref] == 0.0

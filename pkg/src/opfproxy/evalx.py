"""Test-set evaluation of a trained proxy.

Runs the inference pipeline (network forward, power flow, dependent
reconstruction) over a demand set, compares cost against the reference
solver, and aggregates feasibility, load-mismatch, and timing
statistics.
"""
from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, asdict

import numpy as np

from .grid import Network
from .powerflow import FdpfSolver, PFState, injections, reconstruct
from .refopf import OPFOptions, generation_cost, solve_opf
from .trainer import Fcnn, forward


@dataclass
class EvalReport:
    l_cost: float          # mean optimality gap, percent
    l_cost_max: float
    l_v_max: float         # worst inequality violation over z_a, p.u.
    l_v_mean: float
    e_l: float             # mean load mismatch, percent
    e_l_max: float
    t_infer: float         # per-sample inference + PF time, seconds
    t_prop: float          # proxy pipeline total, seconds
    t_opt: float           # reference solver total, seconds
    speedup: float
    n_samples: int
    n_pf_failed: int
    n_ref_failed: int
    environment: str = ""


def optimality_gap(cost_nn: float, cost_ref: float) -> float:
    """Signed percent excess of the proxy cost over the reference cost."""
    if cost_ref <= 0:
        raise ValueError("reference cost must be positive")
    return (cost_nn - cost_ref) / cost_ref * 100.0


def za_bounds(net: Network):
    """Bounds of z_a = [P_g; P_g_ref; Q_g; Q_g_ref; V; s2]."""
    part = net.partition
    gidx = net.gen_index_of_bus
    gens = [net.generators[gidx[b]] for b in part.gen]
    ref = net.generators[gidx[part.ref]]
    lim2 = net.branch_limits2()
    lo = np.concatenate([
        [g.p_min for g in gens], [ref.p_min],
        [g.q_min for g in gens], [ref.q_min],
        [b.v_min for b in net.buses], np.zeros(lim2.size)])
    hi = np.concatenate([
        [g.p_max for g in gens], [ref.p_max],
        [g.q_max for g in gens], [ref.q_max],
        [b.v_max for b in net.buses], lim2])
    return lo, hi


def assemble_za(net: Network, y: np.ndarray, z2: np.ndarray,
                vmag: np.ndarray) -> np.ndarray:
    """One sample's constraint vector in the za_bounds layout."""
    ng = net.partition.n_gen
    return np.concatenate([
        y[:ng], [z2[0]], z2[2:2 + ng], [z2[1]], vmag, z2[2 + ng:]])


def violation_stats(net: Network, za: np.ndarray):
    """(max, mean) elementwise box violation over a (b, k) batch of z_a."""
    lo, hi = za_bounds(net)
    za = np.atleast_2d(za)
    v = np.maximum(za - hi, 0.0) + np.maximum(lo - za, 0.0)
    return float(v.max(initial=0.0)), float(v.mean() if v.size else 0.0)


def load_mismatch(net: Network, state: PFState, x: np.ndarray) -> float:
    """Percent l1 error of the implied load-bus demand against x.

    At load buses the injection is minus the demand, so the solved state
    alone determines the implied demand there; generator-bus demand is
    absorbed exactly by construction and does not enter.
    """
    load = net.partition.load
    n = net.n_bus
    p, q = injections(net, state.theta, state.vmag)
    implied = np.concatenate([-p[load], -q[load]])
    actual = np.concatenate([x[:n][load], x[n:][load]])
    denom = np.abs(actual).sum()
    if denom == 0.0:
        return 0.0
    return float(np.abs(implied - actual).sum() / denom * 100.0)


def _pg_all(net: Network, y: np.ndarray, z2: np.ndarray) -> np.ndarray:
    """Per-generator active output: predicted entries plus the slack slot."""
    gidx = net.gen_index_of_bus
    pg = np.empty(len(net.generators))
    for k, b in enumerate(net.partition.gen):
        pg[gidx[b]] = y[k]
    pg[gidx[net.partition.ref]] = z2[0]
    return pg


def evaluate(net: Network, fcnn: Fcnn, demands: np.ndarray,
             ref_options: OPFOptions = None, solver: FdpfSolver = None,
             progress=None):
    """Full test-set evaluation; returns (EvalReport, per-sample table).

    The proxy pipeline is timed as a whole (batched forward and power
    flow, then per-sample reconstruction); the reference solver runs
    per sample on the same demands.
    """
    if solver is None:
        solver = FdpfSolver(net)
    demands = np.atleast_2d(np.asarray(demands, dtype=float))
    nsamp = demands.shape[0]
    box = net.setpoint_box()
    ng = net.partition.n_gen

    ## proxy pipeline, timed end to end
    t0 = time.perf_counter()
    _, ys = forward(fcnn, demands, box)
    bpf = solver.solve_batch(demands, ys)
    za_rows, mism, costs, states = [], [], [], []
    for s in range(nsamp):
        if not bpf.converged[s]:
            za_rows.append(None); mism.append(np.nan); costs.append(np.nan)
            states.append(None)
            continue
        st = PFState(theta=bpf.theta[:, s], vmag=bpf.vmag[:, s], converged=True,
                     iterations=int(bpf.iterations[s]),
                     max_mismatch=float(bpf.max_mismatch[s]))
        z2, _ = reconstruct(net, st, demands[s])
        za_rows.append(assemble_za(net, ys[s], z2, st.vmag))
        mism.append(load_mismatch(net, st, demands[s]))
        costs.append(generation_cost(net, _pg_all(net, ys[s], z2)))
        states.append(st)
    t_prop = time.perf_counter() - t0

    ## reference solutions, timed over the same samples
    opts = ref_options if ref_options is not None else OPFOptions()
    ref_costs = np.full(nsamp, np.nan)
    t1 = time.perf_counter()
    for s in range(nsamp):
        sol = solve_opf(net, demands[s], opts)
        if sol.status == "optimal":
            ref_costs[s] = sol.objective
        if progress is not None:
            progress(s, nsamp, sol.status)
    t_opt = time.perf_counter() - t1

    ok = np.array([r is not None for r in za_rows]) & np.isfinite(ref_costs)
    gaps = np.array([optimality_gap(c, r) if u else np.nan
                     for c, r, u in zip(costs, ref_costs, ok)])
    za = np.array([r for r in za_rows if r is not None])
    lv_max, lv_mean = violation_stats(net, za) if za.size else (0.0, 0.0)
    mism = np.asarray(mism)
    good_m = np.isfinite(mism)
    n_pf_failed = int(np.sum([r is None for r in za_rows]))
    report = EvalReport(
        l_cost=float(np.nanmean(gaps)) if ok.any() else float("nan"),
        l_cost_max=float(np.nanmax(gaps)) if ok.any() else float("nan"),
        l_v_max=lv_max, l_v_mean=lv_mean,
        e_l=float(mism[good_m].mean()) if good_m.any() else float("nan"),
        e_l_max=float(mism[good_m].max()) if good_m.any() else float("nan"),
        t_infer=t_prop / nsamp if nsamp else 0.0,
        t_prop=t_prop, t_opt=t_opt,
        speedup=t_opt / t_prop if t_prop > 0 else float("nan"),
        n_samples=nsamp, n_pf_failed=n_pf_failed,
        n_ref_failed=int(nsamp - np.isfinite(ref_costs).sum()),
        environment=f"{platform.platform()} / {platform.python_version()}")
    details = {"gap_percent": gaps, "mismatch_percent": mism,
               "cost": np.asarray(costs), "ref_cost": ref_costs,
               "converged": bpf.converged.copy()}
    return report, details


def timing_report(net: Network, fcnn: Fcnn, demands: np.ndarray,
                  ref_options: OPFOptions = None):
    """(T_prop, T_opt, speedup) on a demand set; n/a speedup when empty."""
    demands = np.atleast_2d(np.asarray(demands, dtype=float))
    if demands.shape[0] == 0 or demands.size == 0:
        return 0.0, 0.0, "n/a"
    report, _ = evaluate(net, fcnn, demands, ref_options)
    return report.t_prop, report.t_opt, report.speedup


def report_json(report: EvalReport) -> str:
    return json.dumps(asdict(report), indent=2)


def report_markdown(report: EvalReport) -> str:
    """The summary table, one metric per column."""
    rows = [
        ("mean gap %", f"{report.l_cost:.4f}"),
        ("max gap %", f"{report.l_cost_max:.4f}"),
        ("max violation p.u.", f"{report.l_v_max:.3e}"),
        ("mean violation p.u.", f"{report.l_v_mean:.3e}"),
        ("load mismatch %", f"{report.e_l:.3e}"),
        ("inference s/sample", f"{report.t_infer:.5f}"),
        ("speedup vs reference", f"{report.speedup:.1f}x"),
        ("PF failures", str(report.n_pf_failed)),
        ("reference failures", str(report.n_ref_failed)),
    ]
    head = "| " + " | ".join(r[0] for r in rows) + " |"
    sep = "|" + "|".join(" --- " for _ in rows) + "|"
    body = "| " + " | ".join(r[1] for r in rows) + " |"
    return "\n".join([head, sep, body])

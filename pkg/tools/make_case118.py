#!/usr/bin/env python3
"""Generate the bundled 118-bus case file, deterministically.

Builds a planar-ish meshed network (minimum spanning tree over random
points plus short chords), assigns demands, generator capacities and
polynomial costs from a fixed seed, then solves the nominal OPF once to
set branch ratings at 1.35x the nominal apparent flow (0.30 p.u.
floor, rounded up to 0.01).  The emitted file is parsed back and
checked (nominal OPF optimal, power flow reproducible, perturbed
demands solvable) before freezing.

Run from the repository root:  python3 tools/make_case118.py
"""

import pathlib
import sys
import time

import numpy as np

OUT = pathlib.Path(__file__).resolve().parents[1] / "src/opfproxy/data/case118s.m"

N = 118
N_GEN = 54
M_TARGET = 186
BASE = 100.0
TOTAL_P = 42.42   # p.u.
TOTAL_Q = 14.39
SEED = 118


def build_topology(rng):
    pts = rng.random((N, 2))
    d = np.hypot(pts[:, 0, None] - pts[None, :, 0],
                 pts[:, 1, None] - pts[None, :, 1])
    ## Prim's MST
    in_tree = np.zeros(N, dtype=bool)
    in_tree[0] = True
    best = d[0].copy()
    best_from = np.zeros(N, dtype=int)
    edges = set()
    for _ in range(N - 1):
        cand = np.where(in_tree, np.inf, best)
        j = int(np.argmin(cand))
        i = int(best_from[j])
        edges.add((min(i, j), max(i, j)))
        in_tree[j] = True
        closer = d[j] < best
        best[closer] = d[j][closer]
        best_from[closer] = j
    deg = np.zeros(N, dtype=int)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    ## no radial spurs: give every leaf a second, distinct connection
    for i in np.flatnonzero(deg == 1):
        ranked = np.argsort(d[i])
        for j in ranked[1:]:
            j = int(j)
            if (min(i, j), max(i, j)) not in edges and deg[j] < 8:
                edges.add((min(i, j), max(i, j)))
                deg[i] += 1
                deg[j] += 1
                break
    ## chords: shortest remaining pairs, degree-capped
    iu, ju = np.triu_indices(N, k=1)
    order = np.argsort(d[iu, ju])
    for k in order:
        if len(edges) >= M_TARGET:
            break
        i, j = int(iu[k]), int(ju[k])
        if (i, j) in edges or deg[i] >= 8 or deg[j] >= 8:
            continue
        edges.add((i, j))
        deg[i] += 1
        deg[j] += 1
    out = sorted(edges)
    return pts, d, out


def build_tables(rng):
    pts, d, edges = build_topology(rng)

    gen_buses = np.sort(rng.choice(N, size=N_GEN, replace=False))
    is_gen = np.zeros(N, dtype=bool)
    is_gen[gen_buses] = True
    load_buses = np.flatnonzero(~is_gen)

    ## generator capacities and costs (MW-basis file units)
    cap = np.exp(rng.normal(0.0, 0.8, size=N_GEN))
    cap = cap / cap.sum() * (1.5 * TOTAL_P)
    cap = np.maximum(cap, 0.25)
    ref_bus = int(gen_buses[np.argmax(cap)])
    qcap = np.maximum(0.4, 0.65 * cap)
    c2 = rng.uniform(0.004, 0.040, size=N_GEN)
    c1 = rng.uniform(8.0, 40.0, size=N_GEN)
    c0 = rng.uniform(50.0, 400.0, size=N_GEN)

    ## demands: every load bus plus a subset of generator buses
    demand_buses = np.concatenate([
        load_buses, rng.choice(gen_buses, size=25, replace=False)])
    demand_buses = np.sort(demand_buses)
    w = np.exp(rng.normal(0.0, 0.5, size=demand_buses.size))
    pd = np.zeros(N)
    pd[demand_buses] = w / w.sum() * TOTAL_P
    qd = np.zeros(N)
    ratio = rng.uniform(0.25, 0.45, size=demand_buses.size)
    qd[demand_buses] = pd[demand_buses] * ratio
    qd *= TOTAL_Q / qd.sum()

    ## a few fixed capacitor banks on load buses
    shunt_buses = rng.choice(load_buses, size=8, replace=False)
    bs = np.zeros(N)
    bs[shunt_buses] = np.round(rng.uniform(0.02, 0.20, size=8), 2)

    ## branch impedances scale with geometric length
    fb = np.array([e[0] for e in edges])
    tb = np.array([e[1] for e in edges])
    length = d[fb, tb]
    x = 0.012 + 0.16 * length * rng.uniform(0.85, 1.15, size=len(edges))
    x = np.minimum(x, 0.20)
    r = x / rng.uniform(3.0, 5.0, size=len(edges))

    bus_rows = []
    for i in range(N):
        btype = 3 if i == ref_bus else (2 if is_gen[i] else 1)
        bus_rows.append((i + 1, btype, round(pd[i] * BASE, 3),
                         round(qd[i] * BASE, 3), 0.0,
                         round(bs[i] * BASE, 2), 1, 1.0, 0.0, 138, 1,
                         1.06, 0.94))
    gen_rows = []
    cost_rows = []
    for k, bus in enumerate(gen_buses):
        gen_rows.append((bus + 1, 0.0, 0.0, round(qcap[k] * BASE, 2),
                         round(-qcap[k] * BASE, 2), 1.0, BASE, 1,
                         round(cap[k] * BASE, 2), 0.0))
        cost_rows.append((2, 0, 0, 3, round(c2[k], 5), round(c1[k], 4),
                          round(c0[k], 2)))
    branch_rows = []
    for m in range(len(edges)):
        branch_rows.append([fb[m] + 1, tb[m] + 1, round(r[m], 5),
                            round(x[m], 5), 0.0, 0.0, 0.0, 0.0, 0, 0, 1,
                            -360, 360])
    return bus_rows, gen_rows, branch_rows, cost_rows


def render(bus_rows, gen_rows, branch_rows, cost_rows):
    def table(rows):
        return "\n".join("\t" + "\t".join(_num(v) for v in row) + ";"
                         for row in rows)

    return f"""function mpc = case118s
% 118-bus synthetic transmission system.
mpc.version = '2';
mpc.baseMVA = {BASE:g};

%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin
mpc.bus = [
{table(bus_rows)}
];

%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin
mpc.gen = [
{table(gen_rows)}
];

%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\tangmin\tangmax
mpc.branch = [
{table(branch_rows)}
];

%\tmodel\tstartup\tshutdown\tn\tc2\tc1\tc0
mpc.gencost = [
{table(cost_rows)}
];
"""


def _num(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    f = float(v)
    if f == int(f) and abs(f) < 1e6:
        return str(int(f))
    return repr(round(f, 6))


def main():
    from opfproxy.grid import parse_case
    from opfproxy.powerflow import branch_flows, fdpf_solve, pf_residual
    from opfproxy.refopf import solve_opf

    rng = np.random.default_rng(SEED)
    bus_rows, gen_rows, branch_rows, cost_rows = build_tables(rng)

    net0 = parse_case(render(bus_rows, gen_rows, branch_rows, cost_rows))
    print(f"unrated case: {net0.n_bus} buses, {net0.n_branch} branches, "
          f"{len(net0.generators)} generators")
    t0 = time.perf_counter()
    sol = solve_opf(net0, net0.demand_vector())
    dt = time.perf_counter() - t0
    print(f"nominal OPF: status={sol.status} kkt={sol.kkt_residual:.2e} "
          f"objective={sol.objective:.2f} $/h iters={sol.iterations} ({dt:.2f}s)")
    if sol.status != "optimal":
        sys.exit("nominal OPF failed on the unrated case")

    ## ratings: next standard size (0.4 p.u. ladder, factor-2 steps) above
    ## 1.4x the nominal flow; heterogeneous utilization, a minority tight
    smag = np.sqrt(branch_flows(net0, sol.state.theta, sol.state.vmag).s2)
    need = np.maximum(1.4 * smag, 0.4)
    steps = np.maximum(np.ceil(np.log2(need / 0.4)), 0.0)
    rate = 0.4 * 2.0 ** steps
    for m, row in enumerate(branch_rows):
        row[5] = row[6] = row[7] = round(rate[m] * BASE, 2)

    text = render(bus_rows, gen_rows, branch_rows, cost_rows)
    net = parse_case(text)
    sol2 = solve_opf(net, net.demand_vector())
    print(f"rated OPF: status={sol2.status} kkt={sol2.kkt_residual:.2e} "
          f"objective={sol2.objective:.2f} $/h iters={sol2.iterations}")
    if sol2.status != "optimal":
        sys.exit("nominal OPF failed on the rated case")

    y = sol2.setpoints(net)
    st = fdpf_solve(net, net.demand_vector(), y)
    res = np.abs(pf_residual(net, st, net.demand_vector(), y)).max()
    print(f"power flow from OPF setpoints: converged={st.converged} "
          f"iters={st.iterations} residual={res:.2e}")
    if not st.converged or res > 1e-8:
        sys.exit("power flow reproduction failed")

    ## the whole sampled demand distribution must stay solvable: per-bus
    ## factors, plus the light-load corner (the heavy corner lies outside
    ## the per-bus sampling support and is allowed to congest)
    x0 = net.demand_vector()
    pbus = np.tile(rng.uniform(0.8, 1.2, size=(20, N)), 2)
    for trial, xs in enumerate(list(x0 * pbus) + [0.8 * x0]):
        s = solve_opf(net, xs)
        if s.status != "optimal":
            print(f"perturbed demand {trial}: status={s.status} "
                  f"kkt={s.kkt_residual:.2e}")
            sys.exit("perturbed OPF failed; widen margins")
    print("perturbed demands: 20 random draws + light corner all optimal")

    ## the labeling pipeline must keep the 0.7-threshold branch set at a
    ## small-but-nonempty fraction of all branches
    from opfproxy.augment import (fit_ridge, pseudo_label, reduced_branch_set,
                                  sample_demands)
    from opfproxy.powerflow import reconstruct, state_z1

    gt = sample_demands(net, 100, seed=42)
    labels = [solve_opf(net, gt.demands[s]) for s in range(gt.n)]
    if any(l.status != "optimal" for l in labels):
        sys.exit("labeling OPF failed")
    gt.y = np.array([l.setpoints(net) for l in labels])
    gt.z1 = np.array([state_z1(net, l.state) for l in labels])
    gt.z2 = np.array([reconstruct(net, l.state, gt.demands[s])[0]
                      for s, l in enumerate(labels)])
    model = fit_ridge(gt.subset(np.arange(80)), 0.01, 0.1)
    pool = pseudo_label(model, sample_demands(net, 7000, seed=11), net)
    ng = net.partition.n_gen
    rset = reduced_branch_set(pool.z2[:, 2 + ng:], rate, 0.7)
    frac = rset.size / net.n_branch
    print(f"reduced set at 0.7: {rset.size}/{net.n_branch} ({frac:.3f}), "
          f"pseudo failures={pool.failures}")
    if not 0.10 <= frac <= 0.32:
        sys.exit("reduced-set fraction out of range; adjust the rating ladder")

    OUT.write_text(text)
    print(f"wrote {OUT} ({len(text)} bytes)")


if __name__ == "__main__":
    main()

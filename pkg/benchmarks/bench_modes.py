"""Per-batch cost of each setpoint-gradient mode, stage by stage.

Isolates the gradient computation from everything else a training epoch
does: the forward power flow, loss evaluation, and weight update are run
once to produce a fixed solved batch, then each mode's batch_gradient is
timed repeatedly on that same batch.  This is where the approximation
ladder shows up; a full epoch's wall time is dominated by the forward
power flow, which every mode shares.

    python3 benchmarks/bench_modes.py --case case118s --batch 32
"""

import argparse
import time

import numpy as np

from opfproxy.augment import reduced_branch_set, sample_demands
from opfproxy.cases import load_case
from opfproxy.jacobians import MODES, BatchTensors, GradientEngine, linear_coeffs
from opfproxy.powerflow import FdpfSolver, batch_reconstruct
from opfproxy.refopf import solve_opf


def solved_batch(net, batch, seed):
    """A converged batch at the nominal optimal setpoints."""
    y = solve_opf(net, net.demand_vector()).setpoints(net)
    xs = sample_demands(net, batch, seed=seed).demands
    solver = FdpfSolver(net)
    bpf = solver.solve_batch(xs, np.tile(y, (batch, 1)))
    keep = np.flatnonzero(bpf.converged)
    return xs[keep], BatchTensors(theta=bpf.theta[:, keep], vmag=bpf.vmag[:, keep])


def partials_for(net, n_active, batch, rng):
    """Random loss partials with the right shapes per mode."""
    part = net.partition
    d_y = rng.standard_normal((batch, part.n_setpoint))
    d_z1 = rng.standard_normal((batch, part.n_state))
    d_z2 = rng.standard_normal((batch, 2 + part.n_gen + n_active))
    return d_y, d_z1, d_z2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--case", default="case118s")
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--exact-repeat", type=int, default=10)
    ap.add_argument("--beta", type=float, default=0.7)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    net = load_case(args.case)
    xs, batch = solved_batch(net, args.batch, args.seed)
    b = batch.size
    print(f"case {net.name}: {net.n_bus} buses, {net.n_branch} branches, "
          f"batch of {b}")

    ## mode inputs mirror the trainer: the reduced set comes from the
    ## flow magnitudes of the solved batch, the linearization voltages
    ## from its mean magnitudes
    _, z2 = batch_reconstruct(net, batch.theta, batch.vmag, xs)
    ng = net.partition.n_gen
    rset = reduced_branch_set(z2[:, 2 + ng:], np.sqrt(net.branch_limits2()),
                              args.beta)
    coeffs = linear_coeffs(net, batch.vmag_mean)
    print(f"reduced set: {rset.members.size} of {net.n_branch} branches "
          f"(beta {args.beta})")

    rng = np.random.default_rng(args.seed + 1)
    print()
    print(f"{'mode':<7}{'per batch ms':>14}{'factor ms':>12}{'solve ms':>11}"
          f"{'vs M0':>8}")
    base = None
    order = [m for m in MODES if m != "EXACT"] + ["EXACT"]
    for mode in order:
        subset = None if mode in ("EXACT", "M0") else rset.members
        engine = GradientEngine(net, mode,
                                coeffs if mode in ("M2", "M4") else None, subset)
        n_active = net.n_branch if subset is None else subset.size
        d_y, d_z1, d_z2 = partials_for(net, n_active, b, rng)
        engine.batch_gradient(batch, d_y, d_z1, d_z2)

        repeat = args.exact_repeat if mode == "EXACT" else args.repeat
        wall = np.empty(repeat)
        fac = np.empty(repeat)
        sol = np.empty(repeat)
        for k in range(repeat):
            t0 = time.perf_counter()
            engine.batch_gradient(batch, d_y, d_z1, d_z2)
            wall[k] = time.perf_counter() - t0
            fac[k], sol[k] = engine.stage_seconds
        w = float(np.median(wall)) * 1e3
        if mode == "M0":
            base = w
        ratio = f"{w / base:7.2f}x" if base else f"{'':>8}"
        if mode == "EXACT":
            print(f"{mode:<7}{w:14.3f}{'per-sample':>12}{'':>11}{ratio}")
        else:
            print(f"{mode:<7}{w:14.3f}{np.median(fac) * 1e3:12.3f}"
                  f"{np.median(sol) * 1e3:11.3f}{ratio}")


if __name__ == "__main__":
    main()

"""Timing comparison of the compiled element kernels vs the numpy fallback.

Runs the four hot kernels on identical inputs under both backends and
cross-checks their outputs, then times a full fast-decoupled batch solve
with each backend swapped into the dispatcher.

    python3 benchmarks/bench_kernels.py --case case118s --repeat 300
"""

import argparse
import time

import numpy as np

from opfproxy import kernels
from opfproxy import _kernels_np
from opfproxy.augment import sample_demands
from opfproxy.cases import load_case
from opfproxy.powerflow import FdpfSolver
from opfproxy.refopf import solve_opf

KERNEL_NAMES = ("bus_injections", "nodal_jacobian_data", "branch_flows",
                "branch_jacobian_cols")


def _backends():
    out = {"numpy": _kernels_np}
    try:
        from opfproxy import _kernels_c
        out["cython"] = _kernels_c
    except ImportError:
        pass
    return out


def _median_call(fn, args, repeat):
    fn(*args)
    fn(*args)
    times = np.empty(repeat)
    for k in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times[k] = time.perf_counter() - t0
    return float(np.median(times))


def _state(net, seed):
    ## perturbed but realistic operating point; magnitudes stay near 1
    rng = np.random.default_rng(seed)
    n = net.n_bus
    theta = rng.uniform(-0.3, 0.3, n)
    theta[net.partition.ref] = 0.0
    vmag = rng.uniform(0.95, 1.05, n)
    return theta, vmag


def _kernel_args(net, theta, vmag):
    adm = net.admittance
    p, q = _kernels_np.bus_injections(adm.indptr, adm.indices, adm.g_data,
                                      adm.b_data, theta, vmag)
    nodal = (adm.indptr, adm.indices, adm.g_data, adm.b_data)
    branch = (adm.f, adm.t, adm.yff.real, adm.yff.imag, adm.yft.real, adm.yft.imag)
    return {
        "bus_injections": nodal + (theta, vmag),
        "nodal_jacobian_data": nodal + (theta, vmag, p, q, adm.diag_pos),
        "branch_flows": branch + (theta, vmag),
        "branch_jacobian_cols": branch + (theta, vmag),
    }


def _max_diff(a, b):
    return max(float(np.max(np.abs(np.asarray(u) - np.asarray(v))))
               for u, v in zip(a, b))


def bench_kernels(net, backends, repeat, seed):
    theta, vmag = _state(net, seed)
    args = _kernel_args(net, theta, vmag)
    rows = []
    for name in KERNEL_NAMES:
        outs = {bk: np.atleast_1d(mod.__dict__[name](*args[name]))
                for bk, mod in backends.items()}
        if len(outs) == 2:
            diff = _max_diff(outs["numpy"], outs["cython"])
        else:
            diff = 0.0
        per = {bk: _median_call(mod.__dict__[name], args[name], repeat)
               for bk, mod in backends.items()}
        rows.append((name, per, diff))
    return rows


def bench_solve(net, backends, batch, repeat, seed):
    """End-to-end fast-decoupled batch solve with each backend active.

    The dispatcher's attributes are swapped in place so the whole solver
    stack (injections, mismatch checks) runs through one backend at a
    time; the originals are restored afterwards.
    """
    y = solve_opf(net, net.demand_vector()).setpoints(net)
    xs = sample_demands(net, batch, seed=seed).demands
    ys = np.tile(y, (batch, 1))
    solver = FdpfSolver(net)
    saved = {name: getattr(kernels, name) for name in KERNEL_NAMES}
    per = {}
    try:
        for bk, mod in backends.items():
            for name in KERNEL_NAMES:
                setattr(kernels, name, mod.__dict__[name])
            times = np.empty(repeat)
            for k in range(repeat):
                t0 = time.perf_counter()
                bpf = solver.solve_batch(xs, ys)
                times[k] = time.perf_counter() - t0
            assert bpf.converged.all()
            per[bk] = float(np.median(times))
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)
    return per


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--case", default="case118s")
    ap.add_argument("--repeat", type=int, default=300)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--solve-repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    net = load_case(args.case)
    backends = _backends()
    print(f"case {net.name}: {net.n_bus} buses, {net.n_branch} branches")
    print(f"active dispatcher backend: {kernels.BACKEND}")
    if "cython" not in backends:
        print("compiled extension not importable; numpy only")

    rows = bench_kernels(net, backends, args.repeat, args.seed)
    hdr = f"{'kernel':<22}" + "".join(f"{bk + ' us':>12}" for bk in backends)
    print()
    print(hdr + f"{'speedup':>10}{'max diff':>12}")
    for name, per, diff in rows:
        cells = "".join(f"{per[bk] * 1e6:12.2f}" for bk in backends)
        if len(per) == 2:
            ratio = f"{per['numpy'] / per['cython']:9.2f}x"
        else:
            ratio = f"{'n/a':>10}"
        print(f"{name:<22}{cells}{ratio}{diff:12.2e}")

    per = bench_solve(net, backends, args.batch, args.solve_repeat, args.seed)
    print()
    print(f"fast-decoupled solve, batch of {args.batch}:")
    for bk, sec in per.items():
        print(f"  {bk:<8} {sec * 1e3:9.2f} ms")
    if len(per) == 2:
        print(f"  speedup  {per['numpy'] / per['cython']:8.2f}x")


if __name__ == "__main__":
    main()

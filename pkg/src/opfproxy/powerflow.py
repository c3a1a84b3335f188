"""Inner power-flow solve and dependent-variable reconstruction.

The split places the solver between the predicted setpoints
y = [P_g over gen buses; V over regulated buses] and the state
z1 = [theta over nonref; V over load].  Residual rows are the active
balances at nonref buses followed by the reactive balances at load
buses, each written calculated minus scheduled, so the derivative of a
row w.r.t. its bus generation is -1.

The fast-decoupled iteration uses the XB matrix pair: B' from series
reactances with resistance, charging, taps and bus shunts removed, B''
from the imaginary part of the full admittance matrix.  A Newton
fallback covers the occasional sample the half-step iteration cannot
close.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import splu

from . import kernels
from .grid import Network

TOLERANCE = 1e-8
MAX_PAIRS = 50
NEWTON_MAX = 20


class DivergedError(RuntimeError):
    """Both the fast-decoupled iteration and the Newton fallback failed."""

    def __init__(self, msg: str, max_mismatch: float, iterations: int):
        super().__init__(msg)
        self.max_mismatch = max_mismatch
        self.iterations = iterations


@dataclass
class PFState:
    """Full phasor vector plus solver diagnostics; theta[ref] = 0."""

    theta: np.ndarray
    vmag: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    method: str = "fdpf"

    def phasor_vector(self) -> np.ndarray:
        """[theta; V], the 2N column convention of the Jacobians."""
        return np.concatenate([self.theta, self.vmag])


@dataclass(eq=False)
class BranchFlows:
    """From-end active/reactive flows per branch."""

    p: np.ndarray
    q: np.ndarray

    @cached_property
    def s2(self) -> np.ndarray:
        return self.p ** 2 + self.q ** 2


@dataclass
class SplitVectors:
    """The four vector groups of one operating point."""

    x: np.ndarray   # [P_d; Q_d], length 2N
    y: np.ndarray   # [P_g over gen; V over regulated], length 2N_g+1
    z1: np.ndarray  # [theta over nonref; V over load], length 2N_d+N_g
    z2: np.ndarray  # [P_g_ref; Q_g_ref; Q_g; s2], length 2+N_g+M


## ---------------------------------------------------------------------------
## vector plumbing


def setpoint_parts(net: Network, y: np.ndarray):
    """Split y into (P_g over gen buses, V over regulated buses)."""
    ng = net.partition.gen.size
    return y[:ng], y[ng:]


def assemble_phasors(net: Network, y: np.ndarray, z1=None):
    """Build (theta, vmag) from setpoints and optionally a state vector."""
    part = net.partition
    theta = np.zeros(net.n_bus)
    vmag = np.ones(net.n_bus)
    _, v_reg = setpoint_parts(net, y)
    vmag[part.regulated] = v_reg
    if z1 is not None:
        n1 = part.nonref.size
        theta[part.nonref] = z1[:n1]
        vmag[part.load] = z1[n1:]
    return theta, vmag


def state_z1(net: Network, state: PFState) -> np.ndarray:
    part = net.partition
    return np.concatenate([state.theta[part.nonref], state.vmag[part.load]])


def scheduled_injections(net: Network, x: np.ndarray, y: np.ndarray):
    """Per-bus scheduled (P, Q): generation minus demand."""
    n = net.n_bus
    pg, _ = setpoint_parts(net, y)
    sched_p = -np.asarray(x[:n], dtype=float).copy()
    sched_q = -np.asarray(x[n:], dtype=float).copy()
    sched_p[net.partition.gen] += pg
    return sched_p, sched_q


def injections(net: Network, theta: np.ndarray, vmag: np.ndarray):
    """Net bus injections (P, Q) from the polar summation formulas."""
    adm = net.admittance
    return kernels.bus_injections(adm.indptr, adm.indices, adm.g_data,
                                  adm.b_data, theta, vmag)


def branch_flows(net: Network, theta: np.ndarray, vmag: np.ndarray) -> BranchFlows:
    """From-end branch flows at a state."""
    adm = net.admittance
    p, q = kernels.branch_flows(adm.f, adm.t, adm.yff.real, adm.yff.imag,
                                adm.yft.real, adm.yft.imag, theta, vmag)
    return BranchFlows(p=p, q=q)


def pf_residual(net: Network, state: PFState, x: np.ndarray,
                y: np.ndarray) -> np.ndarray:
    """Residual of the split equations: [P rows over nonref; Q rows over load]."""
    part = net.partition
    p, q = injections(net, state.theta, state.vmag)
    sched_p, sched_q = scheduled_injections(net, x, y)
    return np.concatenate([(p - sched_p)[part.nonref], (q - sched_q)[part.load]])


def reconstruct(net: Network, state: PFState, x: np.ndarray = None):
    """Dependent variables z2 and the branch flows at a solved state.

    z2 = [P_g_ref, Q_g_ref, Q_g over gen buses, s2 per branch].  The
    generator entries absorb the local demand plus the calculated
    injection; ``x`` defaults to the network's nominal demand vector.
    """
    part = net.partition
    n = net.n_bus
    if x is None:
        x = net.demand_vector()
    p, q = injections(net, state.theta, state.vmag)
    pg_ref = x[part.ref] + p[part.ref]
    qg_ref = x[n + part.ref] + q[part.ref]
    qg_gen = x[n + part.gen] + q[part.gen]
    flows = branch_flows(net, state.theta, state.vmag)
    z2 = np.concatenate([[pg_ref], [qg_ref], qg_gen, flows.s2])
    return z2, flows


def split_vectors(net: Network, x: np.ndarray, y: np.ndarray,
                  state: PFState) -> SplitVectors:
    z2, _ = reconstruct(net, state, x)
    return SplitVectors(x=np.asarray(x, dtype=float), y=np.asarray(y, dtype=float),
                        z1=state_z1(net, state), z2=z2)


def batch_reconstruct(net: Network, theta: np.ndarray, vmag: np.ndarray,
                      xs: np.ndarray):
    """Vectorized z1/z2 over a batch of solved states.

    ``theta``/``vmag`` are (N, b) state columns, ``xs`` the matching
    (b, 2N) demands; returns z1 (b, n_state) and z2 (b, 2+N_g+M) rows
    equal to the per-sample ``state_z1``/``reconstruct`` outputs.
    """
    part, n = net.partition, net.n_bus
    adm = net.admittance
    v = vmag * np.exp(1j * theta)
    s = v * np.conj(adm.ybus @ v)
    sf = v[adm.f] * np.conj(adm.yff[:, None] * v[adm.f]
                            + adm.yft[:, None] * v[adm.t])
    z1 = np.hstack([theta[part.nonref].T, vmag[part.load].T])
    pg_ref = xs[:, part.ref] + s.real[part.ref]
    qg_ref = xs[:, n + part.ref] + s.imag[part.ref]
    qg_gen = xs[:, n + part.gen] + s.imag[part.gen].T
    s2 = (sf.real ** 2 + sf.imag ** 2).T
    return z1, np.hstack([pg_ref[:, None], qg_ref[:, None], qg_gen, s2])


## ---------------------------------------------------------------------------
## fast-decoupled solver


@dataclass(eq=False)
class BatchPF:
    """Vectorized solve result; column s belongs to sample s."""

    theta: np.ndarray        # (N, b)
    vmag: np.ndarray         # (N, b)
    converged: np.ndarray    # (b,) bool
    iterations: np.ndarray   # (b,) int
    max_mismatch: np.ndarray  # (b,)


class FdpfSolver:
    """Holds the factorized B'/B'' pair for one network."""

    def __init__(self, net: Network, tol: float = TOLERANCE,
                 max_pairs: int = MAX_PAIRS):
        self.net = net
        self.tol = tol
        self.max_pairs = max_pairs
        part = net.partition
        self.nonref = part.nonref
        self.load = part.load

        buses = tuple(replace(b, shunt_b=0.0) for b in net.buses)
        branches = tuple(replace(br, r=0.0, charging=0.0, tap=1.0)
                         for br in net.branches)
        primed = replace(net, name=net.name + "-bprime", buses=buses,
                         branches=branches)
        bp = (-primed.admittance.ybus.imag).tocsr()
        bpp = (-net.admittance.ybus.imag).tocsr()
        self.bp_lu = splu(bp[self.nonref][:, self.nonref].tocsc())
        self.bpp_lu = splu(bpp[self.load][:, self.load].tocsc())

    ## -- single sample ------------------------------------------------------

    def _mismatch(self, theta, vmag, sched_p, sched_q):
        adm = self.net.admittance
        p, q = kernels.bus_injections(adm.indptr, adm.indices, adm.g_data,
                                      adm.b_data, theta, vmag)
        return (p - sched_p)[self.nonref], (q - sched_q)[self.load]

    def solve(self, x: np.ndarray, y: np.ndarray, init: PFState = None,
              fallback: bool = True) -> PFState:
        """Fast-decoupled iteration with automatic Newton fallback.

        Raises DivergedError when both fail; set ``fallback=False`` to
        get the unconverged fast-decoupled state back instead.
        """
        net = self.net
        theta, vmag = assemble_phasors(net, y)
        if init is not None:
            theta = init.theta.copy()
            theta[net.partition.ref] = 0.0
            vmag[self.load] = init.vmag[self.load]
        sched_p, sched_q = scheduled_injections(net, x, y)

        fp, fq = self._mismatch(theta, vmag, sched_p, sched_q)
        norm = max(np.abs(fp).max(initial=0.0), np.abs(fq).max(initial=0.0))
        it = 0
        while norm > self.tol and it < self.max_pairs:
            it += 1
            theta[self.nonref] -= self.bp_lu.solve(fp / vmag[self.nonref])
            fp, fq = self._mismatch(theta, vmag, sched_p, sched_q)
            norm = max(np.abs(fp).max(initial=0.0), np.abs(fq).max(initial=0.0))
            if norm <= self.tol:
                break
            vmag[self.load] -= self.bpp_lu.solve(fq / vmag[self.load])
            fp, fq = self._mismatch(theta, vmag, sched_p, sched_q)
            norm = max(np.abs(fp).max(initial=0.0), np.abs(fq).max(initial=0.0))
        if norm <= self.tol:
            return PFState(theta, vmag, True, it, float(norm), method="fdpf")
        if fallback:
            state = newton_solve(net, x, y, tol=self.tol)
            state.iterations += it
            return state
        return PFState(theta, vmag, False, it, float(norm), method="fdpf")

    ## -- whole batch --------------------------------------------------------

    def solve_batch(self, xs: np.ndarray, ys: np.ndarray,
                    fallback: bool = True) -> BatchPF:
        """Solve b samples at once; xs is (b, 2N), ys is (b, 2N_g+1).

        All samples start flat.  Convergence is checked at pair
        boundaries; columns that fail within the pair budget are retried
        one by one through the Newton fallback when ``fallback`` is set.
        """
        net = self.net
        n = net.n_bus
        b = xs.shape[0]
        part = net.partition
        ng = part.gen.size

        theta = np.zeros((n, b))
        vmag = np.ones((n, b))
        vmag[part.regulated] = ys[:, ng:].T
        sched_p = -xs[:, :n].T.copy()
        sched_q = -xs[:, n:].T.copy()
        sched_p[part.gen] += ys[:, :ng].T

        ybus = net.admittance.ybus
        conv = np.zeros(b, dtype=bool)
        iters = np.zeros(b, dtype=np.int64)
        mism = np.full(b, np.inf)
        active = np.arange(b)

        def residuals(cols):
            v = vmag[:, cols] * np.exp(1j * theta[:, cols])
            s = v * np.conj(ybus @ v)
            fp = (s.real - sched_p[:, cols])[self.nonref]
            fq = (s.imag - sched_q[:, cols])[self.load]
            return fp, fq

        for it in range(self.max_pairs + 1):
            fp, fq = residuals(active)
            norm = np.maximum(np.abs(fp).max(axis=0, initial=0.0),
                              np.abs(fq).max(axis=0, initial=0.0))
            done = norm <= self.tol
            conv[active[done]] = True
            iters[active[done]] = it
            mism[active[done]] = norm[done]
            if it == self.max_pairs:
                mism[active[~done]] = norm[~done]
                iters[active[~done]] = it
                active = active[~done]
                break
            active = active[~done]
            if active.size == 0:
                break
            fp, fq = fp[:, ~done], fq[:, ~done]
            theta[np.ix_(self.nonref, active)] -= self.bp_lu.solve(
                fp / vmag[np.ix_(self.nonref, active)])
            fp, fq = residuals(active)
            vmag[np.ix_(self.load, active)] -= self.bpp_lu.solve(
                fq / vmag[np.ix_(self.load, active)])

        if fallback and active.size:
            for s in active:
                try:
                    st = self.solve(xs[s], ys[s])
                except DivergedError:
                    continue
                theta[:, s] = st.theta
                vmag[:, s] = st.vmag
                conv[s] = st.converged
                iters[s] = st.iterations
                mism[s] = st.max_mismatch
        return BatchPF(theta=theta, vmag=vmag, converged=conv, iterations=iters,
                       max_mismatch=mism)


@functools.lru_cache(maxsize=8)
def _solver_for(net: Network, tol: float, max_pairs: int) -> FdpfSolver:
    return FdpfSolver(net, tol=tol, max_pairs=max_pairs)


def fdpf_solve(net: Network, x: np.ndarray, y: np.ndarray,
               init: PFState = None, tol: float = TOLERANCE,
               max_pairs: int = MAX_PAIRS) -> PFState:
    """Solve the split power-flow problem for one (x, y) pair.

    Voltage magnitudes at regulated buses are held exactly at y's
    values and theta[ref] = 0.  Raises DivergedError when neither the
    fast-decoupled iteration nor Newton converges.
    """
    return _solver_for(net, tol, max_pairs).solve(x, y, init=init)


def newton_solve(net: Network, x: np.ndarray, y: np.ndarray,
                 init: PFState = None, tol: float = TOLERANCE,
                 max_iter: int = NEWTON_MAX) -> PFState:
    """Full Newton iteration on z1 with step halving, as the fallback."""
    from . import jacobians

    part = net.partition
    theta, vmag = assemble_phasors(net, y)
    if init is not None:
        theta = init.theta.copy()
        theta[part.ref] = 0.0
        vmag[part.load] = init.vmag[part.load]
    sched_p, sched_q = scheduled_injections(net, x, y)
    n1 = part.nonref.size
    plan = jacobians.plan_for(net)

    def full_residual(th, vm):
        adm = net.admittance
        p, q = kernels.bus_injections(adm.indptr, adm.indices, adm.g_data,
                                      adm.b_data, th, vm)
        return np.concatenate([(p - sched_p)[part.nonref],
                               (q - sched_q)[part.load]])

    f = full_residual(theta, vmag)
    norm = np.abs(f).max(initial=0.0)
    for it in range(1, max_iter + 1):
        if norm <= tol:
            return PFState(theta, vmag, True, it - 1, float(norm), method="newton")
        nodal = jacobians.nodal_jacobian(net, theta, vmag)
        lu = splu(plan.state_jacobian(nodal))
        du = lu.solve(-f)
        step = 1.0
        for _ in range(5):
            th_n = theta.copy()
            vm_n = vmag.copy()
            th_n[part.nonref] += step * du[:n1]
            vm_n[part.load] += step * du[n1:]
            f_n = full_residual(th_n, vm_n)
            norm_n = np.abs(f_n).max(initial=0.0)
            if norm_n < norm or norm_n <= tol:
                break
            step *= 0.5
        theta, vmag, f, norm = th_n, vm_n, f_n, norm_n
    if norm <= tol:
        return PFState(theta, vmag, True, max_iter, float(norm), method="newton")
    raise DivergedError(
        f"power flow diverged on {net.name}: max mismatch {norm:.3e} "
        f"after Newton fallback", float(norm), max_iter)

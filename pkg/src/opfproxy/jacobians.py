"""Derivative machinery for the split power-flow formulation.

Covers the exact nodal and branch Jacobians, the implicit sensitivity
solve (the adjoint "k-solve"), the precomputed linearized coefficient
matrices, batch-mean estimation with its error bounds, and the
decoupled variant of the adjoint solve.

Vector conventions (see ``grid.BusPartition``):

* phasor vector: ``[theta_0..theta_{N-1}, V_0..V_{N-1}]`` (length 2N)
* state z1:      ``[theta over nonref, V over load]``
* setpoint y:    ``[P_g over gen, V over regulated]``
* dependent z2:  ``[P_g_ref, Q_g_ref, Q_g over gen, s2 over branches]``
* residual f:    ``[P balance over nonref, Q balance over load]``,
  with f = calculated - scheduled so df/dP_g = -1.
"""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import kernels
from .grid import AdmittanceView, Network

RCOND_LIMIT = 1e-12


class SingularJacobianError(RuntimeError):
    """The state Jacobian block is numerically singular."""


## ---------------------------------------------------------------------------
## exact nodal and branch Jacobians


@dataclass(eq=False)
class NodalJacobian:
    """Four N x N derivative blocks stored on the admittance CSR pattern."""

    indptr: np.ndarray
    indices: np.ndarray
    n: int
    jpt: np.ndarray  # dP/dtheta data
    jpv: np.ndarray  # dP/dV data
    jqt: np.ndarray  # dQ/dtheta data
    jqv: np.ndarray  # dQ/dV data

    def _block(self, data: np.ndarray) -> sparse.csr_matrix:
        return sparse.csr_matrix((data, self.indices, self.indptr),
                                 shape=(self.n, self.n))

    @property
    def jp_theta(self) -> sparse.csr_matrix:
        return self._block(self.jpt)

    @property
    def jp_v(self) -> sparse.csr_matrix:
        return self._block(self.jpv)

    @property
    def jq_theta(self) -> sparse.csr_matrix:
        return self._block(self.jqt)

    @property
    def jq_v(self) -> sparse.csr_matrix:
        return self._block(self.jqv)


def nodal_jacobian(net: Network, theta: np.ndarray, vmag: np.ndarray) -> NodalJacobian:
    """Exact analytic derivatives of the injections w.r.t. [theta; V]."""
    adm = net.admittance
    p, q = kernels.bus_injections(adm.indptr, adm.indices, adm.g_data, adm.b_data,
                                  theta, vmag)
    jpt, jpv, jqt, jqv = kernels.nodal_jacobian_data(
        adm.indptr, adm.indices, adm.g_data, adm.b_data, theta, vmag, p, q,
        adm.diag_pos)
    return NodalJacobian(adm.indptr, adm.indices, net.n_bus, jpt, jpv, jqt, jqv)


@dataclass(eq=False)
class BranchJacobian:
    """From-end flow derivatives, at most four nonzeros per branch row.

    Column convention of the M x 2N matrices is the phasor vector
    [theta; V].  ``s2_grad`` rows are 2p*jab + 2q*jrb.
    """

    f: np.ndarray
    t: np.ndarray
    n: int
    dp: np.ndarray  # (M, 4): d p / d (th_f, th_t, V_f, V_t)
    dq: np.ndarray
    ds2: np.ndarray

    def _mat(self, cols: np.ndarray) -> sparse.csr_matrix:
        m = self.f.size
        rows = np.repeat(np.arange(m), 4)
        col = np.concatenate([self.f, self.t, self.n + self.f, self.n + self.t])
        col = col.reshape(4, m).T.ravel()
        return sparse.csr_matrix((cols.ravel(), (rows, col)), shape=(m, 2 * self.n))

    @property
    def jab(self) -> sparse.csr_matrix:
        return self._mat(self.dp)

    @property
    def jrb(self) -> sparse.csr_matrix:
        return self._mat(self.dq)

    @property
    def s2_grad(self) -> sparse.csr_matrix:
        return self._mat(self.ds2)


def branch_jacobian(net: Network, theta: np.ndarray, vmag: np.ndarray,
                    flows) -> BranchJacobian:
    """Analytic branch-flow derivatives at a state, with the s2 rows.

    ``flows`` must carry from-end ``p`` and ``q`` evaluated at the same
    state (see ``powerflow.branch_flows``).
    """
    adm = net.admittance
    cols = kernels.branch_jacobian_cols(
        adm.f, adm.t, adm.yff.real, adm.yff.imag, adm.yft.real, adm.yft.imag,
        theta, vmag)
    dp = np.stack(cols[:4], axis=1)
    dq = np.stack(cols[4:], axis=1)
    ds2 = 2.0 * flows.p[:, None] * dp + 2.0 * flows.q[:, None] * dq
    return BranchJacobian(adm.f, adm.t, net.n_bus, dp, dq, ds2)


## ---------------------------------------------------------------------------
## index plans: constant sparsity structure per network


@dataclass(eq=False)
class _GatherPlan:
    """Builds a fixed-pattern CSC/CSR matrix from gathered block data."""

    shape: tuple[int, int]
    src: list[np.ndarray]        # per source block, positions into its data array
    perm: np.ndarray             # ordering of the concatenated values
    indices: np.ndarray
    indptr: np.ndarray
    csc: bool

    def build(self, blocks: list[np.ndarray]):
        vals = np.concatenate([b[s] for b, s in zip(blocks, self.src)])[self.perm]
        cls = sparse.csc_matrix if self.csc else sparse.csr_matrix
        return cls((vals, self.indices, self.indptr), shape=self.shape)


def _make_plan(shape, dst_row, dst_col, src_pos, n_blocks, block_of, csc=True):
    """Freeze the assembly of scattered (block, pos) -> (row, col) entries."""
    src = [src_pos[block_of == k] for k in range(n_blocks)]
    order_blocks = np.argsort(block_of, kind="stable")
    ## values will be concatenated in block order; map them to the
    ## sorted-matrix slot order
    if csc:
        order_mat = np.lexsort((dst_row, dst_col))
    else:
        order_mat = np.lexsort((dst_col, dst_row))
    inv = np.empty(dst_row.size, dtype=np.intp)
    inv[order_blocks] = np.arange(dst_row.size)
    perm = inv[order_mat]
    major = dst_col[order_mat] if csc else dst_row[order_mat]
    minor = dst_row[order_mat] if csc else dst_col[order_mat]
    nmajor = shape[1] if csc else shape[0]
    indptr = np.zeros(nmajor + 1, dtype=np.intp)
    np.add.at(indptr, major + 1, 1)
    indptr = np.cumsum(indptr)
    return _GatherPlan(shape=shape, src=src, perm=perm,
                       indices=minor.astype(np.int32), indptr=indptr.astype(np.int32),
                       csc=csc)


class SensitivityPlan:
    """Per-network index plans for the implicit-solve matrices.

    The admittance pattern is constant, so every extraction below is a
    pure gather at run time.  Branch-row plans are built per branch
    subset on demand and cached.
    """

    def __init__(self, net: Network):
        self.net = net
        part = net.partition
        adm = net.admittance
        self.part = part
        self.n1 = part.nonref.size          # theta unknowns / P rows
        self.n2 = part.load.size            # V unknowns / Q rows
        self.n_state = self.n1 + self.n2
        self.n_setpoint = part.n_setpoint
        self.n_gen = part.gen.size

        n = net.n_bus
        indptr, indices = adm.indptr, adm.indices
        rows = np.repeat(np.arange(n), np.diff(indptr))
        cols = indices
        prow = part.prow_of_bus
        qrow = part.qrow_of_bus
        pr_i, pr_j = prow[rows], prow[cols]
        qr_i, qr_j = qrow[rows], qrow[cols]
        pos = np.arange(indices.size)

        ## J_z1 = [[Jpt[nonref,nonref], Jpv[nonref,load]],
        ##         [Jqt[load,nonref],   Jqv[load,load]]]
        segs = []
        mk = (pr_i >= 0) & (pr_j >= 0)
        segs.append((pr_i[mk], pr_j[mk], pos[mk], 0))
        mk = (pr_i >= 0) & (qr_j >= 0)
        segs.append((pr_i[mk], self.n1 + qr_j[mk], pos[mk], 1))
        mk = (qr_i >= 0) & (pr_j >= 0)
        segs.append((self.n1 + qr_i[mk], pr_j[mk], pos[mk], 2))
        mk = (qr_i >= 0) & (qr_j >= 0)
        segs.append((self.n1 + qr_i[mk], self.n1 + qr_j[mk], pos[mk], 3))
        self.plan_z1 = self._plan_from_segs((self.n_state, self.n_state), segs)

        mk = (pr_i >= 0) & (pr_j >= 0)
        self.plan_ptheta = self._plan_from_segs(
            (self.n1, self.n1), [(pr_i[mk], pr_j[mk], pos[mk], 0)])
        mk = (qr_i >= 0) & (qr_j >= 0)
        self.plan_qv = self._plan_from_segs(
            (self.n2, self.n2), [(qr_i[mk], qr_j[mk], pos[mk], 3)])

        ## J_y: C block (constant) plus V columns over regulated buses
        regpos = np.full(n, -1, dtype=np.intp)
        regpos[part.regulated] = np.arange(part.regulated.size)
        self.c_block = np.zeros((self.n_state, self.n_setpoint))
        for k, gbus in enumerate(part.gen):
            self.c_block[prow[gbus], k] = -1.0
        rp_j = regpos[cols]
        mk = (pr_i >= 0) & (rp_j >= 0)
        self.jy_p_flat = (pr_i[mk] * self.n_setpoint + self.n_gen + rp_j[mk])
        self.jy_p_src = pos[mk]
        mk = (qr_i >= 0) & (rp_j >= 0)
        self.jy_q_flat = ((self.n1 + qr_i[mk]) * self.n_setpoint + self.n_gen + rp_j[mk])
        self.jy_q_src = pos[mk]

        ## nodal rows of z2: P_ref, Q_ref, Q over gen buses
        self.z2_nodal_rows = np.concatenate([[part.ref], [part.ref], part.gen])
        self.z2_nodal_kind = np.concatenate([[0], [1], np.ones(part.gen.size)])
        segs_z1, segs_y = [], []
        for r, (bus, kind) in enumerate(zip(self.z2_nodal_rows, self.z2_nodal_kind)):
            lo, hi = indptr[bus], indptr[bus + 1]
            jb = indices[lo:hi]
            pp = np.arange(lo, hi)
            tb, vb = (0, 1) if kind == 0 else (2, 3)  # jpt/jpv vs jqt/jqv
            mk = prow[jb] >= 0
            segs_z1.append((np.full(mk.sum(), r), prow[jb[mk]], pp[mk], tb))
            mk = qrow[jb] >= 0
            segs_z1.append((np.full(mk.sum(), r), self.n1 + qrow[jb[mk]], pp[mk], vb))
            mk = regpos[jb] >= 0
            segs_y.append((np.full(mk.sum(), r), self.n_gen + regpos[jb[mk]], pp[mk], vb))
        self.n_z2_nodal = self.z2_nodal_rows.size
        self.plan_z2n_z1 = self._plan_from_segs(
            (self.n_z2_nodal, self.n_state), segs_z1, csc=False)
        self.plan_z2n_y = self._plan_from_segs(
            (self.n_z2_nodal, self.n_setpoint), segs_y, csc=False)

        self._regpos = regpos
        self._branch_plans: dict = {}

    @staticmethod
    def _plan_from_segs(shape, segs, csc=True):
        dst_row = np.concatenate([s[0] for s in segs]).astype(np.intp)
        dst_col = np.concatenate([s[1] for s in segs]).astype(np.intp)
        src_pos = np.concatenate([s[2] for s in segs]).astype(np.intp)
        block_of = np.concatenate([np.full(s[0].size, s[3], dtype=np.intp) for s in segs])
        return _make_plan(shape, dst_row, dst_col, src_pos, 4, block_of, csc=csc)

    def branch_plans(self, subset=None):
        """CSR plans mapping s2 rows into z1 and y columns.

        ``subset`` is an ascending branch index array or None for all
        branches.  The four source blocks are the ds2 columns
        (th_f, th_t, V_f, V_t).
        """
        key = "all" if subset is None else tuple(int(i) for i in subset)
        if key in self._branch_plans:
            return self._branch_plans[key]
        net, part = self.net, self.part
        adm = net.admittance
        sel = np.arange(net.n_branch) if subset is None else np.asarray(subset, dtype=np.intp)
        prow, qrow, regpos = part.prow_of_bus, part.qrow_of_bus, self._regpos
        segs_z1, segs_y = [], []
        for c, (buses, kind) in enumerate([(adm.f[sel], 0), (adm.t[sel], 1),
                                           (adm.f[sel], 2), (adm.t[sel], 3)]):
            r = np.arange(sel.size)
            if kind < 2:  # theta column of that end
                mk = prow[buses] >= 0
                segs_z1.append((r[mk], prow[buses[mk]], sel[mk], c))
            else:  # voltage column
                mk = qrow[buses] >= 0
                segs_z1.append((r[mk], self.n1 + qrow[buses[mk]], sel[mk], c))
                mk = regpos[buses] >= 0
                segs_y.append((r[mk], self.n_gen + regpos[buses[mk]], sel[mk], c))
        plan_z1 = self._plan_from_segs((sel.size, self.n_state), segs_z1, csc=False)
        if segs_y and sum(s[0].size for s in segs_y):
            plan_y = self._plan_from_segs((sel.size, self.n_setpoint), segs_y, csc=False)
        else:
            plan_y = None
        self._branch_plans[key] = (plan_z1, plan_y, sel)
        return self._branch_plans[key]

    ## -- assembled matrices -------------------------------------------------

    def state_jacobian(self, nodal: NodalJacobian) -> sparse.csc_matrix:
        return self.plan_z1.build([nodal.jpt, nodal.jpv, nodal.jqt, nodal.jqv])

    def decoupled_blocks(self, nodal: NodalJacobian):
        zero = nodal.jpt  # unused source slots
        jp = self.plan_ptheta.build([nodal.jpt, zero, zero, zero])
        jq = self.plan_qv.build([zero, zero, zero, nodal.jqv])
        return jp, jq

    def setpoint_jacobian(self, nodal: NodalJacobian) -> np.ndarray:
        jy = self.c_block.copy()
        flat = jy.ravel()
        flat[self.jy_p_flat] = nodal.jpv[self.jy_p_src]
        flat[self.jy_q_flat] = nodal.jqv[self.jy_q_src]
        return jy

    def dependent_chain(self, nodal: NodalJacobian, bj: BranchJacobian, subset=None):
        """(dz2/dz1, dz2/dy) as sparse row selections, never dense copies.

        Row order is [P_ref, Q_ref, Q_gen..., s2 over the subset].
        """
        plan_z1, plan_y, sel = self.branch_plans(subset)
        blocks_n = [nodal.jpt, nodal.jpv, nodal.jqt, nodal.jqv]
        top_z1 = self.plan_z2n_z1.build(blocks_n)
        top_y = self.plan_z2n_y.build(blocks_n)
        cols = [bj.ds2[:, 0], bj.ds2[:, 1], bj.ds2[:, 2], bj.ds2[:, 3]]
        bot_z1 = plan_z1.build(cols)
        if plan_y is not None:
            bot_y = plan_y.build(cols)
        else:
            bot_y = sparse.csr_matrix((sel.size, self.n_setpoint))
        dz2_dz1 = sparse.vstack([top_z1, bot_z1], format="csr")
        dz2_dy = sparse.vstack([top_y, bot_y], format="csr")
        return dz2_dz1, dz2_dy


@functools.lru_cache(maxsize=8)
def plan_for(net: Network) -> SensitivityPlan:
    return SensitivityPlan(net)


## ---------------------------------------------------------------------------
## implicit partition and the adjoint solves


@dataclass(eq=False)
class ImplicitPartition:
    """State/setpoint Jacobian pair of the residual f at an operating point."""

    j_z1: sparse.csc_matrix
    j_y: np.ndarray
    lu: object
    rcond_estimate: float

    def solve_adjoint(self, rhs: np.ndarray) -> np.ndarray:
        """k with k^T J_z1 = rhs^T (rhs may be (n,) or (n, b))."""
        return self.lu.solve(rhs, trans="T")


def _factorize(mat: sparse.csc_matrix, what: str):
    try:
        lu = splu(mat.tocsc())
    except RuntimeError as exc:
        raise SingularJacobianError(f"{what}: factorization failed ({exc})") from None
    du = np.abs(lu.U.diagonal())
    rcond = float(du.min() / du.max()) if du.size else 0.0
    if not np.isfinite(rcond) or rcond < RCOND_LIMIT:
        raise SingularJacobianError(
            f"{what}: reciprocal condition estimate {rcond:.2e} below {RCOND_LIMIT}")
    return lu, rcond


def implicit_partition(net: Network, nodal: NodalJacobian) -> ImplicitPartition:
    """Extract J_z1 and J_y = [C | df/dV_regulated] from the nodal blocks."""
    plan = plan_for(net)
    j_z1 = plan.state_jacobian(nodal)
    j_y = plan.setpoint_jacobian(nodal)
    lu, rcond = _factorize(j_z1, "state Jacobian")
    return ImplicitPartition(j_z1=j_z1, j_y=j_y, lu=lu, rcond_estimate=rcond)


def decoupled_solve(jp_block: sparse.spmatrix, jq_block: sparse.spmatrix,
                    rhs: np.ndarray):
    """Adjoint solve split into the P-theta and Q-V subsystems.

    ``rhs`` has state layout [theta part; V part]; returns (k_p, k_q)
    solving k_p^T Jp = rhs_theta^T and k_q^T Jq = rhs_v^T.
    """
    n1 = jp_block.shape[0]
    lup, _ = _factorize(jp_block.tocsc(), "P-theta block")
    luq, _ = _factorize(jq_block.tocsc(), "Q-V block")
    k_p = lup.solve(np.asarray(rhs)[..., :n1].T if rhs.ndim == 2 else rhs[:n1],
                    trans="T")
    k_q = luq.solve(np.asarray(rhs)[..., n1:].T if rhs.ndim == 2 else rhs[n1:],
                    trans="T")
    return k_p, k_q


@dataclass
class LossPartials:
    """Partial derivatives of a scalar loss at one operating point.

    d_y has setpoint layout, d_z1 state layout, d_z2 the dependent
    layout [P_ref, Q_ref, Q_gen, s2 over the active branch set].
    """

    d_y: np.ndarray
    d_z1: np.ndarray
    d_z2: np.ndarray


def loss_gradient_exact(net: Network, theta: np.ndarray, vmag: np.ndarray,
                        partials: LossPartials, flows=None,
                        subset=None) -> np.ndarray:
    """Per-sample total derivative d loss / d setpoints via the k-solve.

    dl/dy = dl_y + dl_z2 * dz2/dy - k^T J_y  with
    k^T J_z1 = dl_z1 + dl_z2 * dz2/dz1.  ``flows`` (from-end branch
    flows at the same state) may be passed to skip recomputation.
    """
    from .powerflow import branch_flows as _bf

    if flows is None:
        flows = _bf(net, theta, vmag)
    nodal = nodal_jacobian(net, theta, vmag)
    bj = branch_jacobian(net, theta, vmag, flows)
    plan = plan_for(net)
    imp = implicit_partition(net, nodal)
    dz2_dz1, dz2_dy = plan.dependent_chain(nodal, bj, subset)
    rhs = partials.d_z1 + dz2_dz1.T.dot(partials.d_z2)
    k = imp.solve_adjoint(rhs)
    return partials.d_y + dz2_dy.T.dot(partials.d_z2) - k @ imp.j_y


## ---------------------------------------------------------------------------
## linearized coefficients and batch-mean estimation


@dataclass(eq=False)
class LinearCoeffs:
    """Precomputed linearization coefficients, constant during training.

    Derived under the small-angle assumption and with voltage products
    replaced by the mean pseudo magnitudes ``vbar``.  Every Jacobian
    entry becomes affine in the phasor vector; the arrays below hold the
    per-entry coefficients on the admittance CSR pattern.
    """

    net: Network
    vbar: np.ndarray
    ## off-diagonal entry = c_t * (th_i - th_j) + c_v * V_j (P rows, Q-theta)
    ##                                          or ... * V_i (V-column rows)
    cpt_t: np.ndarray
    cpt_v: np.ndarray
    cpv_t: np.ndarray
    cpv_v: np.ndarray
    cqt_t: np.ndarray
    cqt_v: np.ndarray
    cqv_t: np.ndarray
    cqv_v: np.ndarray
    ## diagonal entries = row sums of neighbor contributions + own V_i term
    own_pv: np.ndarray  # 2*G_ii
    own_qv: np.ndarray  # -2*B_ii
    offdiag_mask: np.ndarray

    def a_offdiag(self, i: int, j: int) -> np.ndarray:
        """The 4x4 coefficient matrix of pair (i, j) acting on
        [th_i, th_j, V_i, V_j] (test-facing accessor)."""
        adm = self.net.admittance
        lo, hi = adm.indptr[i], adm.indptr[i + 1]
        k = lo + int(np.searchsorted(adm.indices[lo:hi], j))
        if k >= hi or adm.indices[k] != j or i == j:
            raise KeyError(f"({i}, {j}) is not an adjacent pair")
        return np.array([
            [self.cpt_t[k], -self.cpt_t[k], 0.0, self.cpt_v[k]],
            [self.cpv_t[k], -self.cpv_t[k], self.cpv_v[k], 0.0],
            [self.cqt_t[k], -self.cqt_t[k], 0.0, self.cqt_v[k]],
            [self.cqv_t[k], -self.cqv_t[k], self.cqv_v[k], 0.0],
        ])

    def a_diag(self, i: int) -> np.ndarray:
        """Dense 4 x 2N coefficient matrix of diagonal entry i
        acting on the full phasor vector (test-facing accessor)."""
        adm = self.net.admittance
        n = self.net.n_bus
        out = np.zeros((4, 2 * n))
        lo, hi = adm.indptr[i], adm.indptr[i + 1]
        for k in range(lo, hi):
            j = adm.indices[k]
            if j == i:
                out[1, n + i] += self.own_pv[i]
                out[3, n + i] += self.own_qv[i]
                continue
            ## neighbor contribution to the row sum
            out[0, i] += -self.cpt_t[k]
            out[0, j] -= -self.cpt_t[k]
            out[0, n + j] += -self.cpt_v[k]
            out[1, i] += self.cpv_t[k] * self.vbar[j] / self.vbar[i]
            out[1, j] -= self.cpv_t[k] * self.vbar[j] / self.vbar[i]
            out[1, n + j] += self.cpv_v[k]
            out[2, i] += -self.cqt_t[k]
            out[2, j] -= -self.cqt_t[k]
            out[2, n + j] += -self.cqt_v[k]
            out[3, i] += self.cqv_t[k] * self.vbar[j] / self.vbar[i]
            out[3, j] -= self.cqv_t[k] * self.vbar[j] / self.vbar[i]
            out[3, n + j] += self.cqv_v[k]
        return out


def linear_coeffs(net: Network, vbar: np.ndarray) -> LinearCoeffs:
    """Precompute the linearized-Jacobian coefficient arrays."""
    adm = net.admittance
    n = net.n_bus
    rows = np.repeat(np.arange(n), np.diff(adm.indptr))
    cols = adm.indices
    g, b = adm.g_data, adm.b_data
    vi, vj = vbar[rows], vbar[cols]
    coeffs = LinearCoeffs(
        net=net, vbar=np.asarray(vbar, dtype=float),
        cpt_t=vi * vj * g, cpt_v=-vi * b,
        cpv_t=vi * b, cpv_v=g.copy(),
        cqt_t=-vi * vj * b, cqt_v=-vi * g,
        cqv_t=vi * g, cqv_v=-b.copy(),
        own_pv=2.0 * g[adm.diag_pos], own_qv=-2.0 * b[adm.diag_pos],
        offdiag_mask=np.ones(g.size),
    )
    coeffs.offdiag_mask[adm.diag_pos] = 0.0
    return coeffs


def linearized_nodal(coeffs: LinearCoeffs, theta: np.ndarray,
                     vmag: np.ndarray) -> NodalJacobian:
    """Jacobian entries affine in the phasor vector (single state or mean)."""
    net = coeffs.net
    adm = net.admittance
    n = net.n_bus
    rows = np.repeat(np.arange(n), np.diff(adm.indptr))
    cols = adm.indices
    dth = theta[rows] - theta[cols]
    vi_s = vmag[rows]
    vj_s = vmag[cols]
    jpt = coeffs.cpt_t * dth + coeffs.cpt_v * vj_s
    jpv = coeffs.cpv_t * dth + coeffs.cpv_v * vi_s
    jqt = coeffs.cqt_t * dth + coeffs.cqt_v * vj_s
    jqv = coeffs.cqv_t * dth + coeffs.cqv_v * vi_s
    ## diagonals: sums of neighbor contributions, then the own V_i terms.
    ## the V-column rows (jpv/jqv) swap vbar_i for vbar_j in the theta
    ## coefficient, which is cpv_t/cqv_t scaled by vbar_j/vbar_i.
    msk = coeffs.offdiag_mask
    scale = coeffs.vbar[cols] / coeffs.vbar[rows]
    d_pt = np.add.reduceat(msk * (-coeffs.cpt_t * dth - coeffs.cpt_v * vj_s),
                           adm.indptr[:-1])
    d_pv = np.add.reduceat(msk * (coeffs.cpv_t * scale * dth + coeffs.cpv_v * vj_s),
                           adm.indptr[:-1])
    d_qt = np.add.reduceat(msk * (-coeffs.cqt_t * dth - coeffs.cqt_v * vj_s),
                           adm.indptr[:-1])
    d_qv = np.add.reduceat(msk * (coeffs.cqv_t * scale * dth + coeffs.cqv_v * vj_s),
                           adm.indptr[:-1])
    dp = adm.diag_pos
    jpt[dp] = d_pt
    jpv[dp] = d_pv + coeffs.own_pv * vmag
    jqt[dp] = d_qt
    jqv[dp] = d_qv + coeffs.own_qv * vmag
    return NodalJacobian(adm.indptr, adm.indices, n, jpt, jpv, jqt, jqv)


@dataclass(eq=False)
class BatchTensors:
    """A batch of phasor vectors and its mean."""

    theta: np.ndarray  # (N, b)
    vmag: np.ndarray   # (N, b)

    @cached_property
    def theta_mean(self) -> np.ndarray:
        return self.theta.mean(axis=1)

    @cached_property
    def vmag_mean(self) -> np.ndarray:
        return self.vmag.mean(axis=1)

    @property
    def size(self) -> int:
        return self.theta.shape[1]


def batch_mean_estimate(coeffs: LinearCoeffs, batch: BatchTensors) -> NodalJacobian:
    """One linearized Jacobian for the whole batch, at the mean phasors."""
    return linearized_nodal(coeffs, batch.theta_mean, batch.vmag_mean)


def offdiag_error_terms(coeffs: LinearCoeffs, batch: BatchTensors):
    """Per-sample absolute deviations of the batch-mean estimate.

    Returns (e_pt, e_qv), each (nnz, b), nonzero only off-diagonal:
    e_pt = |vb_i vb_j G (th_ij - th_ij_mean) - vb_i B (V_j - V_j_mean)|,
    e_qv = |vb_i G (th_ij - th_ij_mean) - B (V_i - V_i_mean)|.
    """
    net = coeffs.net
    adm = net.admittance
    n = net.n_bus
    rows = np.repeat(np.arange(n), np.diff(adm.indptr))
    cols = adm.indices
    dth = batch.theta[rows] - batch.theta[cols]          # (nnz, b)
    dth_dev = dth - dth.mean(axis=1, keepdims=True)
    vj_dev = batch.vmag[cols] - batch.vmag[cols].mean(axis=1, keepdims=True)
    vi_dev = batch.vmag[rows] - batch.vmag[rows].mean(axis=1, keepdims=True)
    msk = coeffs.offdiag_mask[:, None]
    e_pt = np.abs(coeffs.cpt_t[:, None] * dth_dev + coeffs.cpt_v[:, None] * vj_dev) * msk
    e_qv = np.abs(coeffs.cqv_t[:, None] * dth_dev + coeffs.cqv_v[:, None] * vi_dev) * msk
    return e_pt, e_qv


def error_bound_check(coeffs: LinearCoeffs, batch: BatchTensors) -> dict:
    """Diagonal deviation vs its off-diagonal bound, per bus and sample.

    The P-theta diagonal deviation is the negated row sum of the
    off-diagonal deviation arguments, so |diag| <= sum of |terms|; the
    Q-V diagonal adds the own -2 B_ii V_i term, bounded separately.
    """
    net = coeffs.net
    adm = net.admittance
    n = net.n_bus
    rows = np.repeat(np.arange(n), np.diff(adm.indptr))
    cols = adm.indices
    dth = batch.theta[rows] - batch.theta[cols]
    dth_dev = dth - dth.mean(axis=1, keepdims=True)
    vj_dev = batch.vmag[cols] - batch.vmag[cols].mean(axis=1, keepdims=True)
    vi_dev_bus = batch.vmag - batch.vmag.mean(axis=1, keepdims=True)  # (N, b)
    msk = coeffs.offdiag_mask[:, None]

    term_pt = (coeffs.cpt_t[:, None] * dth_dev + coeffs.cpt_v[:, None] * vj_dev) * msk
    e_pt_diag = np.abs(np.add.reduceat(term_pt, adm.indptr[:-1], axis=0))
    bound_pt = np.add.reduceat(np.abs(term_pt), adm.indptr[:-1], axis=0)

    scale = (coeffs.vbar[cols] / coeffs.vbar[rows])[:, None]
    term_qv = (coeffs.cqv_t[:, None] * scale * dth_dev
               + coeffs.cqv_v[:, None] * vj_dev) * msk
    own = coeffs.own_qv[:, None] * vi_dev_bus
    e_qv_diag = np.abs(np.add.reduceat(term_qv, adm.indptr[:-1], axis=0) + own)
    bound_qv = np.add.reduceat(np.abs(term_qv), adm.indptr[:-1], axis=0) + np.abs(own)

    eps = 1e-14
    return {
        "e_pt_diag": e_pt_diag,
        "bound_pt": bound_pt,
        "pt_ok": bool(np.all(e_pt_diag <= bound_pt + eps)),
        "e_qv_diag": e_qv_diag,
        "bound_qv": bound_qv,
        "qv_ok": bool(np.all(e_qv_diag <= bound_qv + eps)),
        "max_deviation": float(max(e_pt_diag.max(initial=0.0),
                                   e_qv_diag.max(initial=0.0))),
    }


## ---------------------------------------------------------------------------
## batch gradient engine (modes M0..M4 plus the EXACT oracle)


MODES = ("EXACT", "M0", "M1", "M2", "M3", "M4")


class GradientEngine:
    """Mode-dispatched d loss / d setpoints for a whole batch.

    M0: batch-mean Jacobians (exact formulas at the mean state), all
    branches.  M1: + reduced branch set.  M2: linearized entries + reduced
    set.  M3: exact-at-mean + decoupled adjoint + reduced set.
    M4: linearized + decoupled + reduced set.  EXACT: per-sample full
    solves (test oracle; all branches).

    ``stage_seconds`` accumulates (factor, solve) wall time of the last
    call: the factor stage covers Jacobian assembly + factorization (the
    per-batch work that is independent of batch size), the solve stage
    the per-sample right-hand sides and back-substitutions.
    """

    def __init__(self, net: Network, mode: str, coeffs: LinearCoeffs = None,
                 subset: np.ndarray = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode in ("M2", "M4") and coeffs is None:
            raise ValueError(f"mode {mode} needs precomputed linear coefficients")
        self.net = net
        self.mode = mode
        self.coeffs = coeffs
        self.plan = plan_for(net)
        self.subset = None if mode in ("EXACT", "M0") else subset
        self.stage_seconds = (0.0, 0.0)

    def batch_gradient(self, batch: BatchTensors, d_y: np.ndarray,
                       d_z1: np.ndarray, d_z2: np.ndarray) -> np.ndarray:
        """Partials are (b, dim) arrays; returns (b, n_setpoint)."""
        if self.mode == "EXACT":
            out = np.empty_like(d_y)
            for s in range(batch.size):
                p = LossPartials(d_y[s], d_z1[s], d_z2[s])
                out[s] = loss_gradient_exact(self.net, batch.theta[:, s],
                                             batch.vmag[:, s], p, subset=self.subset)
            return out

        from .powerflow import branch_flows as _bf

        t0 = time.perf_counter()
        th_m, v_m = batch.theta_mean, batch.vmag_mean
        if self.mode in ("M2", "M4"):
            nodal = linearized_nodal(self.coeffs, th_m, v_m)
        else:
            nodal = nodal_jacobian(self.net, th_m, v_m)
        flows_m = _bf(self.net, th_m, v_m)
        bj = branch_jacobian(self.net, th_m, v_m, flows_m)
        dz2_dz1, dz2_dy = self.plan.dependent_chain(nodal, bj, self.subset)
        if self.mode in ("M3", "M4"):
            jp, jq = self.plan.decoupled_blocks(nodal)
            lup, _ = _factorize(jp, "P-theta block")
            luq, _ = _factorize(jq, "Q-V block")
        else:
            lu, _ = _factorize(self.plan.state_jacobian(nodal), "state Jacobian")
        j_y = self.plan.setpoint_jacobian(nodal)
        t1 = time.perf_counter()

        rhs = d_z1 + dz2_dz1.T.dot(d_z2.T).T        # (b, n_state)
        if self.mode in ("M3", "M4"):
            n1 = self.plan.n1
            k_p = lup.solve(rhs[:, :n1].T, trans="T")
            k_q = luq.solve(rhs[:, n1:].T, trans="T")
            k = np.vstack([k_p, k_q])               # (n_state, b)
        else:
            k = lu.solve(rhs.T, trans="T")
        out = d_y + dz2_dy.T.dot(d_z2.T).T - k.T @ j_y
        t2 = time.perf_counter()
        self.stage_seconds = (t1 - t0, t2 - t1)
        return out


## ---------------------------------------------------------------------------


def dump_triplets(mat, path) -> None:
    """Write a sparse matrix as '# rows cols nnz' header plus 'i j value' lines."""
    coo = sparse.coo_matrix(mat)
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v!r}\n")

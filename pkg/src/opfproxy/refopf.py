"""Reference AC optimal power flow by a primal-dual interior-point method.

Minimizes total polynomial generation cost subject to the full nodal
balance equations, voltage and generator boxes, and squared from-end
flow limits.  Newton steps on the slack-variable log-barrier system
with a fraction-to-boundary rule and a geometrically reduced barrier
parameter.  Exact second derivatives throughout.

Used to label the small supervised sample set and to provide the
per-sample optimality baseline during evaluation.  One aggregated
generator per regulated bus (see grid parsing); ``pg``/``qg`` vectors
follow the network's generator tuple, ascending bus index, reference
included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .grid import Network
from .powerflow import PFState, branch_flows
from . import kernels


@dataclass
class OPFOptions:
    tol: float = 1e-8
    max_iter: int = 150
    mu0: float = 0.1
    sigma: float = 0.1    # barrier reduction factor per step
    tau: float = 0.9995   # fraction-to-boundary
    reg: float = 1e-11    # KKT diagonal regularization
    step_cap: float = 0.5  # max inf-norm of a realized primal step
    trace: bool = False   # print per-iteration residuals


@dataclass
class OPFSolution:
    state: PFState
    pg: np.ndarray
    qg: np.ndarray
    objective: float
    kkt_residual: float
    status: str                     # optimal | infeasible | iteration-limit
    iterations: int = 0
    lam_eq: np.ndarray = None       # multipliers of the 2N balance rows
    z_ineq: np.ndarray = None       # multipliers of the inequality rows
    s_slack: np.ndarray = None

    def setpoints(self, net: Network) -> np.ndarray:
        """The y vector [P_g over gen buses; V over regulated buses]."""
        part = net.partition
        keep = [k for k, g in enumerate(net.generators) if g.bus != part.ref]
        return np.concatenate([self.pg[keep], self.state.vmag[part.regulated]])


def generation_cost(net: Network, pg_all: np.ndarray) -> float:
    """Total polynomial cost in $/h; pg_all covers every generator."""
    g = net.generators
    c0 = np.array([u.c0 for u in g])
    c1 = np.array([u.c1 for u in g])
    c2 = np.array([u.c2 for u in g])
    p = np.asarray(pg_all, dtype=float)
    return float(np.sum(c0 + c1 * p + c2 * p * p))


## ---------------------------------------------------------------------------
## problem geometry


class _Problem:
    """Index bookkeeping and constraint evaluation for one (network, x)."""

    def __init__(self, net: Network, x: np.ndarray):
        self.net = net
        self.x = np.asarray(x, dtype=float)
        part = net.partition
        adm = net.admittance
        n = net.n_bus
        self.n = n
        self.nonref = part.nonref
        self.n1 = part.nonref.size
        gens = net.generators
        self.nu = len(gens)
        self.gen_bus = np.array([g.bus for g in gens])
        self.sl_th = slice(0, self.n1)
        self.sl_v = slice(self.n1, self.n1 + n)
        self.sl_pg = slice(self.n1 + n, self.n1 + n + self.nu)
        self.sl_qg = slice(self.n1 + n + self.nu, self.n1 + n + 2 * self.nu)
        self.nw = self.n1 + n + 2 * self.nu

        self.c0 = np.array([g.c0 for g in gens])
        self.c1 = np.array([g.c1 for g in gens])
        self.c2 = np.array([g.c2 for g in gens])
        self.pmin = np.array([g.p_min for g in gens])
        self.pmax = np.array([g.p_max for g in gens])
        self.qmin = np.array([g.q_min for g in gens])
        self.qmax = np.array([g.q_max for g in gens])
        self.vmin = np.array([b.v_min for b in net.buses])
        self.vmax = np.array([b.v_max for b in net.buses])

        lim2 = net.branch_limits2()
        self.monitored = np.flatnonzero(np.isfinite(lim2))
        self.smax2 = lim2[self.monitored]
        self.n_box = 4 * self.nu + 2 * n
        self.ni = self.n_box + self.monitored.size

        ## generator-to-bus incidence
        self.ag = sparse.csr_matrix(
            (np.ones(self.nu), (self.gen_bus, np.arange(self.nu))),
            shape=(n, self.nu))

        ## constant box Jacobian rows: [pg+, pg-, qg+, qg-, v+, v-]
        rows, cols, vals = [], [], []
        r = 0
        for sl, sign in ((self.sl_pg, 1.0), (self.sl_pg, -1.0),
                         (self.sl_qg, 1.0), (self.sl_qg, -1.0),
                         (self.sl_v, 1.0), (self.sl_v, -1.0)):
            size = sl.stop - sl.start
            rows.extend(range(r, r + size))
            cols.extend(range(sl.start, sl.stop))
            vals.extend([sign] * size)
            r += size
        self.j_box = sparse.csr_matrix((vals, (rows, cols)),
                                       shape=(self.n_box, self.nw))

        ## transpose permutation of the admittance pattern, for Hessians
        nnz = adm.indices.size
        probe = sparse.csr_matrix((np.arange(nnz, dtype=float), adm.indices,
                                   adm.indptr), shape=(n, n))
        self.tpos = np.rint(probe.T.tocsr().data).astype(np.intp)
        self.rows_nnz = np.repeat(np.arange(n), np.diff(adm.indptr))
        self.cols_nnz = adm.indices
        self.diag_mask = np.ones(nnz)
        self.diag_mask[adm.diag_pos] = 0.0

        ## global variable index of each branch-local coordinate
        th_of_bus = np.full(n, -1, dtype=np.intp)
        th_of_bus[part.nonref] = np.arange(self.n1)
        f, t = adm.f[self.monitored], adm.t[self.monitored]
        self.br_vars = np.stack([
            th_of_bus[f], th_of_bus[t],
            self.n1 + f, self.n1 + t,
        ])  # (4, mlim); -1 marks the reference angle (not a variable)

    ## -- pieces -------------------------------------------------------------

    def unpack(self, w):
        theta = np.zeros(self.n)
        theta[self.nonref] = w[self.sl_th]
        return theta, w[self.sl_v], w[self.sl_pg], w[self.sl_qg]

    def cost(self, w):
        p = w[self.sl_pg]
        return float(np.sum(self.c0 + self.c1 * p + self.c2 * p * p))

    def cost_grad(self, w):
        g = np.zeros(self.nw)
        g[self.sl_pg] = self.c1 + 2.0 * self.c2 * w[self.sl_pg]
        return g

    def equalities(self, w):
        theta, v, pg, qg = self.unpack(w)
        adm = self.net.admittance
        p, q = kernels.bus_injections(adm.indptr, adm.indices, adm.g_data,
                                      adm.b_data, theta, v)
        n = self.n
        ce = np.concatenate([
            p + self.x[:n] - self.ag @ pg,
            q + self.x[n:] - self.ag @ qg,
        ])
        return ce, p, q

    def eq_jacobian(self, theta, v, p, q):
        from .jacobians import nodal_jacobian

        nodal = nodal_jacobian(self.net, theta, v)
        jpt = nodal.jp_theta[:, self.nonref]
        jqt = nodal.jq_theta[:, self.nonref]
        zero = sparse.csr_matrix((self.n, self.nu))
        je = sparse.bmat([
            [jpt, nodal.jp_v, -self.ag, zero],
            [jqt, nodal.jq_v, zero, -self.ag],
        ], format="csr")
        return je, nodal

    def inequalities(self, w, flows):
        theta, v, pg, qg = self.unpack(w)
        h = np.concatenate([
            pg - self.pmax, self.pmin - pg,
            qg - self.qmax, self.qmin - qg,
            v - self.vmax, self.vmin - v,
            flows.s2[self.monitored] - self.smax2,
        ])
        return h

    def ineq_jacobian(self, theta, v, flows):
        from .jacobians import branch_jacobian

        if self.monitored.size == 0:
            return self.j_box, None
        bj = branch_jacobian(self.net, theta, v, flows)
        ds2 = bj.ds2[self.monitored]          # (mlim, 4)
        rows = np.repeat(np.arange(self.monitored.size), 4)
        cols = self.br_vars.T.ravel()
        vals = ds2.ravel()
        keep = cols >= 0
        j_s2 = sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])),
                                 shape=(self.monitored.size, self.nw))
        return sparse.vstack([self.j_box, j_s2], format="csr"), bj

    ## -- second derivatives -------------------------------------------------

    def lagrangian_hessian(self, w, lam, z):
        """Hessian of cost + lam . cE + z . h over the variables."""
        theta, v, pg, qg = self.unpack(w)
        adm = self.net.admittance
        n = self.n
        lam_p, lam_q = lam[:n], lam[n:]

        ## nodal part: F = sum_ij Vi Vj (lam_p_i a_ij + lam_q_i b_ij)
        c = np.cos(theta[self.rows_nnz] - theta[self.cols_nnz])
        s = np.sin(theta[self.rows_nnz] - theta[self.cols_nnz])
        g, b = adm.g_data, adm.b_data
        a_e = g * c + b * s
        b_e = g * s - b * c
        lp_i, lq_i = lam_p[self.rows_nnz], lam_q[self.rows_nnz]
        t_e = lp_i * a_e + lq_i * b_e
        u_e = -lp_i * b_e + lq_i * a_e
        tt = t_e[self.tpos]
        ut = u_e[self.tpos]
        vi, vj = v[self.rows_nnz], v[self.cols_nnz]
        msk = self.diag_mask

        htt = msk * vi * vj * (t_e + tt)
        htt_diag = -np.add.reduceat(htt, adm.indptr[:-1])
        htv = msk * vi * (u_e - ut)
        htv_diag = np.add.reduceat(msk * vj * (u_e - ut), adm.indptr[:-1])
        hvv = msk * (t_e + tt)
        hvv_diag = 2.0 * t_e[adm.diag_pos]

        def _blk(data, diag):
            d = data.copy()
            d[adm.diag_pos] = diag
            return sparse.csr_matrix((d, adm.indices, adm.indptr), shape=(n, n))

        b_tt = _blk(htt, htt_diag)[self.nonref][:, self.nonref]
        b_tv = _blk(htv, htv_diag)[self.nonref]
        b_vv = _blk(hvv, hvv_diag)

        zeros_u = sparse.csr_matrix((self.nu, self.nu))
        h_cost = sparse.diags(2.0 * self.c2)
        hess = sparse.bmat([
            [b_tt, b_tv, None, None],
            [b_tv.T, b_vv, None, None],
            [None, None, h_cost, None],
            [None, None, None, zeros_u],
        ], format="csc")

        ## flow-limit part
        if self.monitored.size:
            hess = hess + self._flow_hessian(theta, v, z)
        return hess

    def _flow_hessian(self, theta, v, z):
        adm = self.net.admittance
        sel = self.monitored
        zm = z[self.n_box:]
        f, t = adm.f[sel], adm.t[sel]
        gff, bff = adm.yff.real[sel], adm.yff.imag[sel]
        gft, bft = adm.yft.real[sel], adm.yft.imag[sel]
        th_ij = theta[f] - theta[t]
        c, s = np.cos(th_ij), np.sin(th_ij)
        u_c = gft * c + bft * s
        w_c = bft * c - gft * s
        vi, vj = v[f], v[t]
        p = gff * vi * vi + vi * vj * u_c
        q = -bff * vi * vi - vi * vj * w_c

        m = sel.size
        gp = np.zeros((m, 4))
        gq = np.zeros((m, 4))
        gp[:, 0] = vi * vj * w_c
        gp[:, 1] = -gp[:, 0]
        gp[:, 2] = 2.0 * gff * vi + vj * u_c
        gp[:, 3] = vi * u_c
        gq[:, 0] = vi * vj * u_c
        gq[:, 1] = -gq[:, 0]
        gq[:, 2] = -2.0 * bff * vi - vj * w_c
        gq[:, 3] = -vi * w_c

        hp = np.zeros((m, 4, 4))
        hq = np.zeros((m, 4, 4))
        vvu = vi * vj * u_c
        vvw = vi * vj * w_c
        hp[:, 0, 0] = -vvu
        hp[:, 1, 1] = -vvu
        hp[:, 0, 1] = hp[:, 1, 0] = vvu
        hp[:, 0, 2] = hp[:, 2, 0] = vj * w_c
        hp[:, 0, 3] = hp[:, 3, 0] = vi * w_c
        hp[:, 1, 2] = hp[:, 2, 1] = -vj * w_c
        hp[:, 1, 3] = hp[:, 3, 1] = -vi * w_c
        hp[:, 2, 2] = 2.0 * gff
        hp[:, 2, 3] = hp[:, 3, 2] = u_c
        hq[:, 0, 0] = vvw
        hq[:, 1, 1] = vvw
        hq[:, 0, 1] = hq[:, 1, 0] = -vvw
        hq[:, 0, 2] = hq[:, 2, 0] = vj * u_c
        hq[:, 0, 3] = hq[:, 3, 0] = vi * u_c
        hq[:, 1, 2] = hq[:, 2, 1] = -vj * u_c
        hq[:, 1, 3] = hq[:, 3, 1] = -vi * u_c
        hq[:, 2, 2] = -2.0 * bff
        hq[:, 2, 3] = hq[:, 3, 2] = -w_c

        ## d2(s2) = 2 (gp gp^T + p Hp + gq gq^T + q Hq), weighted by zm
        blocks = 2.0 * zm[:, None, None] * (
            gp[:, :, None] * gp[:, None, :] + p[:, None, None] * hp
            + gq[:, :, None] * gq[:, None, :] + q[:, None, None] * hq)
        rows = np.broadcast_to(self.br_vars.T[:, :, None], (m, 4, 4)).ravel()
        cols = np.broadcast_to(self.br_vars.T[:, None, :], (m, 4, 4)).ravel()
        vals = blocks.ravel()
        keep = (rows >= 0) & (cols >= 0)
        return sparse.coo_matrix((vals[keep], (rows[keep], cols[keep])),
                                 shape=(self.nw, self.nw)).tocsc()


## ---------------------------------------------------------------------------
## the interior-point iteration


def _initial_point(prob) -> np.ndarray:
    """Start on (or near) the balance manifold.

    Capacity-shared dispatch covering demand plus a loss allowance is
    run through the power-flow solver; the solved phasors and the
    reconstructed reactive outputs seed the variables.  Falls back to a
    flat cold start if that power flow diverges.
    """
    from .powerflow import DivergedError, fdpf_solve, reconstruct

    net, x, n = prob.net, prob.x, prob.n
    part = net.partition
    w = np.zeros(prob.nw)
    margin_p = 0.02 * (prob.pmax - prob.pmin)
    margin_q = 0.02 * (prob.qmax - prob.qmin)

    share = np.where(prob.pmax > 0, prob.pmax, 0.0)
    pg0 = share / share.sum() * 1.02 * float(x[:n].sum()) if share.sum() > 0 \
        else 0.5 * (prob.pmin + prob.pmax)
    pg0 = np.clip(pg0, prob.pmin + margin_p, prob.pmax - margin_p)
    v_reg0 = np.clip(1.03, prob.vmin[part.regulated] + 1e-3,
                     prob.vmax[part.regulated] - 1e-3)

    w[prob.sl_v] = np.clip(1.0, prob.vmin + 1e-3, prob.vmax - 1e-3)
    w[prob.sl_pg] = pg0
    w[prob.sl_qg] = 0.5 * (prob.qmin + prob.qmax)
    if part.load.size == 0:
        return w

    keep = [k for k, b in enumerate(prob.gen_bus) if b != part.ref]
    y0 = np.concatenate([pg0[keep], v_reg0])
    try:
        st = fdpf_solve(net, x, y0)
    except DivergedError:
        return w
    z2, _ = reconstruct(net, st, x)
    qg = np.zeros(prob.nu)
    ref_k = int(np.flatnonzero(prob.gen_bus == part.ref)[0])
    qg[ref_k] = z2[1]
    qg[[k for k in range(prob.nu) if k != ref_k]] = z2[2:2 + part.gen.size]
    pg = pg0.copy()
    pg[ref_k] = z2[0]
    w[prob.sl_th] = st.theta[part.nonref]
    w[prob.sl_v] = np.clip(st.vmag, prob.vmin - 0.05, prob.vmax + 0.05)
    w[prob.sl_pg] = np.clip(pg, prob.pmin + margin_p, prob.pmax - margin_p)
    w[prob.sl_qg] = np.clip(qg, prob.qmin + margin_q, prob.qmax - margin_q)
    return w


def _kkt_measures(prob, w, lam, z, s, ce, h, je, ji):
    rd = prob.cost_grad(w) + je.T @ lam + ji.T @ z
    stat = np.abs(rd).max(initial=0.0)
    feas = max(np.abs(ce).max(initial=0.0), h.max(initial=0.0))
    comp = np.abs(s * z).max(initial=0.0)
    dual = max(0.0, -(z.min(initial=0.0)))
    return rd, max(stat, feas, comp, dual), feas


def solve_opf(net: Network, x: np.ndarray, options: OPFOptions = None) -> OPFSolution:
    """Solve the cost-minimal operating point for one demand vector."""
    opt = options or OPFOptions()
    prob = _Problem(net, x)
    n, nw, ni = prob.n, prob.nw, prob.ni

    w = _initial_point(prob)

    theta, v, _, _ = prob.unpack(w)
    flows = branch_flows(net, theta, v)
    ce, p, q = prob.equalities(w)
    h = prob.inequalities(w, flows)
    s = np.maximum(-h, 1e-2)
    mu = opt.mu0
    z = mu / s
    lam = np.zeros(2 * n)

    je, nodal = prob.eq_jacobian(theta, v, p, q)
    ji, _ = prob.ineq_jacobian(theta, v, flows)

    status = "iteration-limit"
    it = 0
    kkt = np.inf
    for it in range(1, opt.max_iter + 1):
        rd, kkt, feas = _kkt_measures(prob, w, lam, z, s, ce, h, je, ji)
        if opt.trace:
            print(f"  it={it:3d} kkt={kkt:9.2e} feas={feas:9.2e} "
                  f"mu={mu:8.1e} gap={float(s @ z) / ni:9.2e} "
                  f"cost={prob.cost(w):12.4f}")
        if kkt <= opt.tol:
            status = "optimal"
            break

        sigma_vec = z / s
        hess = prob.lagrangian_hessian(w, lam, z)
        m_mat = hess + (ji.T @ sparse.diags(sigma_vec) @ ji)
        r_i = h + s
        rhs_w = -(prob.cost_grad(w) + je.T @ lam) - ji.T @ (mu / s + sigma_vec * r_i)
        kkt_mat = sparse.bmat([
            [m_mat + opt.reg * sparse.eye(nw), je.T],
            [je, -opt.reg * sparse.eye(2 * n)],
        ], format="csc")
        try:
            lu = splu(kkt_mat)
        except RuntimeError:
            status = "infeasible"
            break
        sol = lu.solve(np.concatenate([rhs_w, -ce]))
        dw = sol[:nw]
        dlam = sol[nw:]
        ds = -r_i - ji @ dw
        dz = (mu / s - z) - sigma_vec * ds

        neg = ds < 0
        alpha_p = min(1.0, opt.tau * np.min(-s[neg] / ds[neg])) if neg.any() else 1.0
        neg = dz < 0
        alpha_d = min(1.0, opt.tau * np.min(-z[neg] / dz[neg])) if neg.any() else 1.0
        ## damp wild early directions: cap the realized w-step norm
        dw_norm = np.abs(dw).max(initial=0.0)
        if dw_norm * alpha_p > opt.step_cap:
            alpha_p = opt.step_cap / dw_norm
        if max(alpha_p, alpha_d) < 1e-12:
            break
        if opt.trace:
            print(f"        alpha_p={alpha_p:8.2e} alpha_d={alpha_d:8.2e} "
                  f"|dw|={dw_norm:8.2e}")

        w = w + alpha_p * dw
        s = s + alpha_p * ds
        lam = lam + alpha_d * dlam
        z = z + alpha_d * dz

        theta, v, _, _ = prob.unpack(w)
        flows = branch_flows(net, theta, v)
        ce, p, q = prob.equalities(w)
        h = prob.inequalities(w, flows)
        je, nodal = prob.eq_jacobian(theta, v, p, q)
        ji, _ = prob.ineq_jacobian(theta, v, flows)

        gap = float(s @ z) / ni
        ## never drop the barrier far below primal feasibility, or the
        ## inequalities harden while the equalities are still open
        floor = min(1e-4, 1e-2 * float(np.abs(ce).max()) ** 2)
        mu = max(opt.sigma * gap, floor, 1e-14)

    if status != "optimal":
        _, kkt, _ = _kkt_measures(prob, w, lam, z, s, ce, h, je, ji)
        if kkt <= 1e-6:
            status = "optimal"
    theta, v, pg, qg = prob.unpack(w)
    mismatch = float(np.abs(ce).max(initial=0.0))
    state = PFState(theta=theta, vmag=v, converged=(status == "optimal"),
                    iterations=it, max_mismatch=mismatch, method="ipm")
    return OPFSolution(state=state, pg=pg, qg=qg,
                       objective=generation_cost(net, pg),
                       kkt_residual=float(kkt), status=status, iterations=it,
                       lam_eq=lam, z_ineq=z, s_slack=s)


def kkt_residual(net: Network, sol: OPFSolution, x: np.ndarray = None) -> float:
    """Recompute the max-norm KKT residual from a solution's own estimates.

    Max over stationarity, primal feasibility (balances and positive
    inequality parts), dual positivity and complementarity.  ``x``
    defaults to the network's nominal demand; pass the demand the
    solution was produced for otherwise.
    """
    return kkt_residual_at(net, sol, net.demand_vector() if x is None else x)


def kkt_residual_at(net: Network, sol: OPFSolution, x: np.ndarray) -> float:
    prob = _Problem(net, x)
    w = np.zeros(prob.nw)
    w[prob.sl_th] = sol.state.theta[prob.nonref]
    w[prob.sl_v] = sol.state.vmag
    w[prob.sl_pg] = sol.pg
    w[prob.sl_qg] = sol.qg
    theta, v, _, _ = prob.unpack(w)
    flows = branch_flows(net, theta, v)
    ce, p, q = prob.equalities(w)
    h = prob.inequalities(w, flows)
    je, _ = prob.eq_jacobian(theta, v, p, q)
    ji, _ = prob.ineq_jacobian(theta, v, flows)
    s = sol.s_slack if sol.s_slack is not None else np.maximum(-h, 0.0)
    z = sol.z_ineq if sol.z_ineq is not None else np.zeros(prob.ni)
    lam = sol.lam_eq if sol.lam_eq is not None else np.zeros(2 * prob.n)
    _, kkt, _ = _kkt_measures(prob, w, lam, z, s, ce, h, je, ji)
    return float(kkt)

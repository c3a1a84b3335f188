"""Offline cross-check of the reference OPF objective via scipy.

Rebuilds the optimization problem from the raw case data with its own
complex-arithmetic model (admittance assembly, injections, flow limits,
derivatives) and solves it with scipy's trust-constr, sharing nothing
with the in-repo interior-point solver except the case parser.  The
resulting objectives are frozen into tests/fixtures/crosscheck.json and
the unit tests compare the in-repo solver against them.

    python3 tools/crosscheck_opf.py case2s case9 case118s
"""

import json
import pathlib
import sys

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, NonlinearConstraint, minimize

from opfproxy.cases import load_case

FIXTURE = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "crosscheck.json"


def branch_admittances(br):
    """Pi-model two-port entries, turns ratio on the from end."""
    ys = 1.0 / (br.r + 1j * br.x)
    bc = 1j * br.charging / 2.0
    return ((ys + bc) / br.tap ** 2, -ys / br.tap, -ys / br.tap, ys + bc)


def build_ybus(net):
    """Nodal admittance from scratch: branch stamps plus bus shunts."""
    n = net.n_bus
    y = sparse.lil_matrix((n, n), dtype=complex)
    for br in net.branches:
        yff, yft, ytf, ytt = branch_admittances(br)
        f, t = br.from_bus, br.to_bus
        y[f, f] += yff
        y[f, t] += yft
        y[t, f] += ytf
        y[t, t] += ytt
    for b in net.buses:
        y[b.index, b.index] += b.shunt_g + 1j * b.shunt_b
    return y.tocsr()


class Model:
    """AC-OPF in the variable stack [theta offref; V; Pg; Qg]."""

    def __init__(self, net):
        self.net = net
        n = net.n_bus
        part = net.partition
        self.offref = np.array([i for i in range(n) if i != part.ref])
        gens = net.generators
        nu = len(gens)
        self.n, self.nu = n, nu
        self.nw = (n - 1) + n + 2 * nu
        self.sl_v = slice(n - 1, 2 * n - 1)
        self.sl_pg = slice(2 * n - 1, 2 * n - 1 + nu)
        self.sl_qg = slice(2 * n - 1 + nu, self.nw)
        self.ybus = build_ybus(net)
        self.gen_bus = np.array([g.bus for g in gens])
        self.ag = sparse.csr_matrix((np.ones(nu), (self.gen_bus, np.arange(nu))),
                                    shape=(n, nu))
        self.c0 = np.array([g.c0 for g in gens])
        self.c1 = np.array([g.c1 for g in gens])
        self.c2 = np.array([g.c2 for g in gens])
        x = net.demand_vector()
        self.pd, self.qd = x[:n], x[n:]
        lim = np.array([br.s_max for br in net.branches])
        self.mon = np.flatnonzero(np.isfinite(lim))
        self.smax2 = lim[self.mon] ** 2
        self.f = np.array([net.branches[k].from_bus for k in self.mon])
        self.t = np.array([net.branches[k].to_bus for k in self.mon])
        ## from-end flow needs conj of the two-port row:
        ## Sf = conj(yff) vmf^2 + conj(yft) vmf vmt e^{j dth}
        ends = [branch_admittances(net.branches[k]) for k in self.mon]
        self.cff = np.conj([e[0] for e in ends])
        self.cft = np.conj([e[1] for e in ends])

    def voltages(self, w):
        theta = np.zeros(self.n)
        theta[self.offref] = w[:self.n - 1]
        return w[self.sl_v] * np.exp(1j * theta)

    def cost(self, w):
        p = w[self.sl_pg]
        return float(np.sum(self.c0 + self.c1 * p + self.c2 * p * p))

    def cost_grad(self, w):
        g = np.zeros(self.nw)
        g[self.sl_pg] = self.c1 + 2.0 * self.c2 * w[self.sl_pg]
        return g

    def cost_hess(self, w):
        h = np.zeros(self.nw)
        h[self.sl_pg] = 2.0 * self.c2
        return np.diag(h)

    def balance(self, w):
        v = self.voltages(w)
        s = v * np.conj(self.ybus @ v)
        return np.concatenate([
            s.real + self.pd - self.ag @ w[self.sl_pg],
            s.imag + self.qd - self.ag @ w[self.sl_qg],
        ])

    def _ds_dv(self, w):
        ## standard complex-form injection derivatives:
        ## dS/dtheta = j diag(V) conj(diag(I) - Y diag(V))
        ## dS/dVm    = diag(V/|V|) conj(diag(I)) + diag(V) conj(Y diag(V/|V|))
        v = self.voltages(w)
        i = self.ybus @ v
        dv = sparse.diags(v)
        de = sparse.diags(v / np.abs(v))
        ds_dth = 1j * dv @ (sparse.diags(np.conj(i)) - (self.ybus @ dv).conj())
        ds_dvm = de @ sparse.diags(np.conj(i)) + dv @ (self.ybus @ de).conj()
        return ds_dth.tocsr()[:, self.offref], ds_dvm.tocsr()

    def balance_jac(self, w):
        ds_dth, ds_dvm = self._ds_dv(w)
        zero = sparse.csr_matrix((self.n, self.nu))
        top = sparse.hstack([ds_dth.real, ds_dvm.real, -self.ag, zero])
        bot = sparse.hstack([ds_dth.imag, ds_dvm.imag, zero, -self.ag])
        return sparse.vstack([top, bot]).toarray()

    def _sf_polar(self, w):
        theta = np.zeros(self.n)
        theta[self.offref] = w[:self.n - 1]
        vm = w[self.sl_v]
        vmf, vmt = vm[self.f], vm[self.t]
        e = np.exp(1j * (theta[self.f] - theta[self.t]))
        sf = self.cff * vmf ** 2 + self.cft * vmf * vmt * e
        return sf, vmf, vmt, e

    def flows2(self, w):
        sf, _, _, _ = self._sf_polar(w)
        return np.abs(sf) ** 2

    def flows2_jac(self, w):
        ## only the e^{j dth} term of Sf carries the angles, so the four
        ## complex sensitivities below follow directly from _sf_polar;
        ## then d s2 = 2p dp + 2q dq per coordinate.
        sf, vmf, vmt, e = self._sf_polar(w)
        cross = self.cft * vmf * vmt * e
        d_thf = 1j * cross
        d_tht = -1j * cross
        d_vmf = 2.0 * self.cff * vmf + self.cft * vmt * e
        d_vmt = self.cft * vmf * e
        p, q = sf.real, sf.imag

        m = self.mon.size
        jac = np.zeros((m, self.nw))
        pos = np.full(self.n, -1)
        pos[self.offref] = np.arange(self.n - 1)
        rows = np.arange(m)
        for buses, dcomplex, block in ((self.f, d_thf, "th"), (self.t, d_tht, "th"),
                                       (self.f, d_vmf, "vm"), (self.t, d_vmt, "vm")):
            dp, dq = dcomplex.real, dcomplex.imag
            dval = 2.0 * p * dp + 2.0 * q * dq
            if block == "th":
                cols = pos[buses]
                ok = cols >= 0
                np.add.at(jac, (rows[ok], cols[ok]), dval[ok])
            else:
                np.add.at(jac, (rows, (self.n - 1) + buses), dval)
        return jac

    def start(self, feasible_v=1.0):
        w = np.zeros(self.nw)
        w[self.sl_v] = feasible_v
        share = np.array([g.p_max for g in self.net.generators])
        share = share / share.sum()
        pg = np.clip(self.pd.sum() * 1.02 * share,
                     [g.p_min for g in self.net.generators],
                     [g.p_max for g in self.net.generators])
        w[self.sl_pg] = pg
        w[self.sl_qg] = [0.5 * (g.q_min + g.q_max) for g in self.net.generators]
        return w

    def bounds(self):
        lo = np.full(self.nw, -np.inf)
        hi = np.full(self.nw, np.inf)
        lo[:self.n - 1], hi[:self.n - 1] = -np.pi, np.pi
        lo[self.sl_v] = [b.v_min for b in self.net.buses]
        hi[self.sl_v] = [b.v_max for b in self.net.buses]
        lo[self.sl_pg] = [g.p_min for g in self.net.generators]
        hi[self.sl_pg] = [g.p_max for g in self.net.generators]
        lo[self.sl_qg] = [g.q_min for g in self.net.generators]
        hi[self.sl_qg] = [g.q_max for g in self.net.generators]
        return Bounds(lo, hi)


def crosscheck(name):
    net = load_case(name)
    model = Model(net)
    cons = [NonlinearConstraint(model.balance, 0.0, 0.0, jac=model.balance_jac)]
    if model.mon.size:
        cons.append(NonlinearConstraint(model.flows2, -np.inf, model.smax2,
                                        jac=model.flows2_jac))
    res = minimize(model.cost, model.start(), method="trust-constr",
                   jac=model.cost_grad, hess=model.cost_hess,
                   bounds=model.bounds(), constraints=cons,
                   options={"gtol": 1e-9, "xtol": 1e-12, "maxiter": 3000,
                            "verbose": 0})
    feas = float(np.max(np.abs(model.balance(res.x))))
    print(f"{name}: status {res.status} ({res.message.strip()})")
    print(f"  objective {res.fun:.10f}  balance residual {feas:.3e}  "
          f"iters {res.niter}")
    if res.status not in (1, 2) or feas > 1e-7:
        raise RuntimeError(f"{name}: cross-check did not converge cleanly")
    return {"objective": res.fun, "balance_residual": feas,
            "solver": "scipy trust-constr", "demand": "nominal"}


def main(argv):
    names = argv or ["case2s", "case9", "case118s"]
    out = {}
    if FIXTURE.exists():
        out = json.loads(FIXTURE.read_text())
    for name in names:
        out[name] = crosscheck(name)
    FIXTURE.parent.mkdir(parents=True, exist_ok=True)
    FIXTURE.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(f"wrote {FIXTURE}")


if __name__ == "__main__":
    main(sys.argv[1:])

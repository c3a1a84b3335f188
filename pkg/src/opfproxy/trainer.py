"""Training of the setpoint proxy network.

A small fully connected network maps demand vectors to setpoints; the
tanh output is projected into the setpoint box, the power flow fills in
the state, and the loss mixes generation cost, supervision against
pseudo labels, and box-violation penalties. Backpropagation receives
d loss / d setpoints from the gradient engine and carries it through
the projection and the dense layers by hand.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .augment import Dataset, reduced_branch_set
from .grid import Network
from .jacobians import BatchTensors, GradientEngine, linear_coeffs
from .powerflow import FdpfSolver, batch_reconstruct


class TrainingError(RuntimeError):
    """Raised when an epoch cannot proceed (e.g. every sample diverged)."""


## ---------------------------------------------------------------------------
## network


@dataclass
class Fcnn:
    """Dense rectifier network with a tanh output head."""

    sizes: tuple            # (n_in, hidden..., n_out)
    weights: list           # W_l of shape (sizes[l+1], sizes[l])
    biases: list

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.weights + self.biases])


def init_fcnn(sizes, seed: int = 0) -> Fcnn:
    """Uniform fan-in initialization, deterministic under seed."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for n_in, n_out in zip(sizes, sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        ws.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        bs.append(rng.uniform(-bound, bound, size=n_out))
    return Fcnn(tuple(sizes), ws, bs)


def _forward_cache(fcnn: Fcnn, x: np.ndarray):
    """Hidden activations plus the pre-tanh output, batch-first."""
    h = [np.atleast_2d(np.asarray(x, dtype=float))]
    last = len(fcnn.weights) - 1
    for l, (w, b) in enumerate(zip(fcnn.weights, fcnn.biases)):
        a = h[-1] @ w.T + b
        h.append(a if l == last else np.maximum(a, 0.0))
    return h


def forward(fcnn: Fcnn, x: np.ndarray, box) -> tuple[np.ndarray, np.ndarray]:
    """Network output before and after the box projection.

    The tanh head keeps ytil in (-1, 1); the projection is the convex
    combination y = lam*ymax + (1-lam)*ymin with lam = (1+ytil)/2, so y
    lies inside the box for any weights.
    """
    ymin, ymax = box
    single = np.ndim(x) == 1
    ytil = np.tanh(_forward_cache(fcnn, x)[-1])
    lam = 0.5 * (1.0 + ytil)
    y = lam * ymax + (1.0 - lam) * ymin
    if single:
        return ytil[0], y[0]
    return ytil, y


def _backprop(fcnn: Fcnn, h: list, ytil: np.ndarray, g_y: np.ndarray, box):
    """Weight gradients of mean-over-batch loss given per-sample dl/dy."""
    ymin, ymax = box
    b = g_y.shape[0]
    ## through the projection and the tanh head
    delta = g_y * (0.5 * (ymax - ymin)) * (1.0 - ytil**2) / b
    gw = [None] * len(fcnn.weights)
    gb = [None] * len(fcnn.biases)
    for l in range(len(fcnn.weights) - 1, -1, -1):
        gw[l] = delta.T @ h[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ fcnn.weights[l]) * (h[l] > 0.0)
    return gw, gb


@dataclass
class AdamState:
    """Adaptive-moment accumulator over the flattened parameter list."""

    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, fcnn: Fcnn) -> "AdamState":
        zeros = lambda arrs: [np.zeros_like(a) for a in arrs]
        return cls(m=zeros(fcnn.weights + fcnn.biases),
                   v=zeros(fcnn.weights + fcnn.biases))

    def step(self, params: list, grads: list, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


## ---------------------------------------------------------------------------
## losses


@dataclass
class LossWeights:
    w_o: float = 0.1
    w_s: float = 0.1
    w_v: float = 10.0
    w_wp: float = 10.0

    def __post_init__(self):
        if min(self.w_o, self.w_s, self.w_v, self.w_wp) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    total: float = 0.0
    l_o: float = 0.0
    l_s: float = 0.0
    l_c_z2: float = 0.0
    l_c_vd: float = 0.0
    l_wp: float = 0.0


def _unit(v: np.ndarray) -> np.ndarray:
    """Rows scaled to unit length; zero rows stay zero (subgradient)."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0.0, n, 1.0)


def _box_violation(c: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Per-sample l2 norms of upper and lower box violations + gradient."""
    up = np.maximum(c - hi, 0.0)
    dn = np.maximum(lo - c, 0.0)
    val = np.linalg.norm(up, axis=-1) + np.linalg.norm(dn, axis=-1)
    return val, _unit(up) - _unit(dn)


class _LossGeometry:
    """Fixed index maps and bounds shared by every batch of one run."""

    def __init__(self, net: Network, subset):
        part = net.partition
        self.net = net
        self.ng = part.n_gen
        self.n1 = part.n_state
        self.nonref = part.nonref
        self.load = part.load
        self.regulated = part.regulated
        self.subset = None if subset is None else np.asarray(subset, dtype=int)

        gidx = net.gen_index_of_bus
        ref_gen = net.generators[gidx[part.ref]]
        gens = [net.generators[gidx[b]] for b in part.gen]
        all_gens = net.generators
        self.c1 = np.array([g.c1 for g in all_gens])
        self.c2 = np.array([g.c2 for g in all_gens])
        self.c0 = np.array([g.c0 for g in all_gens])
        self.ref_slot = gidx[part.ref]
        self.gen_slots = np.array([gidx[b] for b in part.gen], dtype=np.intp)

        lim2 = net.branch_limits2()
        s2_hi = lim2 if self.subset is None else lim2[self.subset]
        ## z2 layout: [P_ref, Q_ref, Q_g over gen, s2 over active set]
        self.z2_lo = np.concatenate([
            [ref_gen.p_min, ref_gen.q_min],
            [g.q_min for g in gens], np.zeros(s2_hi.size)])
        self.z2_hi = np.concatenate([
            [ref_gen.p_max, ref_gen.q_max],
            [g.q_max for g in gens], s2_hi])
        self.vd_lo = np.array([net.buses[b].v_min for b in part.load])
        self.vd_hi = np.array([net.buses[b].v_max for b in part.load])

    def z2_active(self, z2_full: np.ndarray) -> np.ndarray:
        if self.subset is None:
            return z2_full
        head = 2 + self.ng
        return np.hstack([z2_full[:, :head], z2_full[:, head + self.subset]])

    def full_v(self, y: np.ndarray, z1: np.ndarray) -> np.ndarray:
        v = np.empty((y.shape[0], self.net.n_bus))
        v[:, self.regulated] = y[:, self.ng:]
        v[:, self.load] = z1[:, self.nonref.size:]
        return v


def warmup_loss(net: Network, y: np.ndarray, pseudo_y: np.ndarray,
                weights: LossWeights):
    """Supervised warm-up loss and its setpoint gradient, batch-first."""
    y = np.atleast_2d(y)
    pseudo_y = np.atleast_2d(pseudo_y)
    ng = net.partition.n_gen
    ep = y[:, :ng] - pseudo_y[:, :ng]
    ev = y[:, ng:] - pseudo_y[:, ng:]
    per = np.linalg.norm(ep, axis=1) + weights.w_wp * np.linalg.norm(ev, axis=1)
    g = np.hstack([_unit(ep), weights.w_wp * _unit(ev)])
    bd = LossBreakdown(total=float(per.mean()), l_wp=float(per.mean()))
    return bd, g


def full_loss(net: Network, y, z1, z2, pseudo_y, pseudo_z1,
              weights: LossWeights, subset=None):
    """Total loss L_c + w_o L_o + w_s L_s on a completed batch."""
    geom = _LossGeometry(net, subset)
    bd, _, _, _ = _full_loss_partials(geom, np.atleast_2d(y), np.atleast_2d(z1),
                                      geom.z2_active(np.atleast_2d(z2)),
                                      np.atleast_2d(pseudo_y),
                                      np.atleast_2d(pseudo_z1), weights)
    return bd


def _full_loss_partials(geom: _LossGeometry, y, z1, z2a, pseudo_y, pseudo_z1,
                        weights: LossWeights):
    """LossBreakdown plus (d_y, d_z1, d_z2) batch arrays.

    The cost term on the predicted P_g and the P_g/V parts of L_s land
    in d_y; the V_d violation and the load-voltage part of L_s in d_z1;
    the z2 violation and the slack-generator cost in d_z2.
    """
    w = weights
    ng, n1 = geom.ng, geom.n1
    b = y.shape[0]
    d_y = np.zeros_like(y)
    d_z1 = np.zeros((b, n1))
    d_z2 = np.zeros_like(z2a)

    ## generation cost over every unit: predicted P_g plus the slack slot
    pg = np.empty((b, geom.c1.size))
    pg[:, geom.gen_slots] = y[:, :ng]
    pg[:, geom.ref_slot] = z2a[:, 0]
    l_o = (geom.c0 + geom.c1 * pg + geom.c2 * pg**2).sum(axis=1)
    d_cost = w.w_o * (geom.c1 + 2.0 * geom.c2 * pg)
    d_y[:, :ng] += d_cost[:, geom.gen_slots]
    d_z2[:, 0] += d_cost[:, geom.ref_slot]

    ## supervision on P_g and the full voltage vector
    ep = y[:, :ng] - pseudo_y[:, :ng]
    ev = geom.full_v(y, z1) - geom.full_v(pseudo_y, pseudo_z1)
    l_s = np.linalg.norm(ep, axis=1) + np.linalg.norm(ev, axis=1)
    d_y[:, :ng] += w.w_s * _unit(ep)
    gv = w.w_s * _unit(ev)
    d_y[:, ng:] += gv[:, geom.regulated]
    d_z1[:, geom.nonref.size:] += gv[:, geom.load]

    ## box violations of the dependent variables and the load voltages
    l_z2, g_z2 = _box_violation(z2a, geom.z2_lo, geom.z2_hi)
    d_z2 += g_z2
    vd = z1[:, geom.nonref.size:]
    l_vd, g_vd = _box_violation(vd, geom.vd_lo, geom.vd_hi)
    d_z1[:, geom.nonref.size:] += w.w_v * g_vd

    total = l_z2 + w.w_v * l_vd + w.w_o * l_o + w.w_s * l_s
    bd = LossBreakdown(total=float(total.mean()), l_o=float(l_o.mean()),
                       l_s=float(l_s.mean()), l_c_z2=float(l_z2.mean()),
                       l_c_vd=float(l_vd.mean()))
    return bd, d_y, d_z1, d_z2


## ---------------------------------------------------------------------------
## the training loop


@dataclass
class TrainConfig:
    mode: str = "M4"
    hidden: tuple = (50,)
    batch_size: int = 32
    n_warmup: int = 1
    n_total: int = 100
    lr: float = 5e-4
    milestones: tuple = (90,)
    gamma: float = 0.2
    seed: int = 0
    beta: float = 0.7

    def __post_init__(self):
        if not 0 <= self.n_warmup <= self.n_total:
            raise ValueError("need 0 <= n_warmup <= n_total")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


@dataclass
class TrainRun:
    model: Fcnn
    config: TrainConfig
    weights: LossWeights
    history: list = field(default_factory=list)
    subset: np.ndarray = None
    fdpf_failures: int = 0
    seconds: float = 0.0


class Trainer:
    """One training run's mutable state, stepped batch by batch."""

    def __init__(self, net: Network, dataset: Dataset, config: TrainConfig,
                 weights: LossWeights = None, subset: np.ndarray = None):
        if not dataset.labeled:
            raise ValueError("training needs a completed dataset")
        self.net = net
        self.data = dataset
        self.config = config
        self.weights = weights if weights is not None else LossWeights()
        self.box = net.setpoint_box()
        self.solver = FdpfSolver(net)
        self.rng = np.random.default_rng(config.seed)
        sizes = (2 * net.n_bus,) + tuple(config.hidden) + (net.partition.n_setpoint,)
        self.model = init_fcnn(sizes, seed=config.seed)
        self.opt = AdamState.fresh(self.model)
        self.lr = config.lr
        self.fdpf_failures = 0
        self._t_factor = self._t_solve = self._t_pf = 0.0

        ng = net.partition.n_gen
        if config.mode in ("EXACT", "M0"):
            self.subset = None
        elif subset is not None:
            self.subset = np.asarray(subset, dtype=np.intp)
        else:
            rset = reduced_branch_set(dataset.z2[:, 2 + ng:],
                                      np.sqrt(net.branch_limits2()), config.beta)
            self.subset = rset.members
        coeffs = None
        if config.mode in ("M2", "M4"):
            vbar = np.empty(net.n_bus)
            vbar[net.partition.regulated] = dataset.y[:, ng:].mean(axis=0)
            vbar[net.partition.load] = \
                dataset.z1[:, net.partition.nonref.size:].mean(axis=0)
            coeffs = linear_coeffs(net, vbar)
        self.engine = GradientEngine(net, config.mode, coeffs, self.subset)
        self.geom = _LossGeometry(net, self.subset)

    def backward_step(self, idx: np.ndarray, phase: str) -> LossBreakdown:
        """One mini-batch update; returns the batch's loss terms."""
        xs = self.data.demands[idx]
        h = _forward_cache(self.model, xs)
        ytil = np.tanh(h[-1])
        lam = 0.5 * (1.0 + ytil)
        y = lam * self.box[1] + (1.0 - lam) * self.box[0]

        if phase == "warmup":
            bd, g_y = warmup_loss(self.net, y, self.data.y[idx], self.weights)
        else:
            t0 = time.perf_counter()
            bpf = self.solver.solve_batch(xs, y)
            self._t_pf += time.perf_counter() - t0
            keep = np.flatnonzero(bpf.converged)
            self.fdpf_failures += idx.size - keep.size
            if keep.size == 0:
                raise TrainingError("power flow diverged on a whole batch")
            if keep.size < idx.size:
                idx = idx[keep]
                xs, ytil, y = xs[keep], ytil[keep], y[keep]
                h = [a[keep] for a in h]
            theta, vmag = bpf.theta[:, keep], bpf.vmag[:, keep]
            z1, z2 = batch_reconstruct(self.net, theta, vmag, xs)
            bd, d_y, d_z1, d_z2 = _full_loss_partials(
                self.geom, y, z1, self.geom.z2_active(z2),
                self.data.y[idx], self.data.z1[idx], self.weights)
            g_y = self.engine.batch_gradient(BatchTensors(theta=theta, vmag=vmag),
                                             d_y, d_z1, d_z2)
            fac, sol = self.engine.stage_seconds
            self._t_factor += fac
            self._t_solve += sol

        gw, gb = _backprop(self.model, h, ytil, g_y, self.box)
        self.opt.step(self.model.weights + self.model.biases, gw + gb, self.lr)
        return bd

    def run_epoch(self, epoch: int) -> dict:
        """Shuffle, sweep every mini-batch, and log one history row."""
        cfg = self.config
        phase = "warmup" if epoch <= cfg.n_warmup else "full"
        self.lr = cfg.lr * cfg.gamma ** sum(epoch > m for m in cfg.milestones)
        order = self.rng.permutation(self.data.n)
        t0 = time.perf_counter()
        fails0 = self.fdpf_failures
        self._t_factor = self._t_solve = self._t_pf = 0.0
        terms = np.zeros(6)
        nb = 0
        for at in range(0, order.size, cfg.batch_size):
            bd = self.backward_step(order[at:at + cfg.batch_size], phase)
            terms += (bd.total, bd.l_o, bd.l_s, bd.l_c_z2, bd.l_c_vd, bd.l_wp)
            nb += 1
        terms /= max(nb, 1)
        return {"epoch": epoch, "phase": phase,
                "total": terms[0], "l_o": terms[1], "l_s": terms[2],
                "l_c_z2": terms[3], "l_c_vd": terms[4], "l_wp": terms[5],
                "seconds": time.perf_counter() - t0,
                "factor_seconds": self._t_factor, "solve_seconds": self._t_solve,
                "pf_seconds": self._t_pf,
                "fdpf_failures": self.fdpf_failures - fails0,
                "lr": self.lr}


def train(net: Network, dataset: Dataset, config: TrainConfig,
          weights: LossWeights = None, log=None, subset=None) -> TrainRun:
    """Run the full schedule: warm-up epochs, then the composite loss.

    ``log`` receives each epoch's history row as it completes; a
    precomputed reduced branch ``subset`` overrides the dataset-derived
    one for the reduced modes.
    """
    trainer = Trainer(net, dataset, config, weights, subset=subset)
    run = TrainRun(model=trainer.model, config=config, weights=trainer.weights,
                   subset=trainer.subset)
    t0 = time.perf_counter()
    for epoch in range(1, config.n_total + 1):
        row = trainer.run_epoch(epoch)
        run.history.append(row)
        if log is not None:
            log(row)
    run.fdpf_failures = trainer.fdpf_failures
    run.seconds = time.perf_counter() - t0
    return run


def evaluate_loss(net: Network, fcnn: Fcnn, dataset: Dataset,
                  weights: LossWeights, subset=None,
                  solver: FdpfSolver = None) -> LossBreakdown:
    """Mean composite loss of a model over a completed dataset.

    Runs the whole forward path (network, power flow, reconstruction);
    diverged samples are dropped. Used for validation tracking and for
    end-to-end gradient checks.
    """
    if solver is None:
        solver = FdpfSolver(net)
    geom = _LossGeometry(net, subset)
    _, y = forward(fcnn, dataset.demands, net.setpoint_box())
    bpf = solver.solve_batch(dataset.demands, y)
    keep = np.flatnonzero(bpf.converged)
    z1, z2 = batch_reconstruct(net, bpf.theta[:, keep], bpf.vmag[:, keep],
                               dataset.demands[keep])
    bd, _, _, _ = _full_loss_partials(geom, y[keep], z1, geom.z2_active(z2),
                                      dataset.y[keep], dataset.z1[keep], weights)
    return bd

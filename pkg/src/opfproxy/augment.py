"""Pseudo-labeled dataset construction.

A small ridge regression maps demand vectors to approximate setpoints;
each approximation is clamped into its box and completed into a
physically consistent sample by the fast-decoupled power flow. The
completed samples also score which branches ever approach their thermal
rating, giving the reduced branch set used by the cheaper gradient
modes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Network
from .powerflow import FdpfSolver, batch_reconstruct

GROUND_TRUTH = "ground-truth"
PSEUDO = "pseudo"


@dataclass
class Dataset:
    """Demand samples with optional per-sample labels.

    ``demands`` is (n, 2N).  When labels are present, ``y`` holds the
    setpoints, ``z1`` the solved states and ``z2`` the dependent
    variables, row s of each belonging to row s of ``demands``.
    ``provenance`` tags each labeled row as ground truth or pseudo.
    """

    demands: np.ndarray
    y: np.ndarray = None
    z1: np.ndarray = None
    z2: np.ndarray = None
    provenance: np.ndarray = None
    failures: int = 0
    source_index: np.ndarray = None   # rows of the input set that survived

    @property
    def n(self) -> int:
        return self.demands.shape[0]

    @property
    def labeled(self) -> bool:
        return self.y is not None

    def subset(self, idx) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.demands[idx], pick(self.y), pick(self.z1),
                       pick(self.z2), pick(self.provenance))


def concat(*parts: Dataset) -> Dataset:
    """Union of labeled datasets, e.g. ground truth plus pseudo labels."""
    if not parts:
        raise ValueError("nothing to concatenate")
    if not all(p.labeled for p in parts):
        raise ValueError("all parts must carry labels")
    cat = lambda f: np.concatenate([getattr(p, f) for p in parts])
    return Dataset(demands=cat("demands"), y=cat("y"), z1=cat("z1"),
                   z2=cat("z2"),
                   provenance=np.concatenate([
                       p.provenance if p.provenance is not None
                       else np.full(p.n, GROUND_TRUTH, dtype=object)
                       for p in parts]),
                   failures=sum(p.failures for p in parts))


def sample_demands(net: Network, count: int, scale_range=(0.8, 1.2),
                   seed: int = 0) -> Dataset:
    """Draw demand vectors around the nominal point.

    One uniform factor per bus scales that bus's active and reactive
    demand together, keeping the local power factor.  Deterministic
    under ``seed``.
    """
    lo, hi = scale_range
    rng = np.random.default_rng(seed)
    n = net.n_bus
    x0 = net.demand_vector()
    factor = rng.uniform(lo, hi, size=(count, n))
    xs = np.hstack([factor * x0[:n], factor * x0[n:]])
    return Dataset(demands=xs)


@dataclass
class RidgeModel:
    """Affine demand-to-setpoint map fit by penalized least squares."""

    weights: np.ndarray      # (2N, ny), acts on standardized features
    intercept: np.ndarray    # (ny,), in standardized target units
    alpha_p: float
    alpha_v: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    t_mean: np.ndarray
    t_scale: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xs = (x - self.x_mean) / self.x_scale
        return (xs @ self.weights + self.intercept) * self.t_scale + self.t_mean


def fit_ridge(ground_truth: Dataset, alpha_p: float, alpha_v: float,
              n_p: int = None, standardize: bool = True,
              intercept: bool = True) -> RidgeModel:
    """Closed-form ridge fit from labeled samples to setpoints.

    The first ``n_p`` target columns (the generator injections) are
    penalized with ``alpha_p``, the rest (the voltage setpoints) with
    ``alpha_v``; the intercept is never penalized.  ``n_p`` defaults to
    the split implied by the setpoint layout, (ny - 1) // 2.
    """
    if not ground_truth.labeled:
        raise ValueError("ridge fit needs labeled samples")
    x = np.asarray(ground_truth.demands, dtype=float)
    t = np.asarray(ground_truth.y, dtype=float)
    if x.shape[0] < 2:
        raise ValueError("ridge fit needs at least 2 samples")
    if alpha_p <= 0 or alpha_v <= 0:
        raise ValueError("ridge penalties must be positive")
    ny = t.shape[1]
    if n_p is None:
        n_p = (ny - 1) // 2

    one = np.ones(1)
    x_mean = x.mean(axis=0) if standardize else np.zeros(x.shape[1])
    x_scale = x.std(axis=0) if standardize else np.ones(x.shape[1])
    x_scale = np.where(x_scale < 1e-12, 1.0, x_scale)
    t_mean = t.mean(axis=0) if standardize else np.zeros(ny)
    t_scale = t.std(axis=0) if standardize else np.ones(ny)
    t_scale = np.where(t_scale < 1e-12, 1.0, t_scale)

    xs = (x - x_mean) / x_scale
    ts = (t - t_mean) / t_scale
    if intercept:
        ## centering makes the intercept drop out of the penalized solve
        mx, mt = xs.mean(axis=0), ts.mean(axis=0)
        xs, ts = xs - mx, ts - mt
    gram = xs.T @ xs
    rhs = xs.T @ ts
    eye = np.eye(x.shape[1])
    w = np.empty((x.shape[1], ny))
    if n_p > 0:
        w[:, :n_p] = np.linalg.solve(gram + alpha_p * eye, rhs[:, :n_p])
    w[:, n_p:] = np.linalg.solve(gram + alpha_v * eye, rhs[:, n_p:])
    b = mt - mx @ w if intercept else np.zeros(ny)
    return RidgeModel(w, b, alpha_p, alpha_v, x_mean, x_scale, t_mean, t_scale)


def pseudo_label(model: RidgeModel, dataset: Dataset, net: Network,
                 solver: FdpfSolver = None) -> Dataset:
    """Complete unlabeled demand samples into full pseudo labels.

    Predicted setpoints are clamped into their boxes, the power flow
    fills in the state, and the dependent variables follow by
    reconstruction.  Samples whose power flow diverges are dropped and
    counted in ``failures``; rows already labeled pass through.
    """
    if dataset.labeled:
        return dataset
    if solver is None:
        solver = FdpfSolver(net)
    xs = np.asarray(dataset.demands, dtype=float)
    ymin, ymax = net.setpoint_box()
    ys = np.clip(model.predict(xs), ymin, ymax)

    bpf = solver.solve_batch(xs, ys)
    keep = np.flatnonzero(bpf.converged)
    z1, z2 = batch_reconstruct(net, bpf.theta[:, keep], bpf.vmag[:, keep],
                               xs[keep])
    tags = np.full(keep.size, PSEUDO, dtype=object)
    return Dataset(demands=xs[keep], y=ys[keep], z1=z1, z2=z2,
                   provenance=tags, failures=int(dataset.n - keep.size),
                   source_index=keep)


@dataclass
class ReducedBranchSet:
    """Branches whose pseudo flows ever cross a fraction of the rating."""

    beta: float
    members: np.ndarray   # sorted branch indices
    scores: np.ndarray    # per-branch accumulated exceedance

    @property
    def size(self) -> int:
        return self.members.size


def reduced_branch_set(pseudo_s2: np.ndarray, s_max: np.ndarray,
                       beta: float) -> ReducedBranchSet:
    """Score branches by accumulated exceedance over beta * rating^2.

    ``pseudo_s2`` is (n_samples, M) squared apparent flows from the
    completed dataset.  A branch joins the set only if its score is
    strictly positive; unrated branches (infinite s_max) never join.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    s2 = np.atleast_2d(np.asarray(pseudo_s2, dtype=float))
    cut = beta * np.asarray(s_max, dtype=float) ** 2
    scores = np.maximum(s2 - cut, 0.0).sum(axis=0)
    scores[~np.isfinite(cut)] = 0.0
    return ReducedBranchSet(beta=float(beta),
                            members=np.flatnonzero(scores > 0.0),
                            scores=scores)

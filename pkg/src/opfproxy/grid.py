"""Grid data model: case parsing, admittance assembly, bus partition.

Everything downstream (power flow, Jacobians, the training pipeline)
consumes the immutable ``Network`` built here.  All quantities are per
unit on ``base_mva``; currency enters only through generator cost
polynomials, which are stored on the per-unit power basis.

Supported inputs are MATPOWER-style ``.m`` case text (the ``bus``,
``branch``, ``gen`` and ``gencost`` blocks) and a lossless JSON mirror
(see ``network_to_json``).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, replace
from functools import cached_property

import numpy as np
from scipy import sparse

REF = "ref"
GEN = "gen"
LOAD = "load"

_KINDS = (REF, GEN, LOAD)


class CaseParseError(ValueError):
    """Malformed case text."""


class CaseValidationError(ValueError):
    """Structurally invalid network (missing reference, island, ...)."""


@dataclass(frozen=True)
class Bus:
    index: int
    kind: str
    p_demand: float
    q_demand: float
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    v_min: float = 0.94
    v_max: float = 1.06
    number: int = -1  # external id from the case file


@dataclass(frozen=True)
class Branch:
    index: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    charging: float = 0.0
    tap: float = 1.0
    s_max: float = math.inf  # p.u. apparent-flow limit, inf = unlimited


@dataclass(frozen=True)
class Generator:
    """One (aggregated) generating unit per bus.

    Cost is c0 + c1*P + c2*P**2 in $/h with P in per unit.
    """

    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0


@dataclass(frozen=True, eq=False)
class BusPartition:
    """Deterministic bus index sets for the variable split.

    ``gen`` are the non-reference generator buses, ``load`` the buses
    without generation, ``nonref`` their ascending union and
    ``regulated`` the voltage-controlled set (reference + gen), all as
    ascending internal bus indices.
    """

    ref: int
    gen: np.ndarray
    load: np.ndarray
    nonref: np.ndarray
    regulated: np.ndarray

    @property
    def n_gen(self) -> int:
        return self.gen.size

    @property
    def n_load(self) -> int:
        return self.load.size

    @property
    def n_state(self) -> int:
        ## angles on nonref plus voltage magnitudes on load buses
        return self.nonref.size + self.load.size

    @property
    def n_setpoint(self) -> int:
        return self.gen.size + self.regulated.size

    @cached_property
    def prow_of_bus(self) -> np.ndarray:
        """bus index -> active-balance equation row (position in nonref), -1 for ref."""
        n = self.nonref.size + 1
        out = np.full(n, -1, dtype=np.intp)
        out[self.nonref] = np.arange(self.nonref.size)
        return out

    @cached_property
    def qrow_of_bus(self) -> np.ndarray:
        """bus index -> reactive-balance equation row (position in load), -1 elsewhere."""
        n = self.nonref.size + 1
        out = np.full(n, -1, dtype=np.intp)
        out[self.load] = np.arange(self.load.size)
        return out


@dataclass(frozen=True, eq=False)
class AdmittanceView:
    """Nodal admittance matrix plus the per-branch end admittances.

    ``yff/yft/ytf/ytt`` are the pi-model two-port entries per branch so
    that the from/to currents are ``If = yff*Vf + yft*Vt`` and
    ``It = ytf*Vf + ytt*Vt``.
    """

    ybus: sparse.csr_matrix
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    f: np.ndarray  # from-bus per branch
    t: np.ndarray  # to-bus per branch

    @cached_property
    def g_data(self) -> np.ndarray:
        return np.ascontiguousarray(self.ybus.data.real)

    @cached_property
    def b_data(self) -> np.ndarray:
        return np.ascontiguousarray(self.ybus.data.imag)

    @property
    def indptr(self) -> np.ndarray:
        return self.ybus.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.ybus.indices

    @cached_property
    def diag_pos(self) -> np.ndarray:
        """Position of the diagonal entry inside each CSR row (always present)."""
        n = self.ybus.shape[0]
        pos = np.empty(n, dtype=np.intp)
        indptr, indices = self.ybus.indptr, self.ybus.indices
        for i in range(n):
            row = indices[indptr[i]:indptr[i + 1]]
            k = np.searchsorted(row, i)
            if k >= row.size or row[k] != i:
                raise CaseValidationError(f"admittance row {i} lacks a diagonal entry")
            pos[i] = indptr[i] + k
        return pos


@dataclass(frozen=True)
class Network:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def partition(self) -> BusPartition:
        ref = [b.index for b in self.buses if b.kind == REF]
        gen = np.array([b.index for b in self.buses if b.kind == GEN], dtype=np.intp)
        load = np.array([b.index for b in self.buses if b.kind == LOAD], dtype=np.intp)
        nonref = np.sort(np.concatenate([gen, load]))
        regulated = np.sort(np.append(gen, ref[0]))
        return BusPartition(ref=ref[0], gen=gen, load=load, nonref=nonref,
                            regulated=regulated)

    @cached_property
    def admittance(self) -> AdmittanceView:
        return build_admittance(self)

    @cached_property
    def gen_index_of_bus(self) -> dict[int, int]:
        return {g.bus: k for k, g in enumerate(self.generators)}

    def demand_vector(self) -> np.ndarray:
        """Nominal demands stacked as [P_d; Q_d], length 2N."""
        pd = np.array([b.p_demand for b in self.buses])
        qd = np.array([b.q_demand for b in self.buses])
        return np.concatenate([pd, qd])

    def setpoint_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Bounds of the predicted vector [P_g over gen; V over regulated]."""
        part = self.partition
        gidx = self.gen_index_of_bus
        lo = [self.generators[gidx[b]].p_min for b in part.gen]
        hi = [self.generators[gidx[b]].p_max for b in part.gen]
        lo += [self.buses[b].v_min for b in part.regulated]
        hi += [self.buses[b].v_max for b in part.regulated]
        return np.array(lo), np.array(hi)

    def branch_limits2(self) -> np.ndarray:
        """Squared apparent-flow limits, inf where unlimited."""
        return np.array([br.s_max**2 for br in self.branches])

    def simplified(self) -> "Network":
        """Copy with unit taps and zero charging on every branch.

        The from-end flow formulas then coincide with the plain
        admittance-entry expressions used throughout the gradient
        machinery; the benchmark pipeline runs on this interpretation.
        """
        branches = tuple(replace(br, tap=1.0, charging=0.0) for br in self.branches)
        return Network(self.name + "-flat", self.base_mva, self.buses, branches,
                       self.generators)

    def validate(self) -> "Network":
        refs = [b for b in self.buses if b.kind == REF]
        if len(refs) != 1:
            raise CaseValidationError(f"need exactly one reference bus, got {len(refs)}")
        for i, b in enumerate(self.buses):
            if b.index != i:
                raise CaseValidationError(f"bus {i} indexed {b.index}, must be dense 0..N-1")
            if b.kind not in _KINDS:
                raise CaseValidationError(f"bus {i}: unknown kind {b.kind!r}")
            if b.v_min > b.v_max:
                raise CaseValidationError(f"bus {i}: v_min > v_max")
        gen_buses = {g.bus for g in self.generators}
        if len(gen_buses) != len(self.generators):
            raise CaseValidationError("generators not aggregated to one per bus")
        for g in self.generators:
            if self.buses[g.bus].kind == LOAD:
                raise CaseValidationError(f"generator attached to load bus {g.bus}")
            if g.p_min > g.p_max or g.q_min > g.q_max:
                raise CaseValidationError(f"generator at bus {g.bus}: empty box")
        for b in self.buses:
            if b.kind in (REF, GEN) and b.index not in gen_buses:
                raise CaseValidationError(f"{b.kind} bus {b.index} has no generator")
        for br in self.branches:
            if br.from_bus == br.to_bus:
                raise CaseValidationError(f"branch {br.index} is a self-loop")
            if br.r == 0.0 and br.x == 0.0:
                raise CaseValidationError(f"branch {br.index} has zero series impedance")
            if br.tap <= 0.0:
                raise CaseValidationError(f"branch {br.index}: tap must be > 0")
            if not br.s_max > 0.0:
                raise CaseValidationError(f"branch {br.index}: s_max must be > 0")
        _check_connected(self)
        return self


def _check_connected(net: Network) -> None:
    n = net.n_bus
    if n == 0:
        raise CaseValidationError("empty network")
    adj: list[list[int]] = [[] for _ in range(n)]
    for br in net.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    seen = np.zeros(n, dtype=bool)
    stack = [net.partition.ref]
    seen[stack[0]] = True
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    if not seen.all():
        missing = np.flatnonzero(~seen)[:5].tolist()
        raise CaseValidationError(f"islanded buses (not reachable from ref): {missing}")


def build_admittance(net: Network) -> AdmittanceView:
    """Assemble the complex nodal admittance matrix and branch stamps.

    Standard pi model with off-nominal turns ratio on the from end:
    ``yff = (ys + j*bc/2)/tap^2``, ``yft = ytf = -ys/tap``,
    ``ytt = ys + j*bc/2``; bus shunts add to the diagonal.
    """
    n = net.n_bus
    m = net.n_branch
    f = np.array([br.from_bus for br in net.branches], dtype=np.intp)
    t = np.array([br.to_bus for br in net.branches], dtype=np.intp)
    r = np.array([br.r for br in net.branches])
    x = np.array([br.x for br in net.branches])
    bc = np.array([br.charging for br in net.branches])
    tap = np.array([br.tap for br in net.branches])
    ys = 1.0 / (r + 1j * x)
    yff = (ys + 1j * bc / 2.0) / (tap * tap)
    yft = -ys / tap
    ytf = -ys / tap
    ytt = ys + 1j * bc / 2.0
    ysh = np.array([b.shunt_g + 1j * b.shunt_b for b in net.buses])

    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    data = np.concatenate([yff, yft, ytf, ytt, ysh])
    ## the explicit diagonal block keeps a stored diagonal even for
    ## zero-shunt buses, which the Jacobian assembly relies on
    ybus = sparse.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    ybus.sort_indices()
    return AdmittanceView(ybus=ybus, yff=yff, yft=yft, ytf=ytf, ytt=ytt,
                          f=f, t=t)


## ---------------------------------------------------------------------------
## MATPOWER-style case text


_BLOCK_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([-+0-9.eE]+)\s*;")


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(name: str, body: str) -> np.ndarray:
    rows = []
    width = None
    for chunk in body.replace(";", "\n").splitlines():
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            row = [float(v) for v in chunk.split()]
        except ValueError as exc:
            raise CaseParseError(f"{name} row {len(rows) + 1}: {exc}") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise CaseParseError(
                f"{name} row {len(rows) + 1}: expected {width} columns, got {len(row)}")
        rows.append(row)
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows)


def parse_case(text: str, name: str = "case") -> Network:
    """Parse MATPOWER-style ``.m`` text or the JSON mirror into a Network.

    Returns a validated network in per unit.  Raises
    ``CaseParseError`` on malformed tables and
    ``CaseValidationError`` on structural problems.
    """
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return network_from_json(json.loads(text))
    return _parse_matpower(text, name)


def _parse_matpower(text: str, name: str) -> Network:
    clean = _strip_comments(text)
    fn = re.search(r"function\s+mpc\s*=\s*(\w+)", clean)
    if fn:
        name = fn.group(1)
    scalars = dict(_SCALAR_RE.findall(clean))
    base = float(scalars.get("baseMVA", 100.0))
    blocks = {m.group(1): _parse_matrix(m.group(1), m.group(2))
              for m in _BLOCK_RE.finditer(clean)}
    for req in ("bus", "gen"):
        if req not in blocks or blocks[req].size == 0:
            raise CaseParseError(f"missing table mpc.{req}")
    ## branch may be present but empty (single-bus networks)
    if "branch" not in blocks:
        raise CaseParseError("missing table mpc.branch")
    bus_t = blocks["bus"]
    gen_t = blocks["gen"]
    branch_t = blocks["branch"]
    cost_t = blocks.get("gencost", np.zeros((0, 0)))

    if bus_t.shape[1] < 13:
        raise CaseParseError(f"bus table has {bus_t.shape[1]} columns, expected >= 13")
    number_to_index = {}
    buses = []
    kind_map = {3.0: REF, 2.0: GEN, 1.0: LOAD}
    for i, row in enumerate(bus_t):
        num = int(row[0])
        if num in number_to_index:
            raise CaseParseError(f"bus table row {i + 1}: duplicate bus number {num}")
        number_to_index[num] = i
        if row[1] not in kind_map:
            raise CaseParseError(f"bus table row {i + 1}: unsupported bus type {row[1]}")
        buses.append(Bus(index=i, kind=kind_map[row[1]],
                         p_demand=row[2] / base, q_demand=row[3] / base,
                         shunt_g=row[4] / base, shunt_b=row[5] / base,
                         v_min=row[12], v_max=row[11], number=num))

    if gen_t.shape[1] < 10:
        raise CaseParseError(f"gen table has {gen_t.shape[1]} columns, expected >= 10")
    raw_units = []
    for i, row in enumerate(gen_t):
        if row[7] <= 0:  # out of service
            continue
        num = int(row[0])
        if num not in number_to_index:
            raise CaseParseError(f"gen table row {i + 1}: unknown bus {num}")
        cost = (0.0, 0.0, 0.0)
        if cost_t.size:
            if i >= cost_t.shape[0]:
                raise CaseParseError(f"gencost has fewer rows than gen (row {i + 1})")
            cost = _poly_cost(cost_t[i], base, i)
        raw_units.append((number_to_index[num],
                          row[9] / base, row[8] / base,   # p_min, p_max
                          row[4] / base, row[3] / base,   # q_min, q_max
                          cost))
    generators = _aggregate_units(raw_units)

    if branch_t.size and branch_t.shape[1] < 11:
        raise CaseParseError(f"branch table has {branch_t.shape[1]} columns, expected >= 11")
    branches = []
    for i, row in enumerate(branch_t):
        if row[10] <= 0:  # out of service
            continue
        for num in (int(row[0]), int(row[1])):
            if num not in number_to_index:
                raise CaseParseError(f"branch table row {i + 1}: unknown bus {num}")
        if row[9] != 0.0:
            raise CaseParseError(f"branch table row {i + 1}: phase shift unsupported")
        tap = row[8] if row[8] != 0.0 else 1.0
        s_max = row[5] / base if row[5] > 0.0 else math.inf
        branches.append(Branch(index=len(branches),
                               from_bus=number_to_index[int(row[0])],
                               to_bus=number_to_index[int(row[1])],
                               r=row[2], x=row[3], charging=row[4],
                               tap=tap, s_max=s_max))

    net = Network(name=name, base_mva=base, buses=tuple(buses),
                  branches=tuple(branches), generators=tuple(generators))
    return net.validate()


def _poly_cost(row: np.ndarray, base: float, i: int) -> tuple[float, float, float]:
    """Convert a MATPOWER polynomial gencost row to per-unit coefficients."""
    if row[0] != 2.0:
        raise CaseParseError(f"gencost row {i + 1}: only polynomial model supported")
    ncost = int(row[3])
    coeffs = row[4:4 + ncost]  # highest degree first, P in MW
    if ncost > 3:
        raise CaseParseError(f"gencost row {i + 1}: degree > 2 not supported")
    c0 = c1 = c2 = 0.0
    for k, c in enumerate(coeffs):
        deg = ncost - 1 - k
        if deg == 0:
            c0 = c
        elif deg == 1:
            c1 = c * base
        elif deg == 2:
            c2 = c * base * base
    return (c0, c1, c2)


def _aggregate_units(units) -> list[Generator]:
    """Merge multiple units on one bus into one equivalent generator.

    Bounds are summed.  The cost is refit assuming dispatch proportional
    to capacity share w_k, which gives c0 = sum(c0_k),
    c1 = sum(w_k*c1_k), c2 = sum(w_k^2*c2_k) evaluated at the total P.
    """
    by_bus: dict[int, list] = {}
    for u in units:
        by_bus.setdefault(u[0], []).append(u)
    out = []
    for bus in sorted(by_bus):
        group = by_bus[bus]
        if len(group) == 1:
            _, pmin, pmax, qmin, qmax, (c0, c1, c2) = group[0]
            out.append(Generator(bus, pmin, pmax, qmin, qmax, c0, c1, c2))
            continue
        pmin = sum(u[1] for u in group)
        pmax = sum(u[2] for u in group)
        qmin = sum(u[3] for u in group)
        qmax = sum(u[4] for u in group)
        caps = np.array([max(u[2], 0.0) for u in group])
        w = caps / caps.sum() if caps.sum() > 0 else np.full(len(group), 1.0 / len(group))
        c0 = sum(u[5][0] for u in group)
        c1 = float(sum(wk * u[5][1] for wk, u in zip(w, group)))
        c2 = float(sum(wk * wk * u[5][2] for wk, u in zip(w, group)))
        out.append(Generator(bus, pmin, pmax, qmin, qmax, c0, c1, c2))
    return out


## ---------------------------------------------------------------------------
## JSON mirror


def network_to_json(net: Network) -> str:
    doc = {
        "format": "opfproxy-network",
        "version": 1,
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [asdict(b) for b in net.buses],
        "branches": [_branch_dict(br) for br in net.branches],
        "generators": [asdict(g) for g in net.generators],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def _branch_dict(br: Branch) -> dict:
    d = asdict(br)
    if math.isinf(d["s_max"]):
        d["s_max"] = None  # JSON has no inf
    return d


def network_from_json(doc: dict) -> Network:
    if doc.get("format") != "opfproxy-network":
        raise CaseParseError("not an opfproxy network document")
    if doc.get("version") != 1:
        raise CaseParseError(f"unsupported network document version {doc.get('version')}")
    buses = tuple(Bus(**b) for b in doc["buses"])
    branches = []
    for b in doc["branches"]:
        b = dict(b)
        if b.get("s_max") is None:
            b["s_max"] = math.inf
        branches.append(Branch(**b))
    gens = tuple(Generator(**g) for g in doc["generators"])
    net = Network(name=doc["name"], base_mva=doc["base_mva"], buses=buses,
                  branches=tuple(branches), generators=gens)
    return net.validate()

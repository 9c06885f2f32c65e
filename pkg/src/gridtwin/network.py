"""Grid description: buses, branches, generators, case-file I/O and the Y-bus.

Case files are plain text with four sections::

    BASE_MVA
    100
    BUS
    # id kind Pd Qd Gs Bs Vset ThetaSet(deg)
    1 3 0 0 0 0 1.04 0
    BRANCH
    # from to r x b_charging tap status
    GEN
    # bus Pg Qg Vset

Fields may be separated by whitespace and/or commas, ``#`` starts a comment.
Powers are MW/MVAr (shunts as MW/MVAr consumed at 1 p.u.), impedances are
per-unit, angles are degrees.  Kind codes follow Matpower: 1=PQ, 2=PV, 3=slack.
Everything stored on :class:`Network` is per-unit on ``base_mva`` with angles
in radians.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BranchEditError, CaseSemanticError, CaseSyntaxError


class BusKind(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_demand: float = 0.0
    q_demand: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_setpoint: float = 1.0
    theta_setpoint: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    status: bool = True

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Generator:
    bus: int
    p_gen: float = 0.0
    q_gen: float = 0.0
    v_setpoint: float = 1.0


@dataclass(frozen=True)
class Network:
    """Validated, immutable grid model (per-unit)."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...] = ()
    base_mva: float = 100.0
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "_index", {b.id: i for i, b in enumerate(self.buses)})
        _validate(self)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus_position(self, bus_id: int) -> int:
        return self._index[bus_id]

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self._index[bus_id]]

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.kind is BusKind.SLACK)

    def specified_injections(self) -> tuple[np.ndarray, np.ndarray]:
        """Net scheduled (P, Q) per bus: generation minus demand."""
        p = np.array([-b.p_demand for b in self.buses])
        q = np.array([-b.q_demand for b in self.buses])
        for g in self.generators:
            k = self._index[g.bus]
            p[k] += g.p_gen
            q[k] += g.q_gen
        return p, q

    def with_buses(self, buses: Iterable[Bus]) -> "Network":
        return Network(tuple(buses), self.branches, self.generators, self.base_mva)

    def with_branches(self, branches: Iterable[Branch]) -> "Network":
        return Network(self.buses, tuple(branches), self.generators, self.base_mva)

    def with_generators(self, generators: Iterable[Generator]) -> "Network":
        return Network(self.buses, self.branches, tuple(generators), self.base_mva)


def _validate(net: Network) -> None:
    if not net.buses:
        raise CaseSemanticError("network has no buses")
    if not (net.base_mva > 0 and math.isfinite(net.base_mva)):
        raise CaseSemanticError(f"base MVA must be positive, got {net.base_mva}")
    if len(net._index) != len(net.buses):
        raise CaseSemanticError("duplicate bus ids")
    slacks = [b.id for b in net.buses if b.kind is BusKind.SLACK]
    if len(slacks) != 1:
        raise CaseSemanticError(f"exactly one slack bus required, found {len(slacks)}")
    for b in net.buses:
        if b.id <= 0:
            raise CaseSemanticError(f"bus id must be positive, got {b.id}")
        if b.kind is not BusKind.PQ and not b.v_setpoint > 0:
            raise CaseSemanticError(f"bus {b.id}: voltage setpoint must be positive")
    for k, br in enumerate(net.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in net._index:
                raise CaseSemanticError(f"branch {k + 1} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseSemanticError(f"branch {k + 1} connects bus {br.from_bus} to itself")
        if br.status and br.r == 0 and br.x == 0:
            raise CaseSemanticError(
                f"branch {k + 1} ({br.from_bus}-{br.to_bus}) has zero impedance")
        if not br.tap > 0:
            raise CaseSemanticError(f"branch {k + 1} has nonpositive tap ratio {br.tap}")
    for g in net.generators:
        if g.bus not in net._index:
            raise CaseSemanticError(f"generator references unknown bus {g.bus}")
    _check_connected(net)


def _check_connected(net: Network) -> None:
    adj: dict[int, set[int]] = {b.id: set() for b in net.buses}
    for br in net.branches:
        if br.status:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    start = net.buses[0].id
    seen = {start}
    queue = deque([start])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if len(seen) != len(net.buses):
        missing = sorted(set(adj) - seen)
        raise CaseSemanticError(f"network is not connected; isolated buses {missing[:10]}")


# ---------------------------------------------------------------------------
# case-file parsing and writing

_SECTIONS = {"BASE_MVA": 1, "BUS": 8, "BRANCH": 7, "GEN": 4}
_SPLIT = re.compile(r"[,\s]+")


def parse_case(text: str) -> Network:
    """Parse case-file text into a validated :class:`Network`.

    Duplicate branch rows are kept as separate records.
    """
    rows: dict[str, list[tuple[int, list[float]]]] = {k: [] for k in _SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head = line.upper()
        if head in _SECTIONS:
            section = head
            continue
        if section is None:
            raise CaseSyntaxError(f"data before any section header: {raw.strip()!r}", lineno)
        tokens = [t for t in _SPLIT.split(line) if t]
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            raise CaseSyntaxError(f"non-numeric field in {section} row: {raw.strip()!r}", lineno)
        if len(values) != _SECTIONS[section]:
            raise CaseSyntaxError(
                f"{section} row needs {_SECTIONS[section]} fields, got {len(values)}", lineno)
        if not all(math.isfinite(v) for v in values):
            raise CaseSyntaxError(f"non-finite value in {section} row", lineno)
        rows[section].append((lineno, values))

    if len(rows["BASE_MVA"]) != 1:
        raise CaseSemanticError("BASE_MVA section must hold exactly one value")
    base = rows["BASE_MVA"][0][1][0]
    if not base > 0:
        raise CaseSemanticError(f"base MVA must be positive, got {base}")

    gens = []
    for lineno, (bus, pg, qg, vset) in rows["GEN"]:
        gens.append(Generator(_as_int(bus, lineno), pg / base, qg / base, vset))
    gen_v = {}
    for g in gens:
        gen_v.setdefault(g.bus, g.v_setpoint)

    buses = []
    for lineno, (bid, kind, pd, qd, gs, bs, vset, tdeg) in rows["BUS"]:
        bid = _as_int(bid, lineno)
        try:
            kind = BusKind(_as_int(kind, lineno))
        except ValueError:
            raise CaseSyntaxError(f"unknown bus kind code {kind}", lineno)
        if kind is not BusKind.PQ and bid in gen_v:
            vset = gen_v[bid]
        buses.append(Bus(bid, kind, pd / base, qd / base, gs / base, bs / base,
                         vset, math.radians(tdeg)))

    branches = []
    for lineno, (f, t, r, x, b, tap, status) in rows["BRANCH"]:
        if status not in (0.0, 1.0):
            raise CaseSyntaxError(f"branch status must be 0 or 1, got {status}", lineno)
        branches.append(Branch(_as_int(f, lineno), _as_int(t, lineno), r, x, b, tap,
                               bool(status)))
    return Network(tuple(buses), tuple(branches), tuple(gens), base)


def _as_int(value: float, lineno: int) -> int:
    if not float(value).is_integer():
        raise CaseSyntaxError(f"expected an integer, got {value}", lineno)
    return int(value)


def _encode(value: float, to_file, from_file) -> str:
    """Shortest decimal whose parsed-and-rescaled value reproduces ``value``."""
    value = float(value)
    guess = float(to_file(value))
    if from_file(guess) == value:
        return repr(guess)
    up = down = guess
    for _ in range(8):
        up = math.nextafter(up, math.inf)
        down = math.nextafter(down, -math.inf)
        for cand in (up, down):
            if from_file(cand) == value:
                return repr(cand)
    return repr(guess)


def _num(value: float) -> str:
    return repr(float(value))


def format_case(net: Network) -> str:
    """Serialize a network; ``parse_case(format_case(net)) == net`` for parsed networks."""
    base = net.base_mva
    mw = lambda v: _encode(v, lambda u: u * base, lambda f: f / base)  # noqa: E731
    deg = lambda v: _encode(v, math.degrees, math.radians)  # noqa: E731
    out = ["# gridtwin case file (powers MW/MVAr, impedances p.u., angles deg)",
           "BASE_MVA", _num(base), "BUS", "# id kind Pd Qd Gs Bs Vset ThetaSet"]
    for b in net.buses:
        out.append(" ".join([str(b.id), str(int(b.kind)), mw(b.p_demand), mw(b.q_demand),
                             mw(b.g_shunt), mw(b.b_shunt), _num(b.v_setpoint),
                             deg(b.theta_setpoint)]))
    out += ["BRANCH", "# from to r x b tap status"]
    for br in net.branches:
        out.append(" ".join([str(br.from_bus), str(br.to_bus), _num(br.r), _num(br.x),
                             _num(br.b_charging), _num(br.tap), str(int(br.status))]))
    out += ["GEN", "# bus Pg Qg Vset"]
    for g in net.generators:
        out.append(" ".join([str(g.bus), mw(g.p_gen), mw(g.q_gen), _num(g.v_setpoint)]))
    return "\n".join(out) + "\n"


def load_case(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return parse_case(fh.read())


# ---------------------------------------------------------------------------
# admittance matrix

@dataclass(frozen=True)
class AdmittanceMatrix:
    """Bus admittance Y = G + jB in sparse (CSR) form, rows ordered like ``bus_ids``."""

    g: sp.csr_matrix
    b: sp.csr_matrix
    bus_ids: tuple[int, ...]

    def to_dense(self) -> np.ndarray:
        return self.g.toarray() + 1j * self.b.toarray()

    def ground(self) -> np.ndarray:
        """Per-bus node-to-ground admittance (row sums of Y).

        Collects shunts, line charging and the asymmetric part of
        off-nominal taps, so that the injection equations split cleanly into
        branch terms plus a ground term.
        """
        g = np.asarray(self.g.sum(axis=1)).ravel()
        b = np.asarray(self.b.sum(axis=1)).ravel()
        return g + 1j * b


def build_ybus(net: Network) -> AdmittanceMatrix:
    """Assemble the bus admittance matrix (pi model, taps on the from side).

    Parallel branches are summed, never merged.
    """
    n = net.n_buses
    rows, cols, vals = [], [], []
    for br in net.branches:
        if not br.status:
            continue
        f, t = net.bus_position(br.from_bus), net.bus_position(br.to_bus)
        ys = br.series_admittance
        half = 0.5j * br.b_charging
        tap = br.tap
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [(ys + half) / tap**2, ys + half, -ys / tap, -ys / tap]
    for k, bus in enumerate(net.buses):
        if bus.g_shunt or bus.b_shunt:
            rows.append(k)
            cols.append(k)
            vals.append(complex(bus.g_shunt, bus.b_shunt))
    y = sp.coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()
    y.sum_duplicates()
    return AdmittanceMatrix(y.real.tocsr(), y.imag.tocsr(), tuple(net.bus_ids))


# ---------------------------------------------------------------------------
# branch edits

@dataclass(frozen=True)
class RemoveDuplicate:
    """Drop the last of two or more parallel records between a bus pair."""

    from_bus: int
    to_bus: int


@dataclass(frozen=True)
class DuplicateBranch:
    """Append a copy of the ``occurrence``-th record between a bus pair."""

    from_bus: int
    to_bus: int
    occurrence: int = 0


@dataclass(frozen=True)
class SetBranchParameter:
    from_bus: int
    to_bus: int
    name: str
    value: float
    occurrence: int = 0


BranchEdit = RemoveDuplicate | DuplicateBranch | SetBranchParameter
_EDITABLE = {"r", "x", "b_charging", "tap", "status"}


def branches_between(net: Network, a: int, b: int) -> list[int]:
    """Indices of branch records joining buses ``a`` and ``b`` (either orientation)."""
    return [k for k, br in enumerate(net.branches) if {br.from_bus, br.to_bus} == {a, b}]


def apply_branch_edit(net: Network, edit: BranchEdit) -> Network:
    """Return a new network with ``edit`` applied; ``net`` is untouched."""
    found = branches_between(net, edit.from_bus, edit.to_bus)
    pair = f"{edit.from_bus}-{edit.to_bus}"
    if not found:
        raise BranchEditError(f"no branch between buses {pair}")
    branches = list(net.branches)
    if isinstance(edit, RemoveDuplicate):
        if len(found) < 2:
            raise BranchEditError(f"branch {pair} is not duplicated")
        del branches[found[-1]]
    elif isinstance(edit, DuplicateBranch):
        branches.append(branches[_pick(found, edit.occurrence, pair)])
    elif isinstance(edit, SetBranchParameter):
        if edit.name not in _EDITABLE:
            raise BranchEditError(f"cannot edit branch field {edit.name!r}")
        k = _pick(found, edit.occurrence, pair)
        value = bool(edit.value) if edit.name == "status" else float(edit.value)
        branches[k] = dataclasses.replace(branches[k], **{edit.name: value})
    else:
        raise BranchEditError(f"unsupported edit {edit!r}")
    return net.with_branches(branches)


def _pick(found: Sequence[int], occurrence: int, pair: str) -> int:
    if not 0 <= occurrence < len(found):
        raise BranchEditError(f"branch {pair} has no record #{occurrence}")
    return found[occurrence]


def edit_from_dict(spec: dict) -> BranchEdit:
    """Build an edit from a config mapping such as ``{"op": "remove-duplicate", ...}``."""
    op = spec.get("op")
    try:
        if op == "remove-duplicate":
            return RemoveDuplicate(int(spec["from_bus"]), int(spec["to_bus"]))
        if op == "duplicate":
            return DuplicateBranch(int(spec["from_bus"]), int(spec["to_bus"]),
                                   int(spec.get("occurrence", 0)))
        if op == "set-parameter":
            return SetBranchParameter(int(spec["from_bus"]), int(spec["to_bus"]),
                                      str(spec["name"]), float(spec["value"]),
                                      int(spec.get("occurrence", 0)))
    except KeyError as exc:
        raise BranchEditError(f"branch edit {op!r} missing field {exc}") from None
    raise BranchEditError(f"unknown branch edit op {op!r}")

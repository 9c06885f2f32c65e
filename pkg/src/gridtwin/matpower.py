"""Convert Matpower ``.m`` case files into gridtwin case text."""

from __future__ import annotations

import re

import numpy as np

from .errors import CaseSemanticError, CaseSyntaxError
from .network import Branch, Bus, BusKind, Generator, Network, format_case

_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*(\[.*?\]|[^;\n]+)\s*;", re.S)


def _matrix(body: str, name: str) -> np.ndarray:
    body = body.strip()[1:-1]
    rows = []
    for raw in re.split(r"[;\n]", body):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(t) for t in re.split(r"[,\s]+", line) if t])
        except ValueError:
            raise CaseSyntaxError(f"mpc.{name}: cannot parse row {line!r}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise CaseSyntaxError(f"mpc.{name}: empty or ragged table")
    return np.array(rows)


def read_matpower(text: str) -> dict:
    """Extract ``baseMVA``, ``bus``, ``gen`` and ``branch`` from Matpower source."""
    # strip full-line comments so bracketed text inside them cannot confuse the scan
    cleaned = "\n".join(ln for ln in text.splitlines() if not ln.lstrip().startswith("%"))
    found = {}
    for name, body in _ASSIGN.findall(cleaned):
        if name == "baseMVA":
            found[name] = float(body)
        elif name in ("bus", "gen", "branch"):
            found[name] = _matrix(body, name)
    for key in ("baseMVA", "bus", "gen", "branch"):
        if key not in found:
            raise CaseSyntaxError(f"Matpower case lacks mpc.{key}")
    return found


def matpower_to_network(text: str) -> Network:
    mpc = read_matpower(text)
    base = mpc["baseMVA"]
    gen = mpc["gen"]
    live = gen[gen[:, 7] > 0] if gen.shape[1] > 7 else gen
    gen_v = {}
    for row in live:
        gen_v.setdefault(int(row[0]), row[5])

    buses = []
    for row in mpc["bus"]:
        bid, code = int(row[0]), int(row[1])
        if code == 4:
            raise CaseSemanticError(f"bus {bid} is isolated (type 4); islands unsupported")
        kind = BusKind(code)
        if kind is BusKind.PV and bid not in gen_v:
            kind = BusKind.PQ
        vset = gen_v.get(bid, row[7]) if kind is not BusKind.PQ else row[7]
        buses.append(Bus(bid, kind, row[2] / base, row[3] / base, row[4] / base,
                         row[5] / base, float(vset), float(np.radians(row[8]))))

    branches = []
    for row in mpc["branch"]:
        if row[9] != 0:
            raise CaseSemanticError(
                f"branch {int(row[0])}-{int(row[1])} is phase shifting; unsupported")
        tap = row[8] if row[8] != 0 else 1.0
        branches.append(Branch(int(row[0]), int(row[1]), row[2], row[3], row[4], tap,
                               bool(row[10])))
    gens = [Generator(int(r[0]), r[1] / base, r[2] / base, r[5]) for r in live]
    return Network(tuple(buses), tuple(branches), tuple(gens), base)


def convert_matpower(text: str) -> str:
    return format_case(matpower_to_network(text))

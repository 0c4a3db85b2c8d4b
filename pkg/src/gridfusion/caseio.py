"""Plain-text case file parsing and emission.

The accepted format is the tabular subset used by common steady-state power
tools: a `baseMVA` scalar plus `bus`, `gen` and `branch` matrices with fixed
column order, `%` comments, rows terminated by `;`. Loads, shunts and
generator setpoints are stored in physical units (MW, MVAr) in the file and
converted to per-unit on read. Column semantics are documented in the README
with the bundled ``case14`` file as the golden example.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import CaseParseError, ModelError
from .network import Branch, Bus, BusBranchModel, Generator

_ASSIGN_RE = re.compile(r"^mpc\.(\w+)\s*=\s*(.*)$")

# minimum column counts per table
_MIN_COLS = {"bus": 8, "gen": 6, "branch": 4}


@dataclass
class ParseReport:
    """Per-line accounting: every input line is consumed or listed here."""

    ignored: list[tuple[int, str]] = field(default_factory=list)

    def ok(self) -> bool:
        return not self.ignored


def _parse_row(text: str, lineno: int) -> list[float]:
    values = []
    for col, token in enumerate(text.replace(",", " ").split()):
        try:
            values.append(float(token))
        except ValueError:
            raise CaseParseError(f"expected a number, got {token!r}", lineno, col + 1)
    return values


def parse_case_file(text: str, report: ParseReport | None = None) -> BusBranchModel:
    """Parse case text into a validated :class:`BusBranchModel`.

    Pass a :class:`ParseReport` to receive the list of lines that were
    neither data nor recognized structure.
    """
    base_mva = None
    tables: dict[str, list[list[float]]] = {"bus": [], "gen": [], "branch": []}
    active: str | None = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if line.startswith("function") or line == "end":
            continue
        m = _ASSIGN_RE.match(line)
        if m:
            name, rest = m.group(1), m.group(2).strip()
            if name == "baseMVA":
                base_mva = float(rest.rstrip(";").strip())
                continue
            if name == "version":
                continue
            if name in tables:
                if not rest.startswith("["):
                    raise CaseParseError(f"table {name} must open with '['", lineno)
                active = name
                rest = rest[1:].strip()
                if rest.endswith("];"):
                    rest, active = rest[:-2].strip(), None
                if rest:
                    tables[name].append(_parse_row(rest.rstrip(";"), lineno))
                continue
            if report is not None:
                report.ignored.append((lineno, raw))
            continue
        if active is not None:
            if line.startswith("]"):
                active = None
                continue
            row = line.rstrip(";").strip()
            closes = row.endswith("]")
            if closes:
                row = row[:-1].strip()
            if row:
                values = _parse_row(row, lineno)
                if len(values) < _MIN_COLS[active]:
                    raise CaseParseError(
                        f"{active} row has {len(values)} columns, "
                        f"need at least {_MIN_COLS[active]}", lineno)
                tables[active].append(values)
            if closes:
                active = None
            continue
        if report is not None:
            report.ignored.append((lineno, raw))

    if base_mva is None:
        raise CaseParseError("missing baseMVA")
    if not tables["bus"]:
        raise CaseParseError("missing bus table")
    if not tables["branch"]:
        raise CaseParseError("missing branch table")

    sb = base_mva
    buses = [
        Bus(id=int(r[0]), type=int(r[1]), pd=r[2] / sb, qd=r[3] / sb,
            gs=r[4] / sb, bs=r[5] / sb,
            base_kv=r[9] if len(r) > 9 else 0.0,
            vm=r[7] if len(r) > 7 else 1.0,
            va=r[8] if len(r) > 8 else 0.0)
        for r in tables["bus"]
    ]
    gens = [
        Generator(bus=int(r[0]), pg=r[1] / sb, qg=r[2] / sb, vg=r[5] if len(r) > 5 else 1.0)
        for r in tables["gen"]
        if len(r) <= 7 or r[7] != 0.0   # status column, in-service only
    ]
    branches = [
        Branch(from_bus=int(r[0]), to_bus=int(r[1]), r=r[2], x=r[3],
               b=r[4] if len(r) > 4 else 0.0,
               tap=(r[8] if len(r) > 8 and r[8] != 0.0 else 1.0),
               shift=r[9] if len(r) > 9 else 0.0)
        for r in tables["branch"]
        if len(r) <= 10 or r[10] != 0.0
    ]
    if not any(b.type == 3 for b in buses):
        raise ModelError("case file declares no slack bus")
    return BusBranchModel(buses=buses, branches=branches, generators=gens, base_mva=base_mva)


def load_case(path: str | Path, report: ParseReport | None = None) -> BusBranchModel:
    return parse_case_file(Path(path).read_text(), report)


def bundled_case_path(name: str = "case14.m") -> Path:
    """Filesystem path of a case file shipped with the package."""
    with resources.as_file(resources.files("gridfusion.data").joinpath(name)) as p:
        return Path(p)


def load_bundled_case(name: str = "case14.m") -> BusBranchModel:
    return load_case(bundled_case_path(name))


def emit_case_file(model: BusBranchModel, name: str = "case") -> str:
    """Serialize a model back to the tabular format accepted by the parser."""
    sb = model.base_mva
    out = [f"function mpc = {name}", "", "mpc.version = '2';", "",
           f"mpc.baseMVA = {sb:g};", ""]
    out.append("% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin")
    out.append("mpc.bus = [")
    for b in model.buses:
        out.append(f"\t{b.id}\t{b.type}\t{b.pd * sb:.10g}\t{b.qd * sb:.10g}"
                   f"\t{b.gs * sb:.10g}\t{b.bs * sb:.10g}\t1\t{b.vm:.10g}\t{b.va:.10g}"
                   f"\t{b.base_kv:.10g}\t1\t1.06\t0.94;")
    out.append("];")
    out.append("")
    out.append("% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin")
    out.append("mpc.gen = [")
    for g in model.generators:
        out.append(f"\t{g.bus}\t{g.pg * sb:.10g}\t{g.qg * sb:.10g}\t0\t0"
                   f"\t{g.vg:.10g}\t{sb:g}\t1\t0\t0;")
    out.append("];")
    out.append("")
    out.append("% fbus tbus r x b rateA rateB rateC ratio angle status")
    out.append("mpc.branch = [")
    for br in model.branches:
        tap = 0.0 if br.tap == 1.0 else br.tap
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t{br.r:.10g}\t{br.x:.10g}\t{br.b:.10g}"
                   f"\t0\t0\t0\t{tap:.10g}\t{br.shift:.10g}\t1;")
    out.append("];")
    out.append("")
    return "\n".join(out)

"""Bus-branch network model and admittance matrix construction.

Quantities are in per-unit on the system MVA base. Bus injections follow the
generation-positive convention throughout the package: a bus consuming power
has negative active injection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError

SLACK, PV, PQ = 3, 2, 1
_BUS_TYPE_NAMES = {SLACK: "slack", PV: "PV", PQ: "PQ"}


@dataclass(frozen=True)
class Bus:
    id: int
    type: int                 # SLACK, PV or PQ
    pd: float                 # active load, p.u.
    qd: float                 # reactive load, p.u.
    gs: float = 0.0           # shunt conductance, p.u. at V=1
    bs: float = 0.0           # shunt susceptance, p.u. at V=1
    base_kv: float = 0.0
    vm: float = 1.0           # recorded solution magnitude (informational)
    va: float = 0.0           # recorded solution angle, degrees (informational)


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0            # total line charging susceptance
    tap: float = 1.0          # off-nominal turns ratio (1.0 when absent)
    shift: float = 0.0        # phase shift, degrees


@dataclass(frozen=True)
class Generator:
    bus: int
    pg: float                 # active setpoint, p.u.
    qg: float
    vg: float                 # voltage setpoint for PV/slack buses


@dataclass
class BusBranchModel:
    """Validated network description with index helpers."""

    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    base_mva: float = 100.0
    index: dict[int, int] = field(init=False)   # bus id -> position

    def __post_init__(self):
        self.index = {bus.id: k for k, bus in enumerate(self.buses)}
        if len(self.index) != len(self.buses):
            raise ModelError("duplicate bus ids")
        slacks = [b.id for b in self.buses if b.type == SLACK]
        if len(slacks) != 1:
            raise ModelError(f"exactly one slack bus required, found {len(slacks)}")
        for br in self.branches:
            if br.from_bus not in self.index or br.to_bus not in self.index:
                raise ModelError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
            if br.r == 0.0 and br.x == 0.0:
                raise ModelError(f"branch {br.from_bus}-{br.to_bus} has zero series impedance")
        for g in self.generators:
            if g.bus not in self.index:
                raise ModelError(f"generator at unknown bus {g.bus}")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.type == SLACK)

    @property
    def slack_pos(self) -> int:
        return self.index[self.slack_bus]

    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def pv_positions(self) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.buses) if b.type == PV], dtype=int)

    def pq_positions(self) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.buses) if b.type == PQ], dtype=int)

    def gen_vg(self) -> dict[int, float]:
        """Voltage setpoint per generator bus (last one wins on duplicates)."""
        return {g.bus: g.vg for g in self.generators}

    def load_vector(self) -> tuple[np.ndarray, np.ndarray]:
        """Base-case (pd, qd) arrays in bus order, p.u."""
        pd = np.array([b.pd for b in self.buses])
        qd = np.array([b.qd for b in self.buses])
        return pd, qd


@dataclass
class GridState:
    """Voltage magnitudes (p.u.) and angles (rad) in bus order."""

    vm: np.ndarray
    va: np.ndarray

    def __post_init__(self):
        self.vm = np.asarray(self.vm, dtype=float)
        self.va = np.asarray(self.va, dtype=float)
        if self.vm.shape != self.va.shape:
            raise ValueError("vm and va must have the same length")
        if not np.all(np.isfinite(self.va)) or not np.all(np.isfinite(self.vm)):
            raise ValueError("grid state must be finite")
        if np.any(self.vm <= 0):
            raise ValueError("voltage magnitudes must be positive")

    def complex_voltage(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def copy(self) -> "GridState":
        return GridState(self.vm.copy(), self.va.copy())


def flat_state(model: BusBranchModel) -> GridState:
    return GridState(np.ones(model.n_bus), np.zeros(model.n_bus))


def build_admittance(model: BusBranchModel) -> np.ndarray:
    """Dense complex bus admittance matrix Y.

    Includes series elements, line charging split half per end, off-nominal
    taps/phase shifts on the from side, and bus shunts.
    """
    n = model.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in model.branches:
        f = model.index[br.from_bus]
        t = model.index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b / 2.0
        tap = (br.tap if br.tap != 0.0 else 1.0) * np.exp(1j * np.deg2rad(br.shift))
        y[f, f] += (ys + bc) / (tap * np.conj(tap))
        y[t, t] += ys + bc
        y[f, t] += -ys / np.conj(tap)
        y[t, f] += -ys / tap
    for bus in model.buses:
        k = model.index[bus.id]
        y[k, k] += complex(bus.gs, bus.bs)
    return y

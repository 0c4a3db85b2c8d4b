"""Factor constructors for the data fusion graph.

The graph couples two state blocks:

* ``x1``: grid voltages, angles of non-slack buses then all magnitudes.
* ``x2``: per-load-bus (demand, solar) pairs, interleaved in load-bus order.

Four factors connect them: a state estimation block over grid measurements,
identity blocks for smart-meter readings and forecasts over ``x2``, and a
physics coupling that ties the active injection at each load bus to its
solar-minus-demand balance. With two variables the graph is always a tree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridFusionError, ModelError
from .gbp import FactorGraph, FactorSpec, VariableNode
from .network import BusBranchModel, build_admittance
from .powerflow import (Selector, full_selector, power_flow_equations,
                        power_flow_jacobian, state_dim, vector_to_state)

POWER_SD = 0.01          # default measurement noise, p.u.
VOLTAGE_SD = 0.5e-3
METER_SD = 0.02
JOINT_R = 1e-10          # coupling constraint noise variance


@dataclass(frozen=True)
class FusionStateLayout:
    """Index bookkeeping for the (x1, x2) fusion state."""

    load_buses: tuple[int, ...]
    n_bus: int
    x1_dim: int

    @property
    def n_load(self) -> int:
        return len(self.load_buses)

    @property
    def x2_dim(self) -> int:
        return 2 * self.n_load

    def demand_index(self, bus: int) -> int:
        return 2 * self.load_buses.index(bus)

    def solar_index(self, bus: int) -> int:
        return 2 * self.load_buses.index(bus) + 1

    def demand_slice(self) -> np.ndarray:
        return np.arange(0, self.x2_dim, 2)

    def solar_slice(self) -> np.ndarray:
        return np.arange(1, self.x2_dim, 2)


def make_layout(model: BusBranchModel, load_buses: tuple[int, ...] | list[int]
                ) -> FusionStateLayout:
    load_buses = tuple(load_buses)
    for b in load_buses:
        if b not in model.index:
            raise ModelError(f"load bus {b} is not in the network model")
    return FusionStateLayout(load_buses=load_buses, n_bus=model.n_bus,
                             x1_dim=state_dim(model))


def measurement_noise_sd(selector: Selector, power_sd: float = POWER_SD,
                         voltage_sd: float = VOLTAGE_SD) -> np.ndarray:
    return np.array([voltage_sd if kind == "Vm" else power_sd for kind, _ in selector])


def make_state_estimation_factor(model: BusBranchModel, y1: np.ndarray,
                                 selector: Selector,
                                 power_sd: float = POWER_SD,
                                 voltage_sd: float = VOLTAGE_SD,
                                 ybus: np.ndarray | None = None) -> FactorSpec:
    """Grid measurement factor over x1 with per-quantity diagonal noise."""
    if not selector:
        raise GridFusionError("state estimation factor needs a non-empty selector")
    y1 = np.asarray(y1, dtype=float)
    if y1.size != len(selector):
        raise GridFusionError(f"y1 has {y1.size} entries for {len(selector)} selector rows")
    y = build_admittance(model) if ybus is None else ybus
    sel = list(selector)

    def f(x1: np.ndarray) -> np.ndarray:
        return power_flow_equations(model, vector_to_state(model, x1), sel, y)

    def jac(x1: np.ndarray) -> np.ndarray:
        return power_flow_jacobian(model, vector_to_state(model, x1), sel, y)

    rdiag = measurement_noise_sd(sel, power_sd, voltage_sd) ** 2
    return FactorSpec(id="se", vars=("x1",), f=f, jacobian=jac, y=y1, R=rdiag)


def make_meter_factor(layout: FusionStateLayout, y2: np.ndarray,
                      sd: float = METER_SD,
                      mask: np.ndarray | None = None) -> FactorSpec:
    """Identity readings of (demand, solar) entries; masked rows are dropped."""
    if sd <= 0:
        raise GridFusionError("meter noise sd must be positive")
    y2 = np.asarray(y2, dtype=float)
    if y2.size != layout.x2_dim:
        raise GridFusionError(f"y2 has {y2.size} entries, expected {layout.x2_dim}")
    keep = np.arange(layout.x2_dim) if mask is None else np.flatnonzero(np.asarray(mask))
    if keep.size == 0:
        raise GridFusionError("meter factor has no unmasked rows")
    rows = np.zeros((keep.size, layout.x2_dim))
    rows[np.arange(keep.size), keep] = 1.0
    return FactorSpec(id="meter", vars=("x2",),
                      f=lambda x2: x2[keep], jacobian=lambda x2: rows,
                      y=y2[keep], R=np.full(keep.size, sd * sd))


def make_forecast_factor(layout: FusionStateLayout, y3: np.ndarray,
                         variances: np.ndarray,
                         mask: np.ndarray | None = None) -> FactorSpec:
    """Identity factor with heteroscedastic diagonal noise from the forecaster."""
    y3 = np.asarray(y3, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if y3.size != layout.x2_dim:
        raise GridFusionError(f"y3 has {y3.size} entries, expected {layout.x2_dim}")
    if variances.shape != y3.shape:
        raise GridFusionError("forecast variances must match forecast values")
    if np.any(variances <= 0):
        raise GridFusionError("forecast variances must be strictly positive")
    keep = np.arange(layout.x2_dim) if mask is None else np.flatnonzero(np.asarray(mask))
    if keep.size == 0:
        raise GridFusionError("forecast factor has no unmasked rows")
    rows = np.zeros((keep.size, layout.x2_dim))
    rows[np.arange(keep.size), keep] = 1.0
    return FactorSpec(id="forecast", vars=("x2",),
                      f=lambda x2: x2[keep], jacobian=lambda x2: rows,
                      y=y3[keep], R=variances[keep])


def make_joint_factor(model: BusBranchModel, layout: FusionStateLayout,
                      r4: float = JOINT_R,
                      ybus: np.ndarray | None = None) -> FactorSpec:
    """Physics coupling: active injection minus (solar - demand) at load buses.

    One row per load bus, observation zero. The x2 block of the Jacobian is
    the constant pattern +1 on the demand entry and -1 on the solar entry.
    """
    for b in layout.load_buses:
        if b not in model.index:
            raise ModelError(f"joint factor references load bus {b} absent from model")
    y = build_admittance(model) if ybus is None else ybus
    sel: Selector = [("P", b) for b in layout.load_buses]
    n1, n2 = layout.x1_dim, layout.x2_dim
    x2_block = np.zeros((layout.n_load, n2))
    for i, b in enumerate(layout.load_buses):
        x2_block[i, layout.demand_index(b)] = 1.0
        x2_block[i, layout.solar_index(b)] = -1.0

    def f(x: np.ndarray) -> np.ndarray:
        x1, x2 = x[:n1], x[n1:]
        p = power_flow_equations(model, vector_to_state(model, x1), sel, y)
        return p - x2[layout.solar_slice()] + x2[layout.demand_slice()]

    def jac(x: np.ndarray) -> np.ndarray:
        x1 = x[:n1]
        left = power_flow_jacobian(model, vector_to_state(model, x1), sel, y)
        return np.hstack([left, x2_block])

    return FactorSpec(id="joint", vars=("x1", "x2"), f=f, jacobian=jac,
                      y=np.zeros(layout.n_load), R=np.full(layout.n_load, r4))


@dataclass
class HourData:
    """Measurements available to the fusion graph for one timestamp."""

    y1: np.ndarray
    mask1: np.ndarray          # boolean per selector row
    y2: np.ndarray
    mask2: np.ndarray          # boolean per x2 entry
    y3: np.ndarray | None
    var3: np.ndarray | None
    selector: Selector


def build_fusion_graph(model: BusBranchModel, layout: FusionStateLayout,
                       hour: HourData,
                       power_sd: float = POWER_SD, voltage_sd: float = VOLTAGE_SD,
                       meter_sd: float = METER_SD, joint_r: float = JOINT_R,
                       x1_init: np.ndarray | None = None,
                       x2_init: np.ndarray | None = None,
                       ybus: np.ndarray | None = None) -> FactorGraph:
    """Assemble the fusion factor graph for one timestamp.

    Masked measurements reduce factor rows; a source with nothing left
    contributes no factor. The physics coupling is always present. At least
    one data factor must survive.
    """
    y = build_admittance(model) if ybus is None else ybus
    graph = FactorGraph()
    graph.add_variable(VariableNode(
        id="x1", dim=layout.x1_dim,
        x_t=x1_init if x1_init is not None else _flat_x1(model, layout)))
    graph.add_variable(VariableNode(
        id="x2", dim=layout.x2_dim,
        x_t=x2_init if x2_init is not None else np.zeros(layout.x2_dim)))

    n_data = 0
    mask1 = np.asarray(hour.mask1, dtype=bool)
    if np.any(mask1):
        sel = [s for s, keep in zip(hour.selector, mask1) if keep]
        graph.add_factor(make_state_estimation_factor(
            model, np.asarray(hour.y1)[mask1], sel, power_sd, voltage_sd, ybus=y))
        n_data += 1
    mask2 = np.asarray(hour.mask2, dtype=bool)
    if np.any(mask2):
        graph.add_factor(make_meter_factor(layout, hour.y2, meter_sd, mask=mask2))
        n_data += 1
    if hour.y3 is not None:
        graph.add_factor(make_forecast_factor(layout, hour.y3, hour.var3))
        n_data += 1
    if n_data == 0:
        raise GridFusionError("no measurement data available to build the fusion graph")
    graph.add_factor(make_joint_factor(model, layout, joint_r, ybus=y))
    return graph


def _flat_x1(model: BusBranchModel, layout: FusionStateLayout) -> np.ndarray:
    x = np.zeros(layout.x1_dim)
    x[model.n_bus - 1:] = 1.0
    return x


def stacked_gain(factors: list[FactorSpec], dims: dict[str, int],
                 points: dict[str, np.ndarray]) -> np.ndarray:
    """Gain matrix F^T R^-1 F of a stack of factors over the given state blocks.

    Used to probe observability: a singular gain means the stacked data
    alone cannot determine the state.
    """
    from .gbp import linearize_factor

    order = list(dims)
    slices = {}
    offset = 0
    for v in order:
        slices[v] = slice(offset, offset + dims[v])
        offset += dims[v]
    gain = np.zeros((offset, offset))
    for factor in factors:
        xbar = np.concatenate([points[v] for v in factor.vars])
        lin = linearize_factor(factor, xbar)
        idx = np.concatenate([np.arange(slices[v].start, slices[v].stop)
                              for v in factor.vars])
        gain[np.ix_(idx, idx)] += lin.J
    return 0.5 * (gain + gain.T)

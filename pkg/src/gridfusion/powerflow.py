"""AC power flow equations, analytic Jacobians and a Newton solver.

All functions are pure. Injections are generation-positive: at a pure load
bus the active injection is minus the consumed power.

The estimation state vector used by measurement Jacobians stacks the voltage
angles of every non-slack bus followed by the magnitudes of all buses
(``2 n - 1`` coordinates; the slack angle is pinned to zero and carries no
column).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PowerFlowDivergedError
from .network import PQ, BusBranchModel, GridState, build_admittance, flat_state

Selector = list[tuple[str, int]]   # (quantity in {"P","Q","Vm"}, bus id)


def full_selector(model: BusBranchModel, quantities: str = "PQV",
                  skip_buses: tuple[int, ...] = ()) -> Selector:
    """All (quantity, bus) pairs in canonical order: P rows, Q rows, Vm rows."""
    sel: Selector = []
    for q in quantities:
        name = "Vm" if q == "V" else q
        sel.extend((name, b) for b in model.bus_ids() if b not in skip_buses)
    return sel


def state_dim(model: BusBranchModel) -> int:
    return 2 * model.n_bus - 1


def state_to_vector(model: BusBranchModel, state: GridState) -> np.ndarray:
    keep = [k for k in range(model.n_bus) if k != model.slack_pos]
    return np.concatenate([state.va[keep], state.vm])


def vector_to_state(model: BusBranchModel, x: np.ndarray) -> GridState:
    n = model.n_bus
    va = np.zeros(n)
    keep = [k for k in range(n) if k != model.slack_pos]
    va[keep] = x[: n - 1]
    return GridState(vm=x[n - 1:].copy(), va=va)


def bus_injections(model: BusBranchModel, state: GridState,
                   ybus: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Active and reactive injection at every bus for the given state."""
    y = build_admittance(model) if ybus is None else ybus
    v = state.complex_voltage()
    s = v * np.conj(y @ v)
    return s.real, s.imag


def power_flow_equations(model: BusBranchModel, state: GridState, selector: Selector,
                         ybus: np.ndarray | None = None) -> np.ndarray:
    """Evaluate the selected measurement quantities, in selector order."""
    p, q = bus_injections(model, state, ybus)
    out = np.empty(len(selector))
    for i, (kind, bus) in enumerate(selector):
        k = _bus_pos(model, bus)
        if kind == "P":
            out[i] = p[k]
        elif kind == "Q":
            out[i] = q[k]
        elif kind == "Vm":
            out[i] = state.vm[k]
        else:
            raise ValueError(f"unknown quantity {kind!r} in selector")
    return out


def _bus_pos(model: BusBranchModel, bus: int) -> int:
    try:
        return model.index[bus]
    except KeyError:
        raise ValueError(f"selector references unknown bus {bus}") from None


def _injection_jacobian_complex(model: BusBranchModel, state: GridState,
                                ybus: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dS/d(va) and dS/d(vm) for the complex injection vector S."""
    v = state.complex_voltage()
    ibus = ybus @ v
    dv = np.diag(v)
    de = np.diag(v / state.vm)          # unit phasors
    ds_dva = 1j * dv @ np.conj(np.diag(ibus) - ybus @ dv)
    ds_dvm = dv @ np.conj(ybus @ de) + np.conj(np.diag(ibus)) @ de
    return ds_dva, ds_dvm


def power_flow_jacobian(model: BusBranchModel, state: GridState, selector: Selector,
                        ybus: np.ndarray | None = None) -> np.ndarray:
    """Analytic partials of the selected quantities w.r.t. the state vector.

    Columns: angles of non-slack buses (bus order), then all magnitudes.
    """
    y = build_admittance(model) if ybus is None else ybus
    n = model.n_bus
    ds_dva, ds_dvm = _injection_jacobian_complex(model, state, y)
    keep = [k for k in range(n) if k != model.slack_pos]
    rows = np.zeros((len(selector), 2 * n - 1))
    for i, (kind, bus) in enumerate(selector):
        k = _bus_pos(model, bus)
        if kind == "P":
            rows[i, : n - 1] = ds_dva[k, keep].real
            rows[i, n - 1:] = ds_dvm[k, :].real
        elif kind == "Q":
            rows[i, : n - 1] = ds_dva[k, keep].imag
            rows[i, n - 1:] = ds_dvm[k, :].imag
        elif kind == "Vm":
            rows[i, n - 1 + k] = 1.0
        else:
            raise ValueError(f"unknown quantity {kind!r} in selector")
    return rows


@dataclass
class PowerFlowResult:
    state: GridState
    iterations: int
    mismatch: float
    p: np.ndarray              # injections at the solution
    q: np.ndarray


def solve_power_flow(model: BusBranchModel, p_spec: np.ndarray, q_spec: np.ndarray,
                     tol: float = 1e-10, max_iters: int = 30,
                     ybus: np.ndarray | None = None) -> PowerFlowResult:
    """Newton-Raphson power flow from a flat start.

    ``p_spec`` is the target active injection for every bus (ignored at the
    slack); ``q_spec`` the reactive injection (used at PQ buses only). PV and
    slack magnitudes are held at the generator setpoints.
    """
    y = build_admittance(model) if ybus is None else ybus
    n = model.n_bus
    p_spec = np.asarray(p_spec, dtype=float)
    q_spec = np.asarray(q_spec, dtype=float)

    state = flat_state(model)
    vg = model.gen_vg()
    for k, bus in enumerate(model.buses):
        if bus.type != PQ and bus.id in vg:
            state.vm[k] = vg[bus.id]

    pv = model.pv_positions()
    pq = model.pq_positions()
    pvpq = np.concatenate([pv, pq])
    pvpq.sort()
    n_ang = len(pvpq)

    for it in range(max_iters):
        p, q = bus_injections(model, state, y)
        mis = np.concatenate([p[pvpq] - p_spec[pvpq], q[pq] - q_spec[pq]])
        norm = np.max(np.abs(mis)) if mis.size else 0.0
        if norm < tol:
            return PowerFlowResult(state=state, iterations=it, mismatch=norm, p=p, q=q)
        ds_dva, ds_dvm = _injection_jacobian_complex(model, state, y)
        jac = np.zeros((n_ang + len(pq), n_ang + len(pq)))
        jac[:n_ang, :n_ang] = ds_dva[np.ix_(pvpq, pvpq)].real
        jac[:n_ang, n_ang:] = ds_dvm[np.ix_(pvpq, pq)].real
        jac[n_ang:, :n_ang] = ds_dva[np.ix_(pq, pvpq)].imag
        jac[n_ang:, n_ang:] = ds_dvm[np.ix_(pq, pq)].imag
        try:
            step = np.linalg.solve(jac, -mis)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowDivergedError(f"singular power flow Jacobian: {exc}") from exc
        if not np.all(np.isfinite(step)):
            raise PowerFlowDivergedError("non-finite Newton step")
        state.va[pvpq] += step[:n_ang]
        state.vm[pq] += step[n_ang:]
        if np.any(state.vm <= 0):
            raise PowerFlowDivergedError("voltage magnitude collapsed below zero")

    raise PowerFlowDivergedError(
        f"power flow diverged: mismatch {norm:.3e} after {max_iters} iterations")

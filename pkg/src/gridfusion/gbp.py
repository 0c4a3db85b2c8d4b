"""Factor graphs and generalized Gaussian belief propagation.

Messages are Gaussians in information form: a pair (h, J) with J the
information (precision) matrix and h the information vector, both expressed
in deviations from the current linearization point of the receiving
variable. A non-linear factor is relinearized once per outer iteration at
the current marginal means, which on tree graphs makes the scheme a
distributed Gauss-Newton iteration.

Factor-to-variable messages are block eliminations. They are computed in
square-root form (QR on stacked whitened rows) rather than by explicitly
forming Schur complements: the result is the same matrix, but it stays
positive semi-definite in floating point even for near-hard constraint
factors with very small noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (EliminationSingularityError, GraphConsistencyError,
                     GridFusionError, LinearizationError, UnobservableVariableError)

# eigenvalues below this (relative to the largest) are treated as zero when
# square-rooting an information matrix
_EIG_FLOOR = 1e-14


def central_difference_jacobian(f: Callable[[np.ndarray], np.ndarray],
                                x: np.ndarray, scale: float = 1e-6) -> np.ndarray:
    """Central differences with per-coordinate step scale*max(1, |x_i|)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        step = scale * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        jac[:, i] = (np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2.0 * step)
    return jac


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _sqrt_rows(j: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows (W, z) with W^T W = J and W^T z = h, via eigendecomposition.

    Negative eigenvalues within roundoff of zero are clipped. Components of
    h in the null space of J carry no expressible information and are
    dropped.
    """
    w, u = np.linalg.eigh(_symmetrize(j))
    floor = _EIG_FLOOR * max(w[-1], 0.0) if w.size else 0.0
    keep = w > max(floor, 0.0)
    if not np.any(keep):
        return np.zeros((0, j.shape[0])), np.zeros(0)
    roots = np.sqrt(w[keep])
    basis = u[:, keep]
    rows = roots[:, None] * basis.T
    z = (basis.T @ h) / roots
    return rows, z


@dataclass
class GaussianMessage:
    """Information-form Gaussian on one directed factor-graph edge."""

    h: np.ndarray
    J: np.ndarray

    def __post_init__(self):
        self.h = np.atleast_1d(np.asarray(self.h, dtype=float))
        self.J = np.atleast_2d(np.asarray(self.J, dtype=float))
        if self.J.shape != (self.h.size, self.h.size):
            raise ValueError(f"message shapes disagree: h {self.h.shape}, J {self.J.shape}")

    @classmethod
    def zero(cls, dim: int) -> "GaussianMessage":
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    def is_zero(self) -> bool:
        return not (np.any(self.J) or np.any(self.h))


@dataclass
class VariableNode:
    """A named state block with its linearization point and marginal."""

    id: str
    dim: int
    x_t: np.ndarray
    marginal_mean: np.ndarray | None = None
    marginal_cov: np.ndarray | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"variable '{self.id}' must have dim >= 1")
        self.x_t = np.asarray(self.x_t, dtype=float)
        if self.x_t.shape != (self.dim,):
            raise ValueError(f"variable '{self.id}': x_t has shape {self.x_t.shape}, "
                             f"expected ({self.dim},)")
        if not np.all(np.isfinite(self.x_t)):
            raise ValueError(f"variable '{self.id}': x_t must be finite")


class FactorSpec:
    """One measurement block: y = f(x) + noise over the connected variables.

    ``R`` is the noise covariance, given either as a full SPD matrix or as a
    1-D vector of diagonal entries. Its square-root inverse is cached at
    construction; a non-invertible R is a configuration error here, not a
    runtime one.
    """

    def __init__(self, id: str, vars: tuple[str, ...] | list[str],
                 f: Callable[[np.ndarray], np.ndarray],
                 y: np.ndarray, R: np.ndarray,
                 jacobian: Callable[[np.ndarray], np.ndarray] | None = None):
        self.id = id
        self.vars = tuple(vars)
        if not self.vars:
            raise ValueError(f"factor '{id}' connects no variables")
        if len(set(self.vars)) != len(self.vars):
            raise ValueError(f"factor '{id}' lists a variable twice")
        self.f = f
        self.jacobian = jacobian
        self.y = np.atleast_1d(np.asarray(y, dtype=float))
        r = np.asarray(R, dtype=float)
        if r.ndim == 1:
            if r.shape[0] != self.y.size:
                raise ValueError(f"factor '{id}': R diagonal length {r.shape[0]} != "
                                 f"y length {self.y.size}")
            if np.any(r <= 0):
                raise ValueError(f"factor '{id}': R diagonal must be positive")
            self._whiten = 1.0 / np.sqrt(r)       # per-row scaling
            self.R = np.diag(r)
        else:
            if r.shape != (self.y.size, self.y.size):
                raise ValueError(f"factor '{id}': R shape {r.shape} does not match y")
            if np.max(np.abs(r - r.T)) > 1e-12 * max(1.0, np.max(np.abs(r))):
                raise ValueError(f"factor '{id}': R must be symmetric")
            try:
                chol = np.linalg.cholesky(_symmetrize(r))
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"factor '{id}': R is not positive definite") from exc
            self._whiten = np.linalg.inv(chol)    # L^-1, so that W^T W = R^-1
            self.R = _symmetrize(r)

    @property
    def dim_out(self) -> int:
        return self.y.size

    def whiten_rows(self, jac: np.ndarray, resid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """R^(-1/2) applied to Jacobian rows and residual."""
        if self._whiten.ndim == 1:
            return jac * self._whiten[:, None], resid * self._whiten
        return self._whiten @ jac, self._whiten @ resid


@dataclass
class FactorLinearization:
    """Output of :func:`linearize_factor` plus cached square-root rows."""

    J: np.ndarray
    h: np.ndarray
    A: np.ndarray    # whitened Jacobian, J = A^T A
    b: np.ndarray    # whitened residual, h = A^T b


class FactorGraph:
    """Bipartite graph of variable blocks and measurement factors."""

    def __init__(self):
        self.variables: dict[str, VariableNode] = {}
        self.factors: dict[str, FactorSpec] = {}
        self.var_factors: dict[str, list[str]] = {}
        self.message_store: dict[tuple[str, str, str], GaussianMessage] = {}

    def add_variable(self, var: VariableNode) -> VariableNode:
        if var.id in self.variables:
            raise GraphConsistencyError(f"duplicate variable '{var.id}'")
        self.variables[var.id] = var
        self.var_factors[var.id] = []
        return var

    def add_factor(self, factor: FactorSpec) -> FactorSpec:
        if factor.id in self.factors:
            raise GraphConsistencyError(f"duplicate factor '{factor.id}'")
        for v in factor.vars:
            if v not in self.variables:
                raise GraphConsistencyError(
                    f"factor '{factor.id}' references unknown variable '{v}'")
        self.factors[factor.id] = factor
        for v in factor.vars:
            self.var_factors[v].append(factor.id)
        return factor

    def var_slices(self, factor: FactorSpec) -> dict[str, slice]:
        out = {}
        offset = 0
        for v in factor.vars:
            d = self.variables[v].dim
            out[v] = slice(offset, offset + d)
            offset += d
        return out

    def stacked_point(self, factor: FactorSpec) -> np.ndarray:
        return np.concatenate([self.variables[v].x_t for v in factor.vars])

    def reset_messages(self) -> None:
        self.message_store.clear()

    def components(self) -> list[tuple[list[str], list[str]]]:
        """Connected components as (variable ids, factor ids), deterministic."""
        seen_v: set[str] = set()
        comps = []
        for start in self.variables:
            if start in seen_v:
                continue
            vs, fs = [], []
            stack = [("v", start)]
            seen_f: set[str] = set()
            while stack:
                kind, node = stack.pop()
                if kind == "v":
                    if node in seen_v:
                        continue
                    seen_v.add(node)
                    vs.append(node)
                    stack.extend(("f", fid) for fid in self.var_factors[node])
                else:
                    if node in seen_f:
                        continue
                    seen_f.add(node)
                    fs.append(node)
                    stack.extend(("v", v) for v in self.factors[node].vars)
            comps.append((sorted(vs), sorted(fs)))
        return comps


@dataclass
class InferenceConfig:
    max_outer_iters: int = 50
    tol: float = 1e-6                  # convergence threshold on max-norm of delta x
    damping: float = 0.5               # message damping on loopy graphs (trees use 0)
    jitter: float = 1e-12              # diagonal regularization before block solves
    seed: int = 0                      # reserved for randomized tie-breaking
    validate_messages: bool = False    # check symmetry/PSD of every committed message

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be at least 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")


@dataclass
class Diagnostics:
    converged: bool = False
    iterations: int = 0                # update steps with ||delta x|| >= tol
    sweeps: int = 0                    # total outer passes executed
    final_residual: float = np.inf
    residual_history: list[float] = field(default_factory=list)
    loopy: bool = False
    error: str | None = None


# ---------------------------------------------------------------------------
# core message operations


def linearize_factor(factor: FactorSpec, xbar: np.ndarray) -> FactorLinearization:
    """Gaussian information form of a factor at the operating point ``xbar``.

    J = F^T R^-1 F and h = F^T R^-1 (y - f(xbar)), with F the factor
    Jacobian at xbar (analytic when provided, central differences otherwise).
    """
    xbar = np.asarray(xbar, dtype=float)
    if not np.all(np.isfinite(xbar)):
        raise LinearizationError(factor.id, "non-finite operating point")
    fx = np.atleast_1d(np.asarray(factor.f(xbar), dtype=float))
    if fx.shape != factor.y.shape:
        raise LinearizationError(
            factor.id, f"f returned shape {fx.shape}, expected {factor.y.shape}")
    if factor.jacobian is not None:
        jac = np.atleast_2d(np.asarray(factor.jacobian(xbar), dtype=float))
    else:
        jac = central_difference_jacobian(factor.f, xbar)
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(jac))):
        raise LinearizationError(factor.id, "non-finite evaluation or Jacobian")
    if jac.shape != (factor.dim_out, xbar.size):
        raise LinearizationError(
            factor.id, f"Jacobian shape {jac.shape}, expected {(factor.dim_out, xbar.size)}")
    a, b = factor.whiten_rows(jac, factor.y - fx)
    return FactorLinearization(J=_symmetrize(a.T @ a), h=a.T @ b, A=a, b=b)


def message_variable_to_factor(graph: FactorGraph, var_id: str,
                               factor_id: str) -> GaussianMessage:
    """Sum of incoming factor messages excluding the target factor."""
    if var_id not in graph.variables:
        raise GraphConsistencyError(f"unknown variable '{var_id}'")
    if factor_id not in graph.var_factors[var_id]:
        raise GraphConsistencyError(f"no edge between '{var_id}' and '{factor_id}'")
    dim = graph.variables[var_id].dim
    h = np.zeros(dim)
    j = np.zeros((dim, dim))
    for fid in graph.var_factors[var_id]:
        if fid == factor_id:
            continue
        msg = graph.message_store.get(("f2v", fid, var_id))
        if msg is not None:
            h = h + msg.h
            j = j + msg.J
    return GaussianMessage(h, j)


def message_factor_to_variable(graph: FactorGraph, factor_id: str, var_id: str,
                               linearization: FactorLinearization | tuple,
                               jitter: float = 1e-12) -> GaussianMessage:
    """Eliminate all other connected variables from the factor linearization.

    The result equals the Schur complement of the target block after the
    incoming variable messages (plus jitter*I) are absorbed into the
    eliminated blocks; it is computed by a QR factorization of the stacked
    square-root rows so that it remains PSD numerically.
    """
    if factor_id not in graph.factors:
        raise GraphConsistencyError(f"unknown factor '{factor_id}'")
    factor = graph.factors[factor_id]
    if var_id not in factor.vars:
        raise GraphConsistencyError(f"factor '{factor_id}' is not connected to '{var_id}'")
    if isinstance(linearization, FactorLinearization):
        a, b = linearization.A, linearization.b
    else:                                    # bare (J, h) pair
        j, h = linearization
        a, b = _sqrt_rows(np.asarray(j, float), np.asarray(h, float))

    slices = graph.var_slices(factor)
    target = slices[var_id]
    others = [v for v in factor.vars if v != var_id]
    if not others:
        return GaussianMessage(a.T @ b, _symmetrize(a.T @ a))

    elim_cols = np.concatenate([np.arange(slices[v].start, slices[v].stop) for v in others])
    keep_cols = np.arange(target.start, target.stop)
    n_e, n_k = elim_cols.size, keep_cols.size

    blocks_a = [np.hstack([a[:, elim_cols], a[:, keep_cols]])]
    blocks_b = [b]
    offset = 0
    for v in others:
        d = graph.variables[v].dim
        msg = graph.message_store.get(("v2f", v, factor_id))
        if msg is not None and not msg.is_zero():
            w, z = _sqrt_rows(msg.J, msg.h)
            rows = np.zeros((w.shape[0], n_e + n_k))
            rows[:, offset:offset + d] = w
            blocks_a.append(rows)
            blocks_b.append(z)
        offset += d
    if jitter > 0.0:
        rows = np.zeros((n_e, n_e + n_k))
        rows[:, :n_e] = np.sqrt(jitter) * np.eye(n_e)
        blocks_a.append(rows)
        blocks_b.append(np.zeros(n_e))

    stacked = np.vstack(blocks_a)
    rhs = np.concatenate(blocks_b)
    q, r = np.linalg.qr(np.hstack([stacked, rhs[:, None]]))
    if not np.all(np.isfinite(r)):
        raise EliminationSingularityError(factor_id, var_id)
    if jitter == 0.0:
        diag = np.abs(np.diag(r)[:n_e]) if r.shape[0] >= n_e else np.zeros(1)
        scale = np.max(np.abs(r)) if r.size else 0.0
        if diag.size < n_e or np.any(diag <= 1e-14 * max(scale, 1.0)):
            raise EliminationSingularityError(factor_id, var_id)
    tail = r[n_e:, :]
    a_keep = tail[:, n_e:n_e + n_k]
    b_keep = tail[:, -1]
    return GaussianMessage(a_keep.T @ b_keep, _symmetrize(a_keep.T @ a_keep))


# ---------------------------------------------------------------------------
# scheduling


@dataclass
class Schedule:
    """Ordered directed edges for one full propagation pass."""

    edges: list[tuple[str, str, str]]      # (kind 'v2f'|'f2v', source, destination)
    loopy: bool
    components: list[dict] = field(default_factory=list)


def _component_schedule(graph: FactorGraph, var_ids: list[str],
                        factor_ids: list[str]) -> dict:
    n_edges = sum(len(graph.factors[fid].vars) for fid in factor_ids)
    is_tree = n_edges == len(var_ids) + len(factor_ids) - 1

    if not is_tree:
        edges = []
        for v in var_ids:
            for fid in sorted(graph.var_factors[v]):
                edges.append(("v2f", v, fid))
        for fid in factor_ids:
            for v in graph.factors[fid].vars:
                edges.append(("f2v", fid, v))
        return {"vars": var_ids, "factors": factor_ids, "loopy": True, "edges": edges}

    # two-pass order on the tree, rooted at the first variable
    root = ("v", var_ids[0])
    parent: dict[tuple[str, str], tuple[str, str] | None] = {root: None}
    order = [root]
    queue = [root]
    while queue:
        kind, node = queue.pop(0)
        if kind == "v":
            nbrs = [("f", fid) for fid in sorted(graph.var_factors[node])]
        else:
            nbrs = [("v", v) for v in graph.factors[node].vars]
        for nb in nbrs:
            if nb not in parent:
                parent[nb] = (kind, node)
                order.append(nb)
                queue.append(nb)

    def directed(src: tuple[str, str], dst: tuple[str, str]) -> tuple[str, str, str]:
        kind = "v2f" if src[0] == "v" else "f2v"
        return (kind, src[1], dst[1])

    edges = []
    for node in reversed(order):           # leaves inward
        if parent[node] is not None:
            edges.append(directed(node, parent[node]))
    for node in order:                     # root outward
        if parent[node] is not None:
            edges.append(directed(parent[node], node))
    return {"vars": var_ids, "factors": factor_ids, "loopy": False, "edges": edges}


def schedule_messages(graph: FactorGraph) -> Schedule:
    """Message order: two-pass on trees, synchronous sweep on loopy graphs."""
    comps = [_component_schedule(graph, vs, fs) for vs, fs in graph.components()]
    edges = [e for c in comps for e in c["edges"]]
    return Schedule(edges=edges, loopy=any(c["loopy"] for c in comps), components=comps)


# ---------------------------------------------------------------------------
# marginals and the outer loop


def update_marginal(graph: FactorGraph, var_id: str,
                    jitter: float = 1e-12) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Combine incoming messages into (delta_x, mean, cov) and apply the step."""
    if var_id not in graph.variables:
        raise GraphConsistencyError(f"unknown variable '{var_id}'")
    var = graph.variables[var_id]
    h = np.zeros(var.dim)
    j = np.zeros((var.dim, var.dim))
    for fid in graph.var_factors[var_id]:
        msg = graph.message_store.get(("f2v", fid, var_id))
        if msg is not None:
            h = h + msg.h
            j = j + msg.J
    j = _symmetrize(j) + jitter * np.eye(var.dim)
    try:
        chol = np.linalg.cholesky(j)
    except np.linalg.LinAlgError:
        raise UnobservableVariableError(var_id) from None
    delta = np.linalg.solve(chol.T, np.linalg.solve(chol, h))
    cov = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(var.dim)))
    if not np.all(np.isfinite(delta)):
        raise UnobservableVariableError(var_id)
    var.x_t = var.x_t + delta
    var.marginal_mean = var.x_t.copy()
    var.marginal_cov = _symmetrize(cov)
    return delta, var.marginal_mean, var.marginal_cov


def _validate_message(msg: GaussianMessage, where: str) -> None:
    asym = np.max(np.abs(msg.J - msg.J.T)) if msg.J.size else 0.0
    if asym >= 1e-10:
        raise GridFusionError(f"message {where}: J asymmetry {asym:.2e}")
    if msg.J.size:
        lo = float(np.linalg.eigvalsh(msg.J)[0])
        if lo < -1e-9:
            raise GridFusionError(f"message {where}: negative eigenvalue {lo:.2e}")


def _run_sweep(graph: FactorGraph, comp: dict, lins: dict[str, FactorLinearization],
               config: InferenceConfig) -> None:
    """One propagation pass over a component, committed to the store."""
    jitter = config.jitter
    if not comp["loopy"]:
        for kind, src, dst in comp["edges"]:
            if kind == "v2f":
                msg = message_variable_to_factor(graph, src, dst)
            else:
                msg = message_factor_to_variable(graph, src, dst, lins[src], jitter)
            if config.validate_messages:
                _validate_message(msg, f"{kind} {src}->{dst}")
            graph.message_store[(kind, src, dst)] = msg
        return

    alpha = config.damping

    def damped(new: GaussianMessage, key) -> GaussianMessage:
        prev = graph.message_store.get(key)
        if alpha == 0.0 or prev is None:
            return new
        return GaussianMessage((1 - alpha) * new.h + alpha * prev.h,
                               (1 - alpha) * new.J + alpha * prev.J)

    # synchronous: variable->factor batch from the previous sweep's store,
    # then factor->variable batch from the committed v2f messages
    batch = {}
    for kind, src, dst in comp["edges"]:
        if kind != "v2f":
            continue
        key = (kind, src, dst)
        batch[key] = damped(message_variable_to_factor(graph, src, dst), key)
    if config.validate_messages:
        for key, msg in batch.items():
            _validate_message(msg, f"{key[0]} {key[1]}->{key[2]}")
    graph.message_store.update(batch)
    batch = {}
    for kind, src, dst in comp["edges"]:
        if kind != "f2v":
            continue
        key = (kind, src, dst)
        batch[key] = damped(
            message_factor_to_variable(graph, src, dst, lins[src], config.jitter), key)
    if config.validate_messages:
        for key, msg in batch.items():
            _validate_message(msg, f"{key[0]} {key[1]}->{key[2]}")
    graph.message_store.update(batch)


def run_inference(graph: FactorGraph,
                  config: InferenceConfig | None = None
                  ) -> tuple[dict[str, tuple[np.ndarray, np.ndarray]], Diagnostics]:
    """Outer relinearization loop around full message schedules.

    Each pass relinearizes every factor at the current estimates, propagates
    one full schedule and updates all marginals. Stops when the largest
    marginal step falls below tolerance. Non-convergence is reported in the
    diagnostics rather than raised.
    """
    config = config or InferenceConfig()
    sched = schedule_messages(graph)
    graph.reset_messages()
    diag = Diagnostics(loopy=sched.loopy)

    for _ in range(config.max_outer_iters + 1):
        lins = {fid: linearize_factor(f, graph.stacked_point(f))
                for fid, f in graph.factors.items()}
        for comp in sched.components:
            _run_sweep(graph, comp, lins, config)
        residual = 0.0
        for var_id in graph.variables:
            delta, _, _ = update_marginal(graph, var_id, config.jitter)
            step = float(np.max(np.abs(delta))) if delta.size else 0.0
            residual = max(residual, step)
        diag.sweeps += 1
        diag.residual_history.append(residual)
        diag.final_residual = residual
        if residual < config.tol:
            diag.converged = True
            break
        diag.iterations += 1
        if diag.iterations >= config.max_outer_iters:
            break

    marginals = {vid: (var.marginal_mean.copy(), var.marginal_cov.copy())
                 for vid, var in graph.variables.items()}
    return marginals, diag

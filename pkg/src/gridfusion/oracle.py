"""Global Gauss-Newton solver for the stacked fusion problem.

This is the monolithic reference route: all measurement blocks and
constraints are stacked into one weighted nonlinear least-squares problem
over the concatenated state, solved by plain Gauss-Newton iterations. It
shares no message-passing code with the belief propagation engine and is
used as its correctness oracle on tree graphs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gbp import FactorGraph, FactorSpec, InferenceConfig, run_inference


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray],
                               x: np.ndarray, scale: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian, step scale*max(1, |x_i|) per coordinate."""
    x = np.asarray(x, dtype=float)
    base = np.atleast_1d(np.asarray(f(x), dtype=float))
    if not np.all(np.isfinite(base)):
        raise ValueError("non-finite function value at the expansion point")
    jac = np.zeros((base.size, x.size))
    for i in range(x.size):
        step = scale * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ValueError(f"non-finite function value while perturbing coordinate {i}")
        jac[:, i] = (fp - fm) / (2.0 * step)
    return jac


@dataclass
class GlobalProblem:
    """Stacked measurement blocks over an ordered set of state blocks.

    Constraint equations enter as ordinary blocks with y = 0 and the
    constraint noise covariance.
    """

    var_order: tuple[str, ...]
    dims: dict[str, int]
    blocks: list[FactorSpec]
    slices: dict[str, slice] = field(init=False)

    def __post_init__(self):
        self.slices = {}
        offset = 0
        for v in self.var_order:
            self.slices[v] = slice(offset, offset + self.dims[v])
            offset += self.dims[v]
        self.n = offset
        for blk in self.blocks:
            for v in blk.vars:
                if v not in self.slices:
                    raise ValueError(f"block '{blk.id}' references unknown variable '{v}'")

    def gather(self, x: np.ndarray, block: FactorSpec) -> np.ndarray:
        return np.concatenate([x[self.slices[v]] for v in block.vars])

    def whitened_rows(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stacked R^(-1/2) F and R^(-1/2) (y - f(x)) over all blocks."""
        mats, resids = [], []
        for blk in self.blocks:
            xb = self.gather(x, blk)
            fx = np.atleast_1d(np.asarray(blk.f(xb), dtype=float))
            if blk.jacobian is not None:
                jac = np.atleast_2d(np.asarray(blk.jacobian(xb), dtype=float))
            else:
                jac = finite_difference_jacobian(blk.f, xb)
            rows = np.zeros((blk.dim_out, self.n))
            offset = 0
            for v in blk.vars:
                d = self.dims[v]
                rows[:, self.slices[v]] = jac[:, offset:offset + d]
                offset += d
            a, b = blk.whiten_rows(rows, blk.y - fx)
            mats.append(a)
            resids.append(b)
        return np.vstack(mats), np.concatenate(resids)


def problem_from_factors(dims: dict[str, int], factors: list[FactorSpec],
                         var_order: tuple[str, ...] | None = None) -> GlobalProblem:
    order = tuple(var_order) if var_order is not None else tuple(dims)
    return GlobalProblem(var_order=order, dims=dict(dims), blocks=list(factors))


def problem_from_graph(graph: FactorGraph) -> GlobalProblem:
    dims = {vid: var.dim for vid, var in graph.variables.items()}
    return problem_from_factors(dims, list(graph.factors.values()))


@dataclass
class GaussNewtonResult:
    x: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    residual_history: list[float]

    def block(self, problem: GlobalProblem, var_id: str) -> np.ndarray:
        return self.x[problem.slices[var_id]]

    def block_cov(self, problem: GlobalProblem, var_id: str) -> np.ndarray:
        s = problem.slices[var_id]
        return self.covariance[s, s]


def gauss_newton_solve(problem: GlobalProblem, x0: np.ndarray, tol: float = 1e-6,
                       max_iters: int = 50, jitter: float = 1e-12) -> GaussNewtonResult:
    """Plain Gauss-Newton on the stacked problem.

    Each step solves the regularized normal equations
    (F^T R^-1 F + jitter*I) dx = F^T R^-1 (y - f(x)), evaluated as a
    least-squares solve on whitened rows. The posterior covariance is
    (F^T R^-1 F)^-1 at the final iterate.
    """
    x = np.asarray(x0, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    sqrt_jitter = np.sqrt(jitter) if jitter > 0 else 0.0
    history: list[float] = []
    converged = False
    iterations = 0

    for _ in range(max_iters + 1):
        a, b = problem.whitened_rows(x)
        if sqrt_jitter > 0.0:
            a_aug = np.vstack([a, sqrt_jitter * np.eye(problem.n)])
            b_aug = np.concatenate([b, np.zeros(problem.n)])
        else:
            a_aug, b_aug = a, b
        dx, *_ = np.linalg.lstsq(a_aug, b_aug, rcond=None)
        if not np.all(np.isfinite(dx)):
            break
        x = x + dx
        step = float(np.max(np.abs(dx))) if dx.size else 0.0
        history.append(step)
        if step < tol:
            converged = True
            break
        iterations += 1
        if iterations >= max_iters:
            break

    a, _ = problem.whitened_rows(x)
    _, s, vt = np.linalg.svd(a, full_matrices=False)
    inv_s2 = np.zeros_like(s)
    if s.size:
        good = s > s[0] * 1e-15
        inv_s2[good] = 1.0 / s[good] ** 2
    cov = (vt.T * inv_s2) @ vt
    return GaussNewtonResult(x=x, covariance=0.5 * (cov + cov.T), converged=converged,
                             iterations=iterations, residual_history=history)


@dataclass
class ComparisonReport:
    max_abs_mean_diff: float
    bp_iterations: int
    gn_iterations: int
    bp_converged: bool
    gn_converged: bool
    per_variable: dict[str, float]


def compare_bp_vs_gn(graph: FactorGraph, problem: GlobalProblem,
                     config: InferenceConfig | None = None) -> ComparisonReport:
    """Run both routes on the same model and report the mean discrepancy."""
    config = config or InferenceConfig()
    x0 = np.concatenate([graph.variables[v].x_t for v in problem.var_order])
    marginals, diag = run_inference(graph, config)
    gn = gauss_newton_solve(problem, x0, tol=config.tol,
                            max_iters=config.max_outer_iters, jitter=config.jitter)
    per_var = {}
    for vid in problem.var_order:
        mean, _ = marginals[vid]
        per_var[vid] = float(np.max(np.abs(mean - gn.block(problem, vid))))
    worst = max(per_var.values()) if per_var else 0.0
    return ComparisonReport(max_abs_mean_diff=worst, bp_iterations=diag.iterations,
                            gn_iterations=gn.iterations, bp_converged=diag.converged,
                            gn_converged=gn.converged, per_variable=per_var)

"""Batched box-constrained nonlinear least squares.

Each row of ``x`` is an independent problem (one video frame of one finger,
for instance).  Every iteration builds a forward-difference Jacobian, forms
the Gauss-Newton quadratic model with Levenberg damping and solves the
bound-constrained QP subproblem with a small primal active-set loop.  All
problems advance together in vectorised numpy; rows drop out as they meet a
stopping test.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

_EPS = np.finfo(float).eps
_SQRT_EPS = np.sqrt(_EPS)


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 1000
    max_function_evaluations: int = 500
    # Kept for parity with the reference settings; SQP-type solvers stop on
    # step size and first-order optimality, never on the change in cost.
    function_tolerance: float = 1e-1
    optimality_tolerance: float = 1e-6
    step_tolerance: float = 1e-6
    constraint_tolerance: float = 1e-6
    initial_damping: float = 1e-3


@dataclass
class SolveResult:
    x: np.ndarray
    cost: np.ndarray
    iterations: np.ndarray
    nfev: np.ndarray
    converged: np.ndarray


ResidualFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _forward_jacobian(fun, x, rows, r0, lower, upper):
    k, n = x.shape
    h = _SQRT_EPS * np.maximum(np.abs(x), 1.0)
    # step backwards where a forward step would leave the box
    h = np.where(x + h > upper, -h, h)
    m = r0.shape[1]
    J = np.empty((k, m, n))
    for j in range(n):
        xp = x.copy()
        xp[:, j] += h[:, j]
        J[:, :, j] = (fun(xp, rows) - r0) / h[:, j, None]
    return J


def _box_qp(H, g, lo, hi, fixed):
    """Minimise 0.5 p'Hp + g'p subject to lo <= p <= hi (batched).

    ``fixed`` seeds the active set with variables already pinned at a bound.
    """
    k, n = g.shape
    pinned = np.where(fixed, np.where(g > 0, lo, hi), 0.0)
    eye = np.eye(n)
    p = np.zeros_like(g)
    for _ in range(n + 1):
        free = ~fixed
        both = free[:, :, None] & free[:, None, :]
        M = np.where(both, H, 0.0) + eye * fixed[:, None, :]
        coupling = np.einsum("kij,kj->ki", H, np.where(fixed, pinned, 0.0))
        rhs = np.where(free, -g - coupling, pinned)
        p = np.linalg.solve(M, rhs[..., None])[..., 0]
        below = free & (p < lo)
        above = free & (p > hi)
        hit = below | above
        if not hit.any():
            break
        pinned = np.where(below, lo, np.where(above, hi, pinned))
        fixed = fixed | hit
    return np.clip(p, lo, hi)


def solve_box_least_squares(
    fun: ResidualFn,
    x0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    settings: SolverSettings = SolverSettings(),
) -> SolveResult:
    """Minimise ``sum(fun(x, rows)**2)`` per row subject to ``lower <= x <= upper``.

    ``fun(x, rows)`` receives the iterates of the rows still being solved and
    their indices into the batch, and returns residuals of shape ``(k, m)``.
    Rows that exhaust the iteration or evaluation budget keep their best
    iterate and are reported with ``converged == False``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    F, n = x0.shape
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (F, n))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (F, n))
    x = np.clip(x0, lower, upper)
    all_rows = np.arange(F)

    r = fun(x, all_rows)
    cost = np.einsum("km,km->k", r, r)
    nfev = np.ones(F, dtype=int)
    iterations = np.zeros(F, dtype=int)
    converged = np.zeros(F, dtype=bool)
    running = np.ones(F, dtype=bool)
    mu = np.full(F, settings.initial_damping)
    opt_scale = np.full(F, np.nan)

    # Jacobians are reused after a rejected step
    J = np.zeros((F, r.shape[1], n))
    stale = np.ones(F, dtype=bool)
    ctol = settings.constraint_tolerance

    while running.any():
        rows = np.flatnonzero(running)
        xr, rr = x[rows], r[rows]
        lo_r, up_r = lower[rows], upper[rows]

        need = stale[rows]
        if need.any():
            sub = rows[need]
            J[sub] = _forward_jacobian(fun, x[sub], sub, r[sub], lower[sub], upper[sub])
            nfev[sub] += n
            stale[sub] = False
        Jr = J[rows]
        g = np.einsum("kmi,km->ki", Jr, rr)

        pg = xr - np.clip(xr - g, lo_r, up_r)
        pg_norm = np.abs(pg).max(axis=1)
        first = np.isnan(opt_scale[rows])
        opt_scale[rows[first]] = np.maximum(1.0, pg_norm[first])
        optimal = pg_norm <= settings.optimality_tolerance * opt_scale[rows]
        if optimal.any():
            done = rows[optimal]
            converged[done] = True
            running[done] = False
        keep = ~optimal
        if not keep.any():
            continue
        rows, xr, rr, g = rows[keep], xr[keep], rr[keep], g[keep]
        lo_r, up_r, Jr = lo_r[keep], up_r[keep], Jr[keep]

        JtJ = np.einsum("kmi,kmj->kij", Jr, Jr)
        diag = np.maximum(np.einsum("kii->ki", JtJ), 1e-12)
        H = JtJ + mu[rows, None, None] * np.einsum("ki,ij->kij", diag, np.eye(n))
        at_lo = (xr <= lo_r + ctol) & (g > 0)
        at_up = (xr >= up_r - ctol) & (g < 0)
        p = _box_qp(H, g, lo_r - xr, up_r - xr, at_lo | at_up)
        x_try = np.clip(xr + p, lo_r, up_r)
        r_try = fun(x_try, rows)
        nfev[rows] += 1
        iterations[rows] += 1
        cost_try = np.einsum("km,km->k", r_try, r_try)

        better = cost_try < cost[rows]
        acc = rows[better]
        x[acc] = x_try[better]
        r[acc] = r_try[better]
        cost[acc] = cost_try[better]
        stale[acc] = True
        mu[acc] = np.maximum(mu[acc] / 3.0, 1e-12)
        rej = rows[~better]
        mu[rej] = mu[rej] * 4.0

        step = np.abs(x_try - xr).max(axis=1)
        small = step <= settings.step_tolerance * (1.0 + np.abs(xr).max(axis=1))
        # a rejected step only counts as converged once damping has shrunk it
        small &= better | (mu[rows] > 1e6)
        converged[rows[small]] = True
        running[rows[small]] = False

        over = (nfev[rows] >= settings.max_function_evaluations) | (
            iterations[rows] >= settings.max_iterations
        )
        running[rows[over & ~small]] = False

    return SolveResult(x=x, cost=cost, iterations=iterations, nfev=nfev, converged=converged)

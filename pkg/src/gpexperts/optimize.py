"""Nonlinear conjugate gradient (Polak-Ribiere+) with backtracking line search.

Supports elementwise lower bounds (projected, with a direction restart when
a bound activates) and frozen coordinates (gradient zeroed).  The returned
trace of accepted objective values is non-increasing by construction.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

_ARMIJO_C1 = 1e-4
_BACKTRACK = 0.5
_MAX_BACKTRACKS = 40


def minimize_cg(fun, fun_and_grad, x0, max_iter=200, gtol=1e-5,
                lower=None, frozen=None):
    """Minimize a smooth objective; returns (x, f, trace).

    fun(x) -> float is used inside the line search; fun_and_grad(x) ->
    (float, array) at accepted points.  max_iter = 0 returns x0 untouched
    (after bound projection).  trace lists the objective at x0 and after
    every accepted step.
    """
    x = np.asarray(x0, dtype=float).copy()
    if lower is not None:
        lower = np.asarray(lower, dtype=float)
        x = np.maximum(x, lower)
    f, g = fun_and_grad(x)
    if not np.isfinite(f):
        raise NumericError("objective is non-finite at the initial point")
    g = _mask_grad(g, x, lower, frozen)
    trace = [f]
    if max_iter <= 0:
        return x, f, np.asarray(trace)

    d = -g
    step = 1.0 / (1.0 + float(np.linalg.norm(g)))
    since_restart = 0
    for _ in range(max_iter):
        if np.linalg.norm(g, np.inf) < gtol:
            break
        slope = float(g @ d)
        if slope >= 0.0:  # not a descent direction: restart on steepest descent
            d = -g
            slope = float(g @ d)
            since_restart = 0
            if slope >= 0.0:
                break
        t = step
        f_new = None
        for _ in range(_MAX_BACKTRACKS):
            x_try = x + t * d
            if lower is not None:
                x_try = np.maximum(x_try, lower)
            f_try = fun(x_try)
            if np.isfinite(f_try) and f_try <= f + _ARMIJO_C1 * t * slope:
                f_new = f_try
                break
            t *= _BACKTRACK
        if f_new is None:
            if since_restart > 0:
                d = -g  # retry along steepest descent before giving up
                since_restart = 0
                continue
            break
        projected = lower is not None and np.any(x + t * d < lower)
        x = x + t * d
        if lower is not None:
            x = np.maximum(x, lower)
        g_prev = g
        f, g = fun_and_grad(x)
        g = _mask_grad(g, x, lower, frozen)
        trace.append(f)
        step = min(1.0, 2.5 * t)
        since_restart += 1
        if projected or since_restart >= x.size:
            d = -g
            since_restart = 0
        else:
            beta = max(0.0, float(g @ (g - g_prev)) / float(g_prev @ g_prev))
            d = -g + beta * d
    return x, f, np.asarray(trace)


def _mask_grad(g, x, lower, frozen):
    g = np.asarray(g, dtype=float).copy()
    if frozen is not None:
        g[np.asarray(frozen, dtype=bool)] = 0.0
    if lower is not None:
        # at an active lower bound, ignore gradient components pushing outward
        active = (x <= lower + 1e-15) & (g > 0.0)
        g[active] = 0.0
    return g

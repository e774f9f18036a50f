"""Batched BFGS for the three-parameter log-space power-law fit.

Parameters are ``theta = (log C, log(E - E_FLOOR), log beta)`` and the
objective is ``sum(huber(log y - log(C * t**-beta + E)))``.
"""

import numba
import numpy as np

E_FLOOR = 1e-6

CONVERGED = 0
STALLED = 1
MAXITER = 2
NONFINITE = 3

_MAX_STEP = 4.0
_ARMIJO = 1e-4
_MAX_HALVINGS = 60


@numba.njit(cache=True)
def _objective(theta, log_t, log_y, delta, grad):
    c = np.exp(theta[0])
    e_free = np.exp(theta[1])
    e = E_FLOOR + e_free
    beta = np.exp(theta[2])
    f = 0.0
    g0 = 0.0
    g1 = 0.0
    g2 = 0.0
    for i in range(log_t.size):
        pw = c * np.exp(-beta * log_t[i])
        m = pw + e
        r = log_y[i] - np.log(m)
        if abs(r) <= delta:
            f += 0.5 * r * r
            dh = r
        else:
            f += delta * (abs(r) - 0.5 * delta)
            dh = delta if r > 0 else -delta
        inv = dh / m
        g0 -= inv * pw
        g1 -= inv * e_free
        g2 += inv * pw * log_t[i] * beta
    grad[0] = g0
    grad[1] = g1
    grad[2] = g2
    return f


@numba.njit(cache=True)
def _norm(v):
    return np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


@numba.njit(cache=True)
def _bfgs(x0, h0, log_t, log_y, delta, maxiter, gtol, ftol):
    x = x0.copy()
    g = np.empty(3)
    g_new = np.empty(3)
    f = _objective(x, log_t, log_y, delta, g)
    if not (np.isfinite(f) and np.isfinite(_norm(g))):
        return x, f, NONFINITE, 0, np.eye(3)
    # A zero matrix means "no curvature estimate yet".
    fresh = h0[0, 0] == 0.0
    h = np.eye(3) if fresh else h0.copy()
    for it in range(maxiter):
        if _norm(g) <= gtol:
            return x, f, CONVERGED, it, h
        d = -(h @ g)
        slope = g @ d
        if slope >= 0:
            h = np.eye(3)
            fresh = True
            d = -g
            slope = g @ d
        dn = _norm(d)
        if dn > _MAX_STEP:
            d *= _MAX_STEP / dn
            slope *= _MAX_STEP / dn
        alpha = 1.0
        accepted = False
        x_new = x.copy()
        f_new = f
        for _ in range(_MAX_HALVINGS):
            x_new = x + alpha * d
            f_new = _objective(x_new, log_t, log_y, delta, g_new)
            if np.isfinite(f_new) and f_new <= f + _ARMIJO * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if fresh:
                return x, f, STALLED, it, h
            h = np.eye(3)
            fresh = True
            continue
        s = x_new - x
        y = g_new - g
        sy = s @ y
        decrease = f - f_new
        x = x_new
        f = f_new
        g[:] = g_new
        if sy > 1e-300:
            if fresh:
                h = np.eye(3) * (sy / (y @ y))
            rho = 1.0 / sy
            hy = h @ y
            h = (h - rho * (np.outer(s, hy) + np.outer(hy, s))
                 + (rho * rho * (y @ hy) + rho) * np.outer(s, s))
            fresh = False
        if decrease <= ftol * max(abs(f), 1e-300):
            if _norm(g) <= gtol:
                return x, f, CONVERGED, it + 1, h
            return x, f, STALLED, it + 1, h
    if _norm(g) <= gtol:
        return x, f, CONVERGED, maxiter, h
    return x, f, MAXITER, maxiter, h


@numba.njit(cache=True)
def bfgs_batch(starts, hessians, log_t, log_y, delta, maxiter, gtol, ftol):
    """Run :func:`_bfgs` from every row of ``starts``.

    ``hessians[j]`` is the inverse-Hessian estimate to resume from, or all
    zeros for a fresh start. Returns final parameters, objectives, status
    codes, iteration counts and inverse-Hessian estimates.
    """
    k = starts.shape[0]
    out = np.empty((k, 3))
    obj = np.empty(k)
    status = np.empty(k, dtype=np.int64)
    iters = np.empty(k, dtype=np.int64)
    h_out = np.empty((k, 3, 3))
    for j in range(k):
        x, f, st, it, h = _bfgs(starts[j], hessians[j], log_t, log_y, delta, maxiter, gtol, ftol)
        out[j] = x
        obj[j] = f
        status[j] = st
        iters[j] = it
        h_out[j] = h
    return out, obj, status, iters, h_out


@numba.njit(cache=True)
def objective_and_grad(theta, log_t, log_y, delta):
    grad = np.empty(3)
    f = _objective(theta, log_t, log_y, delta, grad)
    return f, grad

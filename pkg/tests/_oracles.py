"""Independent reference implementations used only by the tests."""

import numpy as np
from scipy.optimize import minimize


def simplex_grid(step=1e-3):
    k = int(round(1 / step))
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    keep = i + j <= k
    a, b = i[keep] / k, j[keep] / k
    return np.stack([a, b, 1 - a - b], axis=1)


_GRID = {}


def ball_oracle(excess, p, rho, step=1e-3):
    """Best point of a dense simplex grid inside the ball, refined with SLSQP."""
    if step not in _GRID:
        _GRID[step] = simplex_grid(step)
    grid = _GRID[step]
    div = np.sum((grid - p) ** 2 / p, axis=1)
    feasible = grid[div <= rho]
    obj = feasible @ excess
    best = feasible[np.argmax(obj)] if feasible.size else p.copy()
    best_val = float(best @ excess)
    cons = [{"type": "eq", "fun": lambda q: q.sum() - 1.0},
            {"type": "ineq", "fun": lambda q: rho - np.sum((q - p) ** 2 / p)}]
    res = minimize(lambda q: -(q @ excess), best, method="SLSQP", bounds=[(0, 1)] * len(p),
                   constraints=cons, options={"ftol": 1e-15, "maxiter": 500})
    q = res.x
    if abs(q.sum() - 1) < 1e-9 and np.all(q >= -1e-12) and np.sum((q - p) ** 2 / p) <= rho + 1e-9:
        best_val = max(best_val, float(q @ excess))
    return best_val


def slsqp_oracle(excess, p, rho, starts=6, seed=0):
    rng = np.random.default_rng(seed)
    n = len(p)
    best = float(p @ excess)
    cons = [{"type": "eq", "fun": lambda q: q.sum() - 1.0},
            {"type": "ineq", "fun": lambda q: rho - np.sum((q - p) ** 2 / p)}]
    for x0 in [p] + [rng.dirichlet(np.ones(n)) for _ in range(starts)]:
        res = minimize(lambda q: -(q @ excess), x0, method="SLSQP", bounds=[(0, 1)] * n,
                       constraints=cons, options={"ftol": 1e-15, "maxiter": 500})
        q = res.x
        if abs(q.sum() - 1) < 1e-9 and np.sum((q - p) ** 2 / p) <= rho + 1e-9:
            best = max(best, float(q @ excess))
    return best


def clamp_oracle(p, p0, factor, iters=200):
    """Bisection on the scale ``s`` solving ``sum(clip(s * p, lo, hi)) == 1``."""
    lo, hi = p0 / factor, p0 * factor
    p = np.asarray(p, dtype=float)
    a, b = 0.0, 1.0
    for _ in range(2000):
        if np.clip(b * p, lo, hi).sum() >= 1.0 - 1e-15:
            break
        b *= 2.0
    for _ in range(iters):
        m = 0.5 * (a + b)
        if np.clip(m * p, lo, hi).sum() < 1.0:
            a = m
        else:
            b = m
    return np.clip(b * p, lo, hi)


def floor_oracle(q, p, factor, iters=100):
    """Raise violators to their floor, rescale the rest, repeat until stable."""
    floors = factor * np.asarray(p, dtype=float)
    x = np.asarray(q, dtype=float).copy()
    pinned = np.zeros(len(x), dtype=bool)
    for _ in range(iters):
        low = x < floors - 1e-15
        if not low.any():
            break
        pinned |= low
        x[pinned] = floors[pinned]
        free = ~pinned
        x[free] *= (1 - x[pinned].sum()) / x[free].sum()
    return x

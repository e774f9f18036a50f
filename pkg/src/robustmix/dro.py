"""Worst-case domain weights inside a chi-square ball, plus EMA and floor helpers."""

from __future__ import annotations

import numpy as np

from ._validation import check_fraction, check_ratio, check_vector
from .exceptions import InvalidInputError

TIE_ATOL = 1e-12


def ema_update(prev, observed, lam: float) -> np.ndarray:
    """Exponential moving average; ``prev=None`` initializes to ``observed``."""
    observed = check_vector(observed, name="observed")
    lam = check_fraction(lam, "lambda", low_open=True)
    if prev is None:
        return observed.copy()
    prev = check_vector(prev, name="prev", n=observed.size)
    if lam == 1.0:
        return observed.copy()
    return (1.0 - lam) * prev + lam * observed


def excess_loss(ema_loss, ref_loss) -> np.ndarray:
    ema_loss = check_vector(ema_loss, name="ema_loss")
    ref_loss = check_vector(ref_loss, name="ref_loss", n=ema_loss.size)
    return ema_loss - ref_loss


def _ball_weights(e, p, rho):
    """Exact maximizer once the vertex case is excluded.

    For an active set ``S`` the optimum is ``q_i = p_i * (r * (e_i - m) + 1/P)``
    on ``S`` and zero elsewhere, where ``P`` and ``m`` are the mass and the
    ``p``-weighted mean excess of ``S`` and ``r`` makes the ball constraint
    tight. The active set is a prefix of the domains sorted by excess; the
    optimal one is the largest prefix that is self-consistent.
    """
    order = np.argsort(-e, kind="stable")
    es, ps = e[order], p[order]
    n = e.size
    for k in range(n, 0, -1):
        pk, ek = ps[:k], es[:k]
        mass = pk.sum()
        mean = float(pk @ ek) / mass
        var = float(pk @ (ek - mean) ** 2)
        slack = rho - (1.0 - mass) / mass
        if var <= 0 or slack <= 0:
            continue
        r = np.sqrt(slack / var)
        if r * (ek[-1] - mean) + 1.0 / mass < 0:
            continue
        if k < n and r * (es[k] - mean) + 1.0 / mass > 0:
            continue
        qs = np.zeros(n)
        qs[:k] = pk * (r * (ek - mean) + 1.0 / mass)
        q = np.empty(n)
        q[order] = qs
        return q / q.sum()
    raise AssertionError("no consistent active set")  # unreachable for valid input


def _divergence(q, p):
    return float(np.sum((q - p) ** 2 / p))


def worst_case_weights(excess, p_ref, rho: float) -> np.ndarray:
    """Maximize ``q @ excess`` over the simplex subject to ``chi2(q, p_ref) <= rho``.

    Parameters
    ----------
    excess : array-like
        Per-domain loss above reference; negative values are allowed.
    p_ref : array-like
        Strictly positive centre of the ball.
    rho : float
        Ball radius, ``>= 0``.

    Returns
    -------
    ndarray
        The maximizer. ``p_ref`` itself (same values) when ``rho == 0`` or
        all excesses are equal.

    Notes
    -----
    Stationarity gives ``q_i = p_i * max(0, 1 + (excess_i - mu) / (2 kappa))``.
    Both multipliers have closed forms once the active set (a prefix of the
    domains ordered by excess) is known, so the solve is exact.
    """
    p = check_ratio(p_ref, name="p_ref", strictly_positive=True)
    e = check_vector(excess, name="excess", n=p.size)
    if not np.isfinite(rho) or rho < 0:
        raise InvalidInputError(f"rho must be >= 0, got {rho!r}")
    if rho == 0 or e.max() - e.min() <= TIE_ATOL:
        return p.copy()

    # Linear objective: when the best face of the simplex already touches the
    # ball, its divergence-minimal point is optimal.
    top = e >= e.max() - TIE_ATOL
    vertex = np.where(top, p, 0.0)
    vertex /= vertex.sum()
    if _divergence(vertex, p) <= rho:
        return vertex

    return _ball_weights(e, p, float(rho))


def truncate_floor(q, p_ref, floor_factor: float) -> np.ndarray:
    """Lift entries below ``floor_factor * p_ref`` to that floor.

    The mass added to the floored entries is taken proportionally from the
    rest, i.e. the result is ``max(floor, s * q)`` with ``s`` chosen so the
    entries sum to one. Returns ``q`` unchanged if nothing is below floor.
    """
    q = check_ratio(q, name="q")
    p = check_ratio(p_ref, name="p_ref", n=q.size)
    floor_factor = check_fraction(floor_factor, "floor_factor")
    floors = floor_factor * p
    if floors.sum() > 1.0 + 1e-12:
        raise InvalidInputError("infeasible floors: floor_factor * sum(p_ref) > 1")
    if np.all(q >= floors):
        return q.copy()

    fixed = np.zeros(q.size, dtype=bool)
    # Each pass fixes at least one more entry at its floor, so n passes suffice.
    for _ in range(q.size + 1):
        free_mass = q[~fixed].sum()
        if free_mass <= 0:
            # Every entry sits at its floor; spread the slack over the floors.
            if abs(floors.sum() - 1.0) <= 1e-12:
                return floors.copy()
            return np.maximum(floors, floors / floors.sum())
        scale = (1.0 - floors[fixed].sum()) / free_mass
        newly = ~fixed & (q * scale < floors)
        if not newly.any():
            break
        fixed |= newly
    # The maximum only guards against a last-ulp dip below a floor.
    return np.where(fixed, floors, np.maximum(q * scale, floors))

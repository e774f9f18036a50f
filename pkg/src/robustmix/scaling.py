"""Power-law loss-curve fitting and reference-loss forecasting.

The model for one domain's evaluation loss at step ``T`` is
``C * T**(-beta) + E``. Fits minimize a Huber loss on log-loss residuals
with BFGS started from a fixed grid; the forecast is the mean horizon
prediction of the three best converged starts.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import _quasi_newton as qn
from .exceptions import FitFailureError, InsufficientHistoryError, InvalidInputError

MIN_POINTS = 4
N_BEST = 3
MAXITER = 500
GTOL = 1e-10
FTOL = 1e-14
MERGE_ATOL = 1e-7
# Warm refits: per-refit iteration budget and number of distinct optima carried forward.
WARM_MAXITER = 30
WARM_KEEP = 3
WARM_FTOL = 1e-10

C_GRID = (0.5, 2.0, 8.0, 32.0)
E_GRID_FRACTIONS = (0.25, 0.5, 0.9)
BETA_GRID = (0.05, 0.15, 0.3, 0.6)


def huber(residual, delta: float):
    """Huber penalty: quadratic inside ``|r| <= delta``, linear outside."""
    r = np.abs(np.asarray(residual, dtype=float))
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ScalingFit:
    """Aggregate of the best converged fits for one loss curve.

    ``C``, ``E`` and ``beta`` are averaged over the same members whose
    horizon predictions are averaged, so ``horizon_prediction >= E`` holds
    by construction. ``huber_objective`` is that of the single best member.
    """

    C: float
    E: float
    beta: float
    huber_objective: float
    horizon_prediction: float
    horizon: float
    members: Tuple[Tuple[float, float, float, float], ...] = ()
    n_converged: int = 0

    def predict(self, steps) -> np.ndarray:
        steps = np.asarray(steps, dtype=float)
        preds = [c * steps ** (-b) + e for c, e, b, _ in self.members]
        return np.mean(preds, axis=0)


def _prepare(points) -> Tuple[np.ndarray, np.ndarray]:
    try:
        arr = np.asarray(points, dtype=float)
    except (TypeError, ValueError):
        raise InvalidInputError("points must be (step, loss) pairs") from None
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError("points must be (step, loss) pairs")
    if arr.shape[0] < MIN_POINTS:
        raise InsufficientHistoryError(
            f"insufficient history: {arr.shape[0]} points, need at least {MIN_POINTS}")
    steps, losses = arr[:, 0], arr[:, 1]
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("points must be finite")
    if np.any(steps <= 0) or np.any(np.diff(steps) <= 0):
        raise InvalidInputError("steps must be positive and strictly increasing")
    if np.any(losses <= 0):
        raise InvalidInputError("losses must be positive for a log-space fit")
    return steps, losses


def init_grid(min_loss: float) -> np.ndarray:
    """The 48 starting points, in internal ``(log C, log E', log beta)`` form."""
    rows = []
    for c0, frac, b0 in itertools.product(C_GRID, E_GRID_FRACTIONS, BETA_GRID):
        e0 = max(frac * min_loss - qn.E_FLOOR, 1e-12)
        rows.append((np.log(c0), np.log(e0), np.log(b0)))
    return np.array(rows)


def _params(theta) -> Tuple[float, float, float]:
    return float(np.exp(theta[0])), float(qn.E_FLOOR + np.exp(theta[1])), float(np.exp(theta[2]))


def _aggregate(thetas, objs, mult, horizon) -> ScalingFit:
    """Average the ``N_BEST`` lowest-objective converged members (with multiplicity)."""
    # Order by objective, then parameters, so the result ignores input order.
    order = np.lexsort((thetas[:, 2], thetas[:, 1], thetas[:, 0], objs))
    members = []
    for j in order:
        c, e, b = _params(thetas[j])
        pred = c * horizon ** (-b) + e
        for _ in range(int(mult[j])):
            members.append((c, e, b, pred))
            if len(members) == N_BEST:
                break
        if len(members) == N_BEST:
            break
    arr = np.array(members)
    return ScalingFit(
        C=float(arr[:, 0].mean()),
        E=float(arr[:, 1].mean()),
        beta=float(arr[:, 2].mean()),
        huber_objective=float(objs[order[0]]),
        horizon_prediction=float(arr[:, 3].mean()),
        horizon=float(horizon),
        members=tuple(tuple(m) for m in members),
        n_converged=int(mult.sum()),
    )


def _merge(thetas, hessians, objs, mult, status):
    """Drop non-finite starts and collapse those that landed on the same point."""
    keep = []
    order = np.lexsort((thetas[:, 2], thetas[:, 1], thetas[:, 0], objs))
    for j in order:
        if status[j] == qn.NONFINITE:
            continue
        for k in keep:
            if np.max(np.abs(thetas[k[0]] - thetas[j])) <= MERGE_ATOL:
                k[1] += int(mult[j])
                break
        else:
            keep.append([j, int(mult[j])])
    idx = np.array([k[0] for k in keep], dtype=np.int64)
    return (thetas[idx].reshape(-1, 3), hessians[idx].reshape(-1, 3, 3), objs[idx],
            np.array([k[1] for k in keep], dtype=np.int64))


def run_starts(steps, losses, starts, multiplicity, horizon, delta, hessians=None,
               maxiter=MAXITER, keep=None, ftol=FTOL):
    """Optimize from each start and merge coincident optima.

    Returns ``(fit, tracks)``; ``tracks`` is ``(thetas, hessians,
    multiplicity)`` for the distinct optima in objective order, truncated
    to the best ``keep`` when given. A start counts as converged unless it
    made a non-finite excursion; hitting the iteration cap keeps its last
    iterate. ``fit`` is None when every start was discarded.
    """
    log_t = np.log(np.asarray(steps, dtype=float))
    log_y = np.log(np.asarray(losses, dtype=float))
    starts = np.ascontiguousarray(starts, dtype=float)
    if hessians is None:
        hessians = np.zeros((len(starts), 3, 3))
    thetas, objs, status, _, h_out = qn.bfgs_batch(
        starts, np.ascontiguousarray(hessians, dtype=float), log_t, log_y, float(delta),
        int(maxiter), GTOL, float(ftol))
    thetas, h_out, objs, mult = _merge(thetas, h_out, objs, np.asarray(multiplicity), status)
    fit = _aggregate(thetas, objs, mult, horizon) if len(objs) else None
    if keep is not None:
        thetas, h_out, mult = thetas[:keep], h_out[:keep], mult[:keep]
    return fit, (thetas, h_out, mult)


def _check_fit_args(horizon, delta):
    if not (np.isfinite(horizon) and horizon > 0):
        raise InvalidInputError("horizon must be a positive step count")
    if not delta > 0:
        raise InvalidInputError("delta must be > 0")


def fit_power_law(points, horizon: float, delta: float = 1e-3) -> ScalingFit:
    """Fit ``C * T**-beta + E`` to ``(step, loss)`` points from the full start grid.

    Raises
    ------
    InsufficientHistoryError
        Fewer than four points.
    FitFailureError
        No start converged.
    """
    steps, losses = _prepare(points)
    _check_fit_args(horizon, delta)
    starts = init_grid(float(losses.min()))
    fit, _ = run_starts(steps, losses, starts, np.ones(len(starts), dtype=np.int64), horizon, delta)
    if fit is None:
        raise FitFailureError("fit failure: no start converged")
    return fit


def refit_warm(points, horizon, delta, tracks=None):
    """Refit on an extended history, resuming from the previous refit's optima.

    With ``tracks=None`` the grid is optimized cold, as in
    :func:`fit_power_law`. Otherwise each carried optimum resumes with its
    inverse-Hessian estimate and multiplicity for up to ``WARM_MAXITER``
    iterations. Only the ``WARM_KEEP`` best distinct optima are carried on.
    """
    steps, losses = _prepare(points)
    _check_fit_args(horizon, delta)
    if tracks is None or len(tracks[0]) == 0:
        starts = init_grid(float(losses.min()))
        fit, new_tracks = run_starts(steps, losses, starts, np.ones(len(starts), dtype=np.int64),
                                     horizon, delta, keep=WARM_KEEP)
    else:
        thetas, hessians, mult = tracks
        fit, new_tracks = run_starts(steps, losses, thetas, mult, horizon, delta,
                                     hessians=hessians, maxiter=WARM_MAXITER, keep=WARM_KEEP,
                                     ftol=WARM_FTOL)
    if fit is None:
        raise FitFailureError("fit failure: no start converged")
    return fit, new_tracks


class FitHistory:
    """Per-domain horizon predictions and their running minimum.

    Mutable; owned by a single writer (the scheduler).
    """

    def __init__(self, domains: Sequence[str]):
        self.predictions: Dict[str, List[Tuple[int, float]]] = {d: [] for d in domains}
        self.running_min: Dict[str, Optional[float]] = {d: None for d in domains}

    def record(self, domain: str, step: int, prediction: float) -> None:
        preds = self.predictions[domain]
        if preds and step <= preds[-1][0]:
            raise InvalidInputError(f"fit history for {domain!r}: step {step} not after {preds[-1][0]}")
        preds.append((int(step), float(prediction)))
        current = self.running_min[domain]
        self.running_min[domain] = prediction if current is None else min(current, prediction)

    def to_dict(self) -> dict:
        return {
            "predictions": {d: [[s, p] for s, p in v] for d, v in self.predictions.items()},
            "running_min": dict(self.running_min),
        }

    @classmethod
    def from_dict(cls, data) -> "FitHistory":
        hist = cls(list(data["predictions"]))
        for d, pairs in data["predictions"].items():
            hist.predictions[d] = [(int(s), float(p)) for s, p in pairs]
        hist.running_min = {d: (None if v is None else float(v)) for d, v in data["running_min"].items()}
        return hist


def update_reference_loss(history: FitHistory, domain: str, new_fit: ScalingFit,
                          initial_ref: Optional[float] = None, step: Optional[int] = None) -> float:
    """Store the fit's horizon prediction; return the minimum seen so far.

    The minimum includes ``initial_ref`` when given, so the returned value
    never increases across calls.
    """
    if step is None:
        preds = history.predictions[domain]
        step = preds[-1][0] + 1 if preds else 0
    history.record(domain, step, new_fit.horizon_prediction)
    ref = history.running_min[domain]
    if initial_ref is not None:
        ref = min(ref, float(initial_ref))
    return ref


class PowerLawCurve(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``fit(steps, losses)`` then ``predict(steps)``.

    Parameters
    ----------
    horizon : float, optional
        Step at which ``horizon_prediction_`` is reported; defaults to the
        last training step.
    delta : float
        Huber threshold on log-loss residuals.
    """

    def __init__(self, horizon=None, delta=1e-3):
        self.horizon = horizon
        self.delta = delta

    def fit(self, X, y):
        steps = np.asarray(X, dtype=float)
        if steps.ndim == 2:
            if steps.shape[1] != 1:
                raise InvalidInputError("X must hold a single step column")
            steps = steps[:, 0]
        losses = np.asarray(y, dtype=float)
        if steps.shape != losses.shape:
            raise InvalidInputError("X and y lengths differ")
        horizon = float(steps.max()) if self.horizon is None else float(self.horizon)
        fit = fit_power_law(np.column_stack([steps, losses]), horizon, self.delta)
        self.fit_ = fit
        self.C_, self.E_, self.beta_ = fit.C, fit.E, fit.beta
        self.objective_ = fit.huber_objective
        self.horizon_prediction_ = fit.horizon_prediction
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        steps = np.asarray(X, dtype=float)
        if steps.ndim == 2:
            steps = steps[:, 0]
        return self.fit_.predict(steps)

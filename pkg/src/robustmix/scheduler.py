"""The evaluation-driven data-proportion update loop.

Each evaluation (1) extends the per-domain loss history, (2) updates the
EMA losses, (3) refits the loss curves and lowers the reference losses
once forecasting is active, (4-5) solves for worst-case weights around the
reference ratio, (6) moves the reference ratio toward those weights inside
its clamp once adaptation is active, and (7) emits the weights truncated
at the per-domain floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_ratio, check_vector
from .domain import DomainSet, LossRecord, SchedulerConfig
from .dro import ema_update, excess_loss, truncate_floor, worst_case_weights
from .exceptions import DomainMismatchError, FitFailureError, InvalidInputError, OutOfOrderStepError
from .scaling import MIN_POINTS, FitHistory, refit_warm, update_reference_loss

# Slack on the activation thresholds, which are products of a fraction and a step count.
_THRESHOLD_SLACK = 1e-9


def clamp_then_renormalize(p, p0, factor: float) -> np.ndarray:
    """Bound each entry to ``[p0/factor, factor*p0]`` and restore the unit sum.

    The residual is spread proportionally over the unclamped entries until
    every bound holds, which amounts to ``clip(s * p, lo, hi)`` for the
    unique scale ``s`` with unit sum. Found exactly from the breakpoints of
    that piecewise-linear sum. In-bounds simplex input is returned as-is.
    """
    p0 = check_ratio(p0, name="p0", strictly_positive=True)
    p = check_vector(p, name="p", n=p0.size)
    if np.any(p < 0):
        raise InvalidInputError("p: invalid weight (negative entry)")
    factor = float(factor)
    if not factor >= 1:
        raise InvalidInputError("clamp factor must be >= 1")
    lo, hi = p0 / factor, p0 * factor
    if np.all((p >= lo) & (p <= hi)) and abs(p.sum() - 1.0) <= 1e-9:
        return p.copy()

    pos = p > 0
    if not pos.any():
        return check_ratio(lo / lo.sum())
    bps = np.unique(np.concatenate([lo[pos] / p[pos], hi[pos] / p[pos]]))
    totals = np.array([np.clip(b * p, lo, hi).sum() for b in bps])
    if totals[0] >= 1.0:
        s = bps[0]
    elif totals[-1] <= 1.0:
        s = bps[-1]
    else:
        k = int(np.searchsorted(totals, 1.0)) - 1
        span = totals[k + 1] - totals[k]
        s = bps[k] + (1.0 - totals[k]) * (bps[k + 1] - bps[k]) / span
    return np.clip(s * p, lo, hi)


@dataclass
class SchedulerState:
    """Complete state of one scheduling run.

    ``step`` is -1 before the first evaluation. ``ref_loss`` is None until
    the first evaluation bootstraps it. ``fit_tracks`` holds, per domain,
    the optima of the previous refit for warm starting.
    """

    config: SchedulerConfig
    domains: DomainSet
    p_R_initial: np.ndarray
    p_R: np.ndarray
    last_q: np.ndarray
    initial_ref_loss: Optional[np.ndarray] = None
    step: int = -1
    ema_loss: Optional[np.ndarray] = None
    ref_loss: Optional[np.ndarray] = None
    ref_baseline: Optional[np.ndarray] = None
    dro_q: Optional[np.ndarray] = None
    fit_history: FitHistory = None
    eval_points: Dict[str, Tuple[List[int], List[float]]] = field(default_factory=dict)
    fit_tracks: Dict[str, Optional[Tuple[np.ndarray, np.ndarray]]] = field(default_factory=dict)
    refit_domains: Tuple[str, ...] = ()
    adapted: bool = False
    n_evaluations: int = 0

    @property
    def n(self) -> int:
        return self.domains.n

    def copy(self) -> "SchedulerState":
        hist = FitHistory(self.domains.names)
        hist.predictions = {d: list(v) for d, v in self.fit_history.predictions.items()}
        hist.running_min = dict(self.fit_history.running_min)
        return replace(
            self,
            fit_history=hist,
            eval_points={d: (list(s), list(v)) for d, (s, v) in self.eval_points.items()},
            fit_tracks=dict(self.fit_tracks),
        )

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else [float(v) for v in x]

        tracks = {}
        for d, tr in self.fit_tracks.items():
            tracks[d] = None if tr is None else {
                "theta": [[float(v) for v in row] for row in tr[0]],
                "inv_hessian": [[float(v) for v in h.ravel()] for h in tr[1]],
                "multiplicity": [int(m) for m in tr[2]],
            }
        return {
            "config": self.config.to_dict(),
            "domains": list(self.domains.names),
            "step": self.step,
            "n_evaluations": self.n_evaluations,
            "p_R_initial": arr(self.p_R_initial),
            "p_R": arr(self.p_R),
            "last_q": arr(self.last_q),
            "dro_q": arr(self.dro_q),
            "initial_ref_loss": arr(self.initial_ref_loss),
            "ema_loss": arr(self.ema_loss),
            "ref_loss": arr(self.ref_loss),
            "ref_baseline": arr(self.ref_baseline),
            "fit_history": self.fit_history.to_dict(),
            "eval_points": {d: {"steps": list(s), "losses": [float(v) for v in l]}
                            for d, (s, l) in self.eval_points.items()},
            "fit_tracks": tracks,
            "refit_domains": list(self.refit_domains),
            "adapted": self.adapted,
        }

    @classmethod
    def from_dict(cls, data) -> "SchedulerState":
        def arr(x):
            return None if x is None else np.array(x, dtype=float)

        try:
            domains = DomainSet(data["domains"])
            tracks = {}
            for d, tr in data["fit_tracks"].items():
                tracks[d] = None if tr is None else (
                    np.array(tr["theta"], dtype=float).reshape(-1, 3),
                    np.array(tr["inv_hessian"], dtype=float).reshape(-1, 3, 3),
                    np.array(tr["multiplicity"], dtype=np.int64))
            return cls(
                config=SchedulerConfig.from_dict(data["config"]),
                domains=domains,
                p_R_initial=arr(data["p_R_initial"]),
                p_R=arr(data["p_R"]),
                last_q=arr(data["last_q"]),
                dro_q=arr(data["dro_q"]),
                initial_ref_loss=arr(data["initial_ref_loss"]),
                step=int(data["step"]),
                n_evaluations=int(data["n_evaluations"]),
                ema_loss=arr(data["ema_loss"]),
                ref_loss=arr(data["ref_loss"]),
                ref_baseline=arr(data["ref_baseline"]),
                fit_history=FitHistory.from_dict(data["fit_history"]),
                eval_points={d: ([int(s) for s in v["steps"]], [float(x) for x in v["losses"]])
                             for d, v in data["eval_points"].items()},
                fit_tracks=tracks,
                refit_domains=tuple(data["refit_domains"]),
                adapted=bool(data["adapted"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidInputError):
                raise
            raise InvalidInputError(f"malformed scheduler state: {exc!r}") from None


def init(config: SchedulerConfig, domains: DomainSet, p_R_initial,
         initial_ref_loss=None) -> SchedulerState:
    """Fresh state centred on ``p_R_initial``."""
    if not isinstance(domains, DomainSet):
        domains = DomainSet(domains)
    try:
        p0 = check_ratio(p_R_initial, name="p_R_initial", n=domains.n, strictly_positive=True)
    except InvalidInputError as exc:
        if np.size(p_R_initial) != domains.n:
            raise DomainMismatchError(str(exc)) from None
        raise
    ref0 = None
    if initial_ref_loss is not None:
        if np.size(initial_ref_loss) != domains.n:
            raise DomainMismatchError("initial_ref_loss length does not match the domain set")
        ref0 = check_vector(initial_ref_loss, name="initial_ref_loss", n=domains.n)
    floors = config.floor_for(domains.n) * p0.sum()
    if floors > 1.0 + 1e-12:
        raise InvalidInputError("floor_factor too large: floors are infeasible")
    return SchedulerState(
        config=config,
        domains=domains,
        p_R_initial=p0,
        p_R=p0.copy(),
        last_q=p0.copy(),
        initial_ref_loss=ref0,
        fit_history=FitHistory(domains.names),
        eval_points={d: ([], []) for d in domains},
        fit_tracks={d: None for d in domains},
    )


def _refit(state: SchedulerState, step: int) -> Tuple[str, ...]:
    cfg = state.config
    refit = []
    for i, d in enumerate(state.domains):
        steps, losses = state.eval_points[d]
        pts = np.column_stack([np.asarray(steps, dtype=float), np.asarray(losses, dtype=float)])
        pts = pts[pts[:, 0] > 0]
        if len(pts) < MIN_POINTS:
            continue
        tracks = state.fit_tracks[d] if cfg.warm_start else None
        try:
            fit, new_tracks = refit_warm(pts, cfg.total_steps,
                                         cfg.huber_delta, tracks)
        except (FitFailureError, InvalidInputError):
            # Keep the previous reference loss; retry from the grid next time.
            state.fit_tracks[d] = None
            continue
        state.fit_tracks[d] = new_tracks
        state.ref_loss[i] = update_reference_loss(
            state.fit_history, d, fit, initial_ref=state.ref_baseline[i], step=step)
        refit.append(d)
    return tuple(refit)


def on_evaluation(state: SchedulerState, record: LossRecord, inplace: bool = False):
    """Advance the loop by one evaluation; returns ``(new_state, emitted_ratio)``.

    With ``inplace=True`` the given state is mutated and returned, which
    avoids copying the loss history in long simulations.
    """
    if not isinstance(record, LossRecord):
        raise InvalidInputError("record must be a LossRecord")
    if len(record.losses) != state.n:
        raise DomainMismatchError(
            f"record has {len(record.losses)} losses for {state.n} domains")
    if record.step <= state.step:
        raise OutOfOrderStepError(f"step {record.step} is not after {state.step}")

    st = state if inplace else state.copy()
    cfg = st.config
    losses = record.as_array()

    for d, value in zip(st.domains, losses):
        st.eval_points[d][0].append(record.step)
        st.eval_points[d][1].append(float(value))

    st.ema_loss = ema_update(st.ema_loss, losses, cfg.ema_lambda)
    if st.ref_loss is None:
        base = st.initial_ref_loss if st.initial_ref_loss is not None else losses
        st.ref_baseline = np.array(base, dtype=float)
        st.ref_loss = st.ref_baseline.copy()
    else:
        st.ref_loss = st.ref_loss.copy()

    st.refit_domains = ()
    if cfg.forecast_reference and record.step >= cfg.prediction_start - _THRESHOLD_SLACK:
        st.refit_domains = _refit(st, record.step)

    excess = excess_loss(st.ema_loss, st.ref_loss)
    q = worst_case_weights(excess, st.p_R, cfg.rho)

    st.adapted = False
    if cfg.adapt_ratio and record.step >= cfg.adaptation_start - _THRESHOLD_SLACK:
        # Written as p + delta*(q - p) so that q == p leaves p bit-identical.
        proposal = st.p_R + cfg.ref_delta * (q - st.p_R)
        st.p_R = clamp_then_renormalize(proposal, st.p_R_initial, cfg.clamp_for(st.n))
        st.adapted = True

    emitted = truncate_floor(q, st.p_R, cfg.floor_for(st.n))
    st.dro_q = q
    st.last_q = emitted
    st.step = record.step
    st.n_evaluations += 1
    return st, emitted.copy()


class DataMixtureScheduler(BaseEstimator):
    """Estimator-style front end over :func:`init` / :func:`on_evaluation`.

    Hyperparameters mirror :class:`~robustmix.domain.SchedulerConfig`, so
    ``get_params``/``set_params`` and ``sklearn.base.clone`` work as usual.
    Feed evaluations with :meth:`partial_fit`; the current proportion is
    ``ratio_``.
    """

    def __init__(self, domains=None, p_init=None, initial_ref_loss=None, rho=0.1,
                 ema_lambda=0.1, ref_delta=0.1, huber_delta=1e-3, total_steps=48000,
                 update_interval=400, pred_start_frac=0.2, ratio_adapt_frac=0.4,
                 clamp_factor=None, floor_factor=None, forecast_reference=True,
                 adapt_ratio=True, warm_start=True):
        self.domains = domains
        self.p_init = p_init
        self.initial_ref_loss = initial_ref_loss
        self.rho = rho
        self.ema_lambda = ema_lambda
        self.ref_delta = ref_delta
        self.huber_delta = huber_delta
        self.total_steps = total_steps
        self.update_interval = update_interval
        self.pred_start_frac = pred_start_frac
        self.ratio_adapt_frac = ratio_adapt_frac
        self.clamp_factor = clamp_factor
        self.floor_factor = floor_factor
        self.forecast_reference = forecast_reference
        self.adapt_ratio = adapt_ratio
        self.warm_start = warm_start

    def _config(self) -> SchedulerConfig:
        names = [f for f in SchedulerConfig.__dataclass_fields__]
        return SchedulerConfig(**{k: getattr(self, k) for k in names})

    def _start(self, n_losses):
        names = self.domains
        if names is None:
            names = [f"domain_{i}" for i in range(n_losses)]
        domains = DomainSet(names)
        p_init = self.p_init
        if p_init is None:
            p_init = np.full(domains.n, 1.0 / domains.n)
        self.state_ = init(self._config(), domains, p_init, self.initial_ref_loss)

    def partial_fit(self, losses, step):
        """Consume one evaluation (per-domain losses at ``step``)."""
        losses = check_vector(losses, name="losses")
        if not hasattr(self, "state_"):
            self._start(losses.size)
        self.state_, self.ratio_ = on_evaluation(self.state_, LossRecord(step, losses), inplace=True)
        self.ref_loss_ = self.state_.ref_loss.copy()
        self.ref_ratio_ = self.state_.p_R.copy()
        return self

    def fit(self, losses, steps):
        """Replay a whole history of evaluations from a fresh state."""
        losses = np.asarray(losses, dtype=float)
        if losses.ndim != 2 or losses.shape[0] != len(steps):
            raise InvalidInputError("losses must be (n_evaluations, n_domains) aligned with steps")
        if hasattr(self, "state_"):
            del self.state_
        for row, step in zip(losses, steps):
            self.partial_fit(row, step)
        return self

    def current_ratio(self):
        check_is_fitted(self, "state_")
        return self.ratio_.copy()

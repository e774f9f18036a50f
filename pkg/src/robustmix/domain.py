"""Domain sets, loss records, scheduler configuration and simplex arithmetic."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from ._validation import check_fraction, check_ratio, check_vector
from .exceptions import DomainMismatchError, InvalidInputError


@dataclass(frozen=True)
class DomainSet:
    """Ordered, immutable set of domain names. Every vector indexes by this order."""

    names: tuple

    def __init__(self, names: Sequence[str]):
        names = tuple(names)
        if not names:
            raise InvalidInputError("domain set must contain at least one domain")
        for name in names:
            if not isinstance(name, str) or not name:
                raise InvalidInputError(f"domain names must be non-empty strings, got {name!r}")
        if len(set(names)) != len(names):
            raise InvalidInputError("domain names must be unique")
        object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return len(self.names)

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def vector_from_mapping(self, mapping: Mapping[str, float], what="values") -> np.ndarray:
        """Order a ``{domain: value}`` mapping by this set; keys must match exactly."""
        keys = set(mapping)
        if keys != set(self.names):
            missing = sorted(set(self.names) - keys)
            extra = sorted(keys - set(self.names))
            raise DomainMismatchError(f"{what}: missing domains {missing}, unknown domains {extra}")
        return np.array([float(mapping[name]) for name in self.names])

    def as_mapping(self, values) -> dict:
        return {name: float(v) for name, v in zip(self.names, values)}


@dataclass(frozen=True)
class LossRecord:
    """One evaluation event: global step and per-domain validation loss (nats)."""

    step: int
    losses: tuple

    def __init__(self, step: int, losses):
        if isinstance(step, bool) or int(step) != step or step < 0:
            raise InvalidInputError(f"step must be a non-negative integer, got {step!r}")
        losses = check_vector(losses, name="losses")
        object.__setattr__(self, "step", int(step))
        object.__setattr__(self, "losses", tuple(float(v) for v in losses))

    @classmethod
    def from_mapping(cls, step, losses: Mapping[str, float], domains: DomainSet) -> "LossRecord":
        return cls(step, domains.vector_from_mapping(losses, what="losses"))

    def as_array(self) -> np.ndarray:
        return np.array(self.losses)


@dataclass(frozen=True)
class SchedulerConfig:
    """Hyperparameters of the data-proportion update loop.

    ``clamp_factor`` and ``floor_factor`` default to ``n`` and ``1/n`` for
    an ``n``-domain run; resolve them with :meth:`clamp_for` and
    :meth:`floor_for`. ``forecast_reference`` and ``adapt_ratio`` switch off
    the reference-loss forecast and the reference-ratio update, which turns
    the loop into plain DRO around a fixed centre.
    """

    rho: float = 0.1
    ema_lambda: float = 0.1
    ref_delta: float = 0.1
    huber_delta: float = 1e-3
    total_steps: int = 48000
    update_interval: int = 400
    pred_start_frac: float = 0.2
    ratio_adapt_frac: float = 0.4
    clamp_factor: Optional[float] = None
    floor_factor: Optional[float] = None
    forecast_reference: bool = True
    adapt_ratio: bool = True
    warm_start: bool = True

    def __post_init__(self):
        if not np.isfinite(self.rho) or self.rho < 0:
            raise InvalidInputError(f"rho must be >= 0, got {self.rho!r}")
        check_fraction(self.ema_lambda, "ema_lambda", low_open=True)
        check_fraction(self.ref_delta, "ref_delta")
        if not (np.isfinite(self.huber_delta) and self.huber_delta > 0):
            raise InvalidInputError(f"huber_delta must be > 0, got {self.huber_delta!r}")
        for name in ("total_steps", "update_interval"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value:
                raise InvalidInputError(f"{name} must be an integer, got {value!r}")
        if self.update_interval < 1:
            raise InvalidInputError("update_interval must be >= 1")
        if self.total_steps < self.update_interval:
            raise InvalidInputError("total_steps must be >= update_interval")
        check_fraction(self.pred_start_frac, "pred_start_frac")
        check_fraction(self.ratio_adapt_frac, "ratio_adapt_frac")
        if self.pred_start_frac > self.ratio_adapt_frac:
            raise InvalidInputError("pred_start_frac must not exceed ratio_adapt_frac")
        if self.clamp_factor is not None and not (self.clamp_factor >= 1):
            raise InvalidInputError("clamp_factor must be >= 1")
        if self.floor_factor is not None:
            check_fraction(self.floor_factor, "floor_factor")

    def clamp_for(self, n: int) -> float:
        return float(n) if self.clamp_factor is None else float(self.clamp_factor)

    def floor_for(self, n: int) -> float:
        return 1.0 / n if self.floor_factor is None else float(self.floor_factor)

    @property
    def prediction_start(self) -> float:
        return self.pred_start_frac * self.total_steps

    @property
    def adaptation_start(self) -> float:
        return self.ratio_adapt_frac * self.total_steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "SchedulerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidInputError(f"unknown config fields: {unknown}")
        return cls(**dict(data))


def normalize(raw) -> np.ndarray:
    """Scale non-negative weights onto the simplex."""
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise InvalidInputError("invalid weight") from None
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError("invalid weight: expected a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidInputError("invalid weight")
    total = arr.sum()
    if total <= 0:
        raise InvalidInputError("degenerate ratio")
    return arr / total


def chi_sq_divergence(q, p) -> float:
    """Pearson chi-square divergence ``sum((q - p)**2 / p)``."""
    q = check_vector(q, name="q")
    p = check_vector(p, name="p", n=q.size)
    if np.any(p <= 0):
        raise InvalidInputError("reference ratio has empty domain")
    return float(np.sum((q - p) ** 2 / p))


def temperature_smooth(counts, rate: float) -> np.ndarray:
    """Sampling ratio proportional to ``counts ** rate``.

    ``rate=1`` is proportional sampling, ``rate=0`` is uniform; values in
    between upsample the small domains.
    """
    counts = check_vector(counts, name="counts")
    if np.any(counts <= 0):
        raise InvalidInputError("counts must be strictly positive")
    rate = check_fraction(rate, "rate")
    if rate == 0.0:
        return np.full(counts.size, 1.0 / counts.size)
    if rate == 1.0:
        return counts / counts.sum()
    # Work in log space so large corpora do not overflow.
    logits = rate * np.log(counts)
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def as_ratio(x, n=None, strictly_positive=False, name="ratio") -> np.ndarray:
    """Public wrapper around the simplex check for callers building ratios by hand."""
    return check_ratio(x, name=name, n=n, strictly_positive=strictly_positive)

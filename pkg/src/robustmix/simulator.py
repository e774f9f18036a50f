"""Deterministic multi-domain training simulator.

Each synthetic domain's true loss depends only on the tokens allocated to
it, ``E + A * (tokens + n0)**(-beta)``. Observations add Gaussian noise
from one random stream per ``(seed, domain)``, so every strategy sees the
same noise sequence. Strategies: ``constant``, ``dro_naive`` (fixed centre,
fixed uniform reference loss), ``sheared`` (multiplicative loss-gap
reweighting, an approximation of the Sheared-LLaMA schedule) and
``drpruning`` (the full scheduler).
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ._validation import check_ratio, check_vector
from .domain import DomainSet, LossRecord, SchedulerConfig, normalize
from .exceptions import InvalidInputError
from .scheduler import init as scheduler_init
from .scheduler import on_evaluation

STRATEGIES = ("constant", "dro_naive", "sheared", "drpruning")
SHEARED_NOTE = ("sheared strategy is a reconstruction: weights are multiplied by "
                "exp(max(0, ema - reference)) each evaluation and renormalized")


@dataclass(frozen=True)
class SyntheticDomain:
    name: str
    A: float
    beta: float
    E: float
    n0: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise InvalidInputError("domain name must be non-empty")
        vals = (self.A, self.beta, self.E, self.n0, self.noise_sigma)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidInputError(f"domain {self.name!r}: non-finite parameter")
        if self.A < 0 or self.beta <= 0 or self.E < 0 or self.n0 < 0 or self.noise_sigma < 0:
            raise InvalidInputError(
                f"domain {self.name!r}: need A >= 0, beta > 0, E >= 0, n0 >= 0, noise_sigma >= 0")


def domain_loss(domain: SyntheticDomain, allocated_tokens: float, noise_draw: float = 0.0,
                amplitude_scale: float = 1.0) -> float:
    """Observed loss after ``allocated_tokens``; floored at ``E/2`` to stay positive."""
    if allocated_tokens < 0:
        raise InvalidInputError("allocated_tokens must be >= 0")
    amp = domain.A * amplitude_scale
    if amp == 0:
        learnable = 0.0
    else:
        learnable = amp * (allocated_tokens + domain.n0) ** (-domain.beta)
    loss = domain.E + learnable + domain.noise_sigma * noise_draw
    return max(loss, 0.5 * domain.E)


def sheared_weights(ema_loss, ref_loss, p_ref) -> np.ndarray:
    """``normalize(p_ref * exp(max(0, ema_loss - ref_loss)))``."""
    p_ref = check_ratio(p_ref, name="p_ref", strictly_positive=True)
    ema_loss = check_vector(ema_loss, name="ema_loss", n=p_ref.size)
    ref_loss = check_vector(ref_loss, name="ref_loss", n=p_ref.size)
    gap = np.maximum(0.0, ema_loss - ref_loss)
    # Subtracting the max gap leaves the normalized result unchanged and avoids overflow.
    return normalize(p_ref * np.exp(gap - gap.max()))


@dataclass(frozen=True)
class SimScenario:
    """A complete, seeded simulation setup.

    ``reference_loss`` is the external per-domain target of the
    ``sheared`` strategy; when absent, the closed-form terminal loss of
    constant scheduling is used. ``drpruning`` ignores it and bootstraps
    its reference from the first evaluation. ``naive_ref_loss`` is the single reference value shared by
    every domain under ``dro_naive``. ``config`` overrides scheduler
    hyperparameters; ``total_steps`` and ``update_interval`` always come
    from the scenario.
    """

    name: str
    domains: Tuple[SyntheticDomain, ...]
    p_init: Tuple[float, ...]
    total_steps: int
    tokens_per_step: float
    eval_interval: int
    seed: int = 0
    strategy: str = "drpruning"
    model_scale: Optional[Tuple[float, float]] = None
    reference_loss: Optional[Tuple[float, ...]] = None
    naive_ref_loss: float = 0.0
    config: Mapping = field(default_factory=dict)
    deferred: bool = False

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "p_init", tuple(float(v) for v in self.p_init))
        object.__setattr__(self, "config", dict(self.config))
        if self.reference_loss is not None:
            object.__setattr__(self, "reference_loss", tuple(float(v) for v in self.reference_loss))
        if self.model_scale is not None:
            object.__setattr__(self, "model_scale", tuple(float(v) for v in self.model_scale))
        self.validate()

    @property
    def domain_set(self) -> DomainSet:
        return DomainSet([d.name for d in self.domains])

    @property
    def n_evals(self) -> int:
        return self.total_steps // self.eval_interval

    @property
    def amplitude_scale(self) -> float:
        if self.model_scale is None:
            return 1.0
        params, alpha = self.model_scale
        return float(params) ** (-float(alpha))

    def validate(self):
        ds = self.domain_set
        if self.strategy not in STRATEGIES:
            raise InvalidInputError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        for name in ("total_steps", "eval_interval", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v:
                raise InvalidInputError(f"{name} must be an integer")
        if self.eval_interval < 1 or self.total_steps < self.eval_interval:
            raise InvalidInputError("need 1 <= eval_interval <= total_steps")
        if self.total_steps % self.eval_interval:
            raise InvalidInputError("eval_interval must divide total_steps")
        if not (np.isfinite(self.tokens_per_step) and self.tokens_per_step > 0):
            raise InvalidInputError("tokens_per_step must be > 0")
        check_ratio(self.p_init, name="p_init", n=ds.n, strictly_positive=True)
        if self.reference_loss is not None:
            check_vector(self.reference_loss, name="reference_loss", n=ds.n)
        if self.model_scale is not None:
            if len(self.model_scale) != 2 or self.model_scale[0] <= 0:
                raise InvalidInputError("model_scale must be a (P > 0, alpha) pair")
        if not np.isfinite(self.naive_ref_loss):
            raise InvalidInputError("naive_ref_loss must be finite")
        self.scheduler_config()

    def scheduler_config(self, **overrides) -> SchedulerConfig:
        values = dict(self.config)
        values.update(overrides)
        values["total_steps"] = int(self.total_steps)
        values["update_interval"] = int(self.eval_interval)
        return SchedulerConfig.from_dict(values)

    def constant_terminal_loss(self) -> np.ndarray:
        """Noise-free final loss of every domain under constant scheduling."""
        budget = self.total_steps * self.tokens_per_step
        return np.array([
            domain_loss(d, budget * p, 0.0, self.amplitude_scale)
            for d, p in zip(self.domains, self.p_init)
        ])

    def with_(self, **changes) -> "SimScenario":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "name": self.name,
            "domains": [dataclasses.asdict(d) for d in self.domains],
            "p_init": list(self.p_init),
            "total_steps": int(self.total_steps),
            "tokens_per_step": float(self.tokens_per_step),
            "eval_interval": int(self.eval_interval),
            "seed": int(self.seed),
            "strategy": self.strategy,
            "model_scale": None if self.model_scale is None else list(self.model_scale),
            "reference_loss": None if self.reference_loss is None else list(self.reference_loss),
            "naive_ref_loss": float(self.naive_ref_loss),
            "config": dict(self.config),
            "deferred": bool(self.deferred),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimScenario":
        data = dict(data)
        if data.pop("version", None) != 1:
            raise InvalidInputError('scenario must declare "version": 1')
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidInputError(f"unknown scenario fields: {unknown}")
        try:
            doms = []
            for d in data.pop("domains"):
                bad = sorted(set(d) - {f.name for f in dataclasses.fields(SyntheticDomain)})
                if bad:
                    raise InvalidInputError(f"unknown domain fields: {bad}")
                doms.append(SyntheticDomain(**d))
            if data.get("model_scale") is not None:
                data["model_scale"] = tuple(data["model_scale"])
            return cls(domains=tuple(doms), **data)
        except (TypeError, KeyError) as exc:
            raise InvalidInputError(f"malformed scenario: {exc}") from None


@dataclass
class Trajectory:
    """Per-evaluation arrays of one simulated run; rows align with ``steps``."""

    strategy: str
    domains: Tuple[str, ...]
    steps: np.ndarray
    true_loss: np.ndarray
    observed_loss: np.ndarray
    ratio: np.ndarray
    applied_ratio: np.ndarray
    ref_loss: np.ndarray
    ref_ratio: np.ndarray
    tokens: np.ndarray
    refit: np.ndarray
    adapted: np.ndarray

    def records(self) -> List[dict]:
        out = []
        for k, step in enumerate(self.steps):
            def m(row):
                return {d: (None if np.isnan(v) else float(v)) for d, v in zip(self.domains, row)}
            out.append({
                "strategy": self.strategy,
                "eval": k,
                "step": int(step),
                "true_loss": m(self.true_loss[k]),
                "observed_loss": m(self.observed_loss[k]),
                "ratio": m(self.ratio[k]),
                "applied_ratio": m(self.applied_ratio[k]),
                "ref_loss": m(self.ref_loss[k]),
                "ref_ratio": m(self.ref_ratio[k]),
                "tokens": m(self.tokens[k]),
                "refit": bool(self.refit[k]),
                "adapted": bool(self.adapted[k]),
            })
        return out


class _Constant:
    def __init__(self, scenario):
        self.p = np.array(scenario.p_init)
        self.ref_loss = np.full(self.p.size, np.nan)

    def update(self, step, observed):
        return self.p.copy(), False, False

    @property
    def ref_ratio(self):
        return self.p


class _Scheduled:
    def __init__(self, scenario, naive):
        n = len(scenario.domains)
        if naive:
            cfg = scenario.scheduler_config(forecast_reference=False, adapt_ratio=False)
            ref = np.full(n, scenario.naive_ref_loss)
        else:
            cfg = scenario.scheduler_config()
            ref = None
        self.state = scheduler_init(cfg, scenario.domain_set, np.array(scenario.p_init), ref)

    def update(self, step, observed):
        self.state, q = on_evaluation(self.state, LossRecord(step, observed), inplace=True)
        return q, bool(self.state.refit_domains), self.state.adapted

    @property
    def ref_loss(self):
        return self.state.ref_loss

    @property
    def ref_ratio(self):
        return self.state.p_R


class _Sheared:
    # Compounding sheared_weights over many evaluations underflows the losing
    # domains, so the running product is kept as log-weights.
    def __init__(self, scenario):
        self.p = np.array(scenario.p_init)
        self.log_w = np.log(self.p)
        self.lam = scenario.scheduler_config().ema_lambda
        if scenario.reference_loss is None:
            self.ref_loss = scenario.constant_terminal_loss()
        else:
            self.ref_loss = np.array(scenario.reference_loss)
        self.ema = None

    def update(self, step, observed):
        self.ema = observed.copy() if self.ema is None else (1 - self.lam) * self.ema + self.lam * observed
        self.log_w = self.log_w + np.maximum(0.0, self.ema - self.ref_loss)
        self.log_w -= self.log_w.max()
        self.p = np.exp(self.log_w) / np.exp(self.log_w).sum()
        return self.p.copy(), False, False

    @property
    def ref_ratio(self):
        return self.p


def _make_strategy(scenario, strategy):
    if strategy == "constant":
        return _Constant(scenario)
    if strategy == "dro_naive":
        return _Scheduled(scenario, naive=True)
    if strategy == "drpruning":
        return _Scheduled(scenario, naive=False)
    if strategy == "sheared":
        return _Sheared(scenario)
    raise InvalidInputError(f"unknown strategy {strategy!r}")


def _noise_streams(scenario):
    return [np.random.default_rng(np.random.SeedSequence(
                int(scenario.seed), spawn_key=(zlib.crc32(d.name.encode("utf-8")),)))
            for d in scenario.domains]


def simulate(scenario: SimScenario, strategy: Optional[str] = None) -> Trajectory:
    """Run one strategy against the scenario's dynamics."""
    strategy = scenario.strategy if strategy is None else strategy
    scenario.validate()
    if strategy not in STRATEGIES:
        raise InvalidInputError(f"unknown strategy {strategy!r}")
    n = len(scenario.domains)
    K = scenario.n_evals
    amp = scenario.amplitude_scale
    chunk = scenario.eval_interval * scenario.tokens_per_step
    streams = _noise_streams(scenario)
    strat = _make_strategy(scenario, strategy)

    shape = (K, n)
    traj = Trajectory(
        strategy=strategy, domains=scenario.domain_set.names,
        steps=np.arange(1, K + 1) * scenario.eval_interval,
        true_loss=np.empty(shape), observed_loss=np.empty(shape), ratio=np.empty(shape),
        applied_ratio=np.empty(shape), ref_loss=np.empty(shape), ref_ratio=np.empty(shape),
        tokens=np.empty(shape), refit=np.zeros(K, dtype=bool), adapted=np.zeros(K, dtype=bool),
    )
    tokens = np.zeros(n)
    applied = np.array(scenario.p_init)
    pending = applied.copy()
    for k in range(K):
        step = int(traj.steps[k])
        tokens = tokens + chunk * applied
        draws = np.array([s.standard_normal() for s in streams])
        true = np.array([domain_loss(d, t, 0.0, amp) for d, t in zip(scenario.domains, tokens)])
        observed = np.array([domain_loss(d, t, z, amp)
                             for d, t, z in zip(scenario.domains, tokens, draws)])
        q, refit, adapted = strat.update(step, observed)

        traj.true_loss[k] = true
        traj.observed_loss[k] = observed
        traj.ratio[k] = q
        traj.applied_ratio[k] = applied
        traj.ref_loss[k] = strat.ref_loss
        traj.ref_ratio[k] = strat.ref_ratio
        traj.tokens[k] = tokens
        traj.refit[k] = refit
        traj.adapted[k] = adapted

        if scenario.deferred:
            applied, pending = pending, q
        else:
            applied = q
    return traj


def summarize(scenario: SimScenario, traj: Trajectory) -> dict:
    """Final losses, worst-domain excess over the irreducible loss, and data usage."""
    e_floor = np.array([d.E for d in scenario.domains])
    final = traj.true_loss[-1]
    excess = final - e_floor
    worst = traj.true_loss.max(axis=1)
    steps = traj.steps.astype(float)
    auc = float(np.sum(0.5 * (worst[1:] + worst[:-1]) * np.diff(steps))) if len(steps) > 1 else 0.0
    names = traj.domains
    total = traj.tokens[-1].sum()
    return {
        "strategy": traj.strategy,
        "final_worst_loss": float(final.max()),
        "final_worst_excess": float(excess.max()),
        "final_loss": dict(zip(names, map(float, final))),
        "final_excess": dict(zip(names, map(float, excess))),
        "auc_worst_loss": auc,
        "final_ratio": dict(zip(names, map(float, traj.ratio[-1]))),
        "data_usage": dict(zip(names, map(float, traj.tokens[-1] / total))),
    }


def compare_strategies(scenario: SimScenario, strategies: Sequence[str], return_runs=False):
    """Run every strategy on identical dynamics and noise.

    Returns the report dict, or ``(report, trajectories)`` with ``return_runs``.
    """
    strategies = list(strategies)
    if not strategies:
        raise InvalidInputError("strategies must be non-empty")
    runs = {}
    entries = []
    for s in strategies:
        traj = simulate(scenario, s)
        runs[s] = traj
        entries.append(summarize(scenario, traj))
    report = {"scenario": scenario.name, "seed": int(scenario.seed), "strategies": entries}
    if "sheared" in strategies:
        report["notes"] = [SHEARED_NOTE]
    return (report, runs) if return_runs else report


def _domains(names, A, beta, E, n0, sigma):
    return tuple(SyntheticDomain(nm, a, b, e, n0, sigma) for nm, a, b, e in zip(names, A, beta, E))


def _table7_domains():
    # EN slow to improve with a high floor; low-resource languages learn fast.
    names = ("EN", "RU", "ZH", "JA", "AR", "TR", "KO", "TH")
    beta = (0.08, 0.2, 0.15, 0.25, 0.3, 0.3, 0.25, 0.35)
    E = (2.2, 1.8, 2.0, 1.9, 1.7, 1.75, 1.8, 1.6)
    return _domains(names, (2.0,) * 8, beta, E, 1e5, 0.005)


TABLE4_RATIO = (0.670, 0.150, 0.045, 0.045, 0.045, 0.025, 0.020)
TABLE7_RATIO = tuple(v / 100.1 for v in (27.7, 18.5, 13.0, 10.4, 9.1, 8.9, 6.7, 5.8))


def preset(name: str, **changes) -> SimScenario:
    """Named scenarios; keyword arguments override scenario fields."""
    if name == "hetero-3":
        sc = SimScenario(
            name="hetero-3",
            domains=_domains(("fast", "medium", "slow"), (2.0, 2.0, 2.0), (0.5, 0.3, 0.1),
                             (1.2, 1.5, 1.8), 1e5, 0.001),
            p_init=(1 / 3, 1 / 3, 1 / 3), total_steps=20000, tokens_per_step=1000.0,
            eval_interval=10)
    elif name == "table4":
        names = ("CC", "C4", "GitHub", "Book", "Wiki", "ArXiv", "StackEx")
        sc = SimScenario(
            name="table4",
            domains=_domains(names, (2.0,) * 7, (0.3, 0.3, 0.35, 0.2, 0.1, 0.3, 0.3),
                             (1.9, 2.0, 0.8, 1.9, 1.6, 1.3, 1.5), 1e5, 0.005),
            p_init=TABLE4_RATIO, total_steps=48000, tokens_per_step=1000.0, eval_interval=400)
    elif name == "table7":
        sc = SimScenario(
            name="table7", domains=_table7_domains(), p_init=TABLE7_RATIO,
            total_steps=20000, tokens_per_step=1000.0, eval_interval=10)
    elif name == "table7-unreachable":
        base = preset("table7")
        ref = base.constant_terminal_loss()
        ref[0] = base.domains[0].E - 0.3
        sc = base.with_(name="table7-unreachable", reference_loss=tuple(ref))
    elif name == "single":
        sc = SimScenario(
            name="single", domains=_domains(("only",), (2.0,), (0.3,), (1.5,), 1e5, 0.0),
            p_init=(1.0,), total_steps=2000, tokens_per_step=1000.0, eval_interval=20)
    else:
        raise InvalidInputError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return sc.with_(**changes) if changes else sc


PRESETS = ("hetero-3", "table4", "table7", "table7-unreachable", "single")

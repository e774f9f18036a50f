"""Structured-pruning mask mathematics.

Hard-concrete gates, the Lagrangian target penalty, top-score mask
selection against a target architecture, and mask agreement.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

from ._validation import check_vector
from .exceptions import InvalidInputError

GRANULARITIES = ("layer", "hidden", "head", "intermediate")


def lagrangian_penalty(z_sum, t, lambda_mult, phi_mult):
    """``lambda * (z_sum - t) + phi * (z_sum - t)**2``."""
    dev = z_sum - t
    return lambda_mult * dev + phi_mult * dev * dev


@dataclass(frozen=True)
class HardConcreteParams:
    log_alpha: float = 0.0
    temperature: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidInputError("temperature must be > 0")
        if not (self.gamma < 0 and self.zeta > 1):
            raise InvalidInputError("need gamma < 0 < 1 < zeta")


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def hc_sample(params: HardConcreteParams, u):
    """Map uniform variates ``u`` in (0, 1) to hard-concrete gates in [0, 1].

    Accepts a scalar or an array; randomness stays with the caller.
    """
    u_arr = np.asarray(u, dtype=float)
    if np.any(~(u_arr > 0) | ~(u_arr < 1)):
        raise InvalidInputError("u must lie strictly inside (0, 1)")
    logits = (np.log(u_arr) - np.log1p(-u_arr) + params.log_alpha) / params.temperature
    stretched = _sigmoid(logits) * (params.zeta - params.gamma) + params.gamma
    gate = np.clip(stretched, 0.0, 1.0)
    return float(gate) if gate.ndim == 0 else gate


def hc_open_prob(params: HardConcreteParams) -> float:
    """Probability that a sampled gate is non-zero."""
    return float(_sigmoid(params.log_alpha - params.temperature * np.log(-params.gamma / params.zeta)))


def select_mask(scores, quota: int) -> np.ndarray:
    """Keep the ``quota`` highest scores; ties go to the lower index."""
    scores = check_vector(scores, name="scores", allow_empty=True)
    if isinstance(quota, bool) or int(quota) != quota or quota < 0:
        raise InvalidInputError(f"quota must be a non-negative integer, got {quota!r}")
    quota = int(quota)
    if quota > scores.size:
        raise InvalidInputError(f"quota {quota} exceeds {scores.size} substructures")
    # Stable sort on negated scores keeps lower indices first among equals.
    keep = np.argsort(-scores, kind="stable")[:quota]
    mask = np.zeros(scores.size, dtype=np.int64)
    mask[keep] = 1
    return mask


def _binary(x, name):
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name}: expected a 1-d mask")
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidInputError(f"{name}: mask entries must be 0 or 1")
    return arr.astype(np.int64)


def mask_similarity(a, b) -> float:
    """Fraction of positions on which two binary masks agree."""
    a = _binary(a, "a")
    b = _binary(b, "b")
    if a.size != b.size:
        raise InvalidInputError(f"mask lengths differ: {a.size} vs {b.size}")
    if a.size == 0:
        return 1.0
    return float(np.mean(a == b))


@dataclass(frozen=True)
class TargetConfig:
    """Transformer shape; doubles as the source model and the pruning target."""

    layers: int
    hidden: int
    intermediate: int
    heads: int
    head_dim: int
    kv_heads: Optional[int] = None

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None and f.name == "kv_heads":
                continue
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v <= 0:
                raise InvalidInputError(f"{f.name} must be a positive integer, got {v!r}")
        if self.kv_heads is not None and self.heads % self.kv_heads:
            raise InvalidInputError(f"heads ({self.heads}) not divisible by kv_heads ({self.kv_heads})")

    def quotas(self) -> Dict[str, int]:
        """Retained count per granularity (heads counted per layer)."""
        return {"layer": self.layers, "hidden": self.hidden,
                "head": self.heads, "intermediate": self.intermediate}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TargetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidInputError(f"unknown target fields: {unknown}")
        try:
            return cls(**dict(data))
        except TypeError as exc:
            raise InvalidInputError(f"malformed target config: {exc}") from None


def validate_target(source: TargetConfig, target: TargetConfig) -> List[str]:
    """List every way ``target`` is not a valid pruning of ``source``; empty means ok."""
    violations = []
    for name in ("layers", "hidden", "intermediate", "heads"):
        if getattr(target, name) > getattr(source, name):
            violations.append(f"{name} exceeds source")
    if target.head_dim != source.head_dim:
        violations.append("head_dim differs from source")
    if target.kv_heads is not None:
        if source.kv_heads is not None and target.kv_heads > source.kv_heads:
            violations.append("kv_heads exceeds source")
        if target.heads % target.kv_heads:
            violations.append("heads not divisible by kv_heads")
    return violations


@dataclass
class MaskSet:
    """Scores and binary decisions per granularity."""

    scores: Dict[str, np.ndarray]
    masks: Dict[str, np.ndarray]

    @classmethod
    def from_scores(cls, scores: Mapping[str, object], target: TargetConfig) -> "MaskSet":
        quotas = target.quotas()
        unknown = sorted(set(scores) - set(quotas))
        if unknown:
            raise InvalidInputError(f"unknown granularities: {unknown}")
        sc = {g: check_vector(v, name=g) for g, v in scores.items()}
        return cls(scores=sc, masks={g: select_mask(v, quotas[g]) for g, v in sc.items()})

    def similarity(self, other: "MaskSet") -> Dict[str, float]:
        shared = [g for g in GRANULARITIES if g in self.masks and g in other.masks]
        return {g: mask_similarity(self.masks[g], other.masks[g]) for g in shared}


ARCHITECTURES = {
    "llama2-7b": TargetConfig(layers=32, hidden=4096, intermediate=11008, heads=32, head_dim=128),
    "pruned-0.5b": TargetConfig(layers=24, hidden=1024, intermediate=2816, heads=8, head_dim=128),
    "pruned-1.3b": TargetConfig(layers=24, hidden=2048, intermediate=5504, heads=16, head_dim=128),
    "pruned-2.7b": TargetConfig(layers=32, hidden=2560, intermediate=6912, heads=20, head_dim=128),
    "qwen2-7b": TargetConfig(layers=28, hidden=3584, intermediate=18944, heads=28, head_dim=128, kv_heads=4),
    "qwen2-1.5b": TargetConfig(layers=28, hidden=1536, intermediate=8960, heads=12, head_dim=128, kv_heads=2),
    "pruned-1.8b": TargetConfig(layers=28, hidden=1536, intermediate=8960, heads=14, head_dim=128, kv_heads=2),
}

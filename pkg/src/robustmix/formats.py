"""Wire formats: run manifests, loss-record lines, ratio documents, state files."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from typing import Any, Mapping, Optional

import numpy as np

from .domain import DomainSet, LossRecord, SchedulerConfig, as_ratio
from .exceptions import DomainMismatchError, InvalidInputError
from .simulator import SimScenario

FORMAT_VERSION = 1


def dumps(obj) -> str:
    """Compact, key-order-preserving JSON.

    Python's float repr is the shortest string that round-trips exactly
    (at most 17 significant digits), so replayed runs stay bit-identical.
    """
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def loads(text: str, what: str = "document"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{what}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def read_json(path: str, what: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return loads(fh.read(), what)
    except OSError as exc:
        raise InvalidInputError(f"{what}: cannot read {path}: {exc.strerror}") from None


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to a temporary sibling file, then rename it over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    umask = os.umask(0)
    os.umask(umask)
    try:
        os.chmod(tmp, 0o666 & ~umask)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require_mapping(data, what):
    if not isinstance(data, Mapping):
        raise InvalidInputError(f"{what}: expected a JSON object")
    return data


def _check_version(data, what):
    if data.get("version") != FORMAT_VERSION:
        raise InvalidInputError(f'{what}: must declare "version": {FORMAT_VERSION}')


def _vector(value, domains: DomainSet, what: str) -> np.ndarray:
    if isinstance(value, Mapping):
        return domains.vector_from_mapping(value, what=what)
    if isinstance(value, (list, tuple)):
        if len(value) != domains.n:
            raise DomainMismatchError(f"{what}: {len(value)} entries for {domains.n} domains")
        try:
            return np.array([float(v) for v in value])
        except (TypeError, ValueError):
            raise InvalidInputError(f"{what}: entries must be numbers") from None
    raise InvalidInputError(f"{what}: expected an object keyed by domain or a list")


@dataclass(frozen=True)
class RunManifest:
    """Everything needed to start a scheduler run, plus an optional scenario."""

    config: SchedulerConfig
    domains: DomainSet
    p_init: tuple
    initial_ref_loss: Optional[tuple] = None
    scenario: Optional[SimScenario] = None

    _FIELDS = ("version", "config", "domains", "p_init", "initial_ref_loss", "scenario")

    @classmethod
    def from_dict(cls, data: Any) -> "RunManifest":
        data = _require_mapping(data, "manifest")
        _check_version(data, "manifest")
        unknown = sorted(set(data) - set(cls._FIELDS))
        if unknown:
            raise InvalidInputError(f"manifest: unknown fields {unknown}")
        if "domains" not in data or "p_init" not in data:
            raise InvalidInputError('manifest: "domains" and "p_init" are required')
        if not isinstance(data["domains"], list):
            raise InvalidInputError("manifest: domains must be a list of names")
        domains = DomainSet(data["domains"])
        try:
            config = SchedulerConfig.from_dict(_require_mapping(data.get("config", {}), "config"))
        except TypeError as exc:
            raise InvalidInputError(f"manifest config: {exc}") from None
        p_init = as_ratio(_vector(data["p_init"], domains, "p_init"), n=domains.n,
                          strictly_positive=True, name="p_init")
        ref = data.get("initial_ref_loss")
        if ref is not None:
            ref = tuple(float(v) for v in _vector(ref, domains, "initial_ref_loss"))
            if not all(math.isfinite(v) for v in ref):
                raise InvalidInputError("initial_ref_loss: entries must be finite")
        scenario = data.get("scenario")
        if scenario is not None:
            scenario = SimScenario.from_dict(_require_mapping(scenario, "scenario"))
        return cls(config=config, domains=domains, p_init=tuple(float(v) for v in p_init),
                   initial_ref_loss=ref, scenario=scenario)

    def to_dict(self) -> dict:
        out = {
            "version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "domains": list(self.domains.names),
            "p_init": self.domains.as_mapping(self.p_init),
        }
        if self.initial_ref_loss is not None:
            out["initial_ref_loss"] = self.domains.as_mapping(self.initial_ref_loss)
        if self.scenario is not None:
            out["scenario"] = self.scenario.to_dict()
        return out

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        return cls.from_dict(read_json(path, "manifest"))


def parse_loss_record(line: str, domains: DomainSet) -> LossRecord:
    """Parse ``{"step": int, "losses": {domain: float}}``."""
    data = _require_mapping(loads(line, "loss record"), "loss record")
    unknown = sorted(set(data) - {"step", "losses"})
    if unknown:
        raise InvalidInputError(f"loss record: unknown fields {unknown}")
    step = data.get("step")
    if isinstance(step, bool) or not isinstance(step, int):
        raise InvalidInputError("loss record: step must be an integer")
    losses = data.get("losses")
    if not isinstance(losses, Mapping):
        raise InvalidInputError("loss record: losses must be an object keyed by domain")
    for v in losses.values():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise InvalidInputError("loss record: losses must be numbers")
    return LossRecord.from_mapping(step, losses, domains)


def render_loss_record(record: LossRecord, domains: DomainSet) -> str:
    return dumps({"step": record.step, "losses": domains.as_mapping(record.losses)})


def ratio_document(step: int, ratio, ref_loss, ref_ratio, domains: DomainSet) -> dict:
    return {
        "step": int(step),
        "ratio": domains.as_mapping(ratio),
        "ref_loss": domains.as_mapping(ref_loss),
        "ref_ratio": domains.as_mapping(ref_ratio),
    }

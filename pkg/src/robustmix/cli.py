"""``robustmix`` command line.

Standard output carries only result documents (one JSON value per line);
diagnostics go to standard error. Exit codes: 0 success, 2 malformed
input, 3 domain mismatch, 4 out-of-order step, 5 fit failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import pruning
from .domain import temperature_smooth
from .exceptions import DomainMismatchError, InvalidInputError, RobustMixError
from .formats import (FORMAT_VERSION, RunManifest, atomic_write, dumps, loads, parse_loss_record,
                      ratio_document, read_json)
from .scaling import fit_power_law
from .scheduler import SchedulerState, init, on_evaluation
from .simulator import PRESETS, STRATEGIES, SimScenario, compare_strategies, preset

FIT_DIGITS = 12


def _read_text(path: str, what: str) -> str:
    if path == "-":
        return sys.stdin.read()
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InvalidInputError(f"{what}: cannot read {path}: {exc.strerror}") from None


def _emit(doc) -> None:
    sys.stdout.write(dumps(doc) + "\n")


def _sig(x: float, digits: int = FIT_DIGITS) -> float:
    return float(f"{x:.{digits}g}")


# ---------------------------------------------------------------- step

def _effective_manifest(args) -> RunManifest:
    manifest = RunManifest.load(args.manifest)
    if args.rho is not None:
        manifest = dataclasses.replace(
            manifest, config=dataclasses.replace(manifest.config, rho=args.rho))
    return manifest


def _load_state(path: str, manifest: RunManifest) -> SchedulerState:
    doc = read_json(path, "state")
    if not isinstance(doc, dict) or doc.get("version") != FORMAT_VERSION:
        raise InvalidInputError(f'state: must declare "version": {FORMAT_VERSION}')
    stored = RunManifest.from_dict(doc.get("manifest"))
    if stored.domains != manifest.domains:
        raise DomainMismatchError("state was produced for a different domain set")
    if stored != manifest:
        raise InvalidInputError("state was produced with a different manifest")
    return SchedulerState.from_dict(doc.get("state"))


def _state_text(manifest: RunManifest, state: SchedulerState) -> str:
    return dumps({"version": FORMAT_VERSION, "manifest": manifest.to_dict(),
                  "state": state.to_dict()})


def cmd_step(args) -> int:
    manifest = _effective_manifest(args)
    persist = args.state != "-"
    if persist and os.path.exists(args.state):
        state = _load_state(args.state, manifest)
    else:
        state = init(manifest.config, manifest.domains, np.array(manifest.p_init),
                     None if manifest.initial_ref_loss is None else np.array(manifest.initial_ref_loss))
    text = _read_text(args.input, "loss records")
    for line in text.splitlines():
        if not line.strip():
            continue
        record = parse_loss_record(line, manifest.domains)
        state, ratio = on_evaluation(state, record, inplace=True)
        # Persist before printing so a printed document always has its state on disk.
        if persist:
            atomic_write(args.state, _state_text(manifest, state))
        _emit(ratio_document(state.step, ratio, state.ref_loss, state.p_R, manifest.domains))
        sys.stdout.flush()
    return 0


# ---------------------------------------------------------------- fit

def _parse_points(text: str) -> np.ndarray:
    stripped = text.strip()
    if stripped[:1] in ("[", "{"):
        data = loads(stripped, "points")
        if isinstance(data, dict):
            if set(data) != {"steps", "losses"}:
                raise InvalidInputError('points object must have exactly "steps" and "losses"')
            pairs = list(zip(data["steps"], data["losses"]))
            if len(data["steps"]) != len(data["losses"]):
                raise InvalidInputError("points: steps and losses differ in length")
        elif all(isinstance(p, dict) for p in data):
            pairs = [(p.get("step"), p.get("loss")) for p in data]
        else:
            pairs = data
    else:
        pairs = [line.replace(",", " ").split() for line in stripped.splitlines()
                 if line.strip() and not line.lstrip().startswith("#")]
    try:
        arr = np.array([[float(a), float(b)] for a, b in pairs], dtype=float)
    except (TypeError, ValueError):
        raise InvalidInputError("points: expected (step, loss) number pairs") from None
    return arr.reshape(-1, 2)


def cmd_fit(args) -> int:
    points = _parse_points(_read_text(args.points, "points"))
    fit = fit_power_law(points, args.horizon, args.delta)
    _emit({
        "C": _sig(fit.C),
        "E": _sig(fit.E),
        "beta": _sig(fit.beta),
        "huber_objective": _sig(fit.huber_objective),
        "horizon_prediction": _sig(fit.horizon_prediction),
        "horizon": _sig(fit.horizon),
    })
    return 0


# ---------------------------------------------------------------- simulate

def _scenario(args) -> SimScenario:
    sources = [s for s in (args.scenario, args.preset, args.manifest) if s is not None]
    if len(sources) != 1:
        raise InvalidInputError("give exactly one of --scenario, --preset, --manifest")
    if args.preset is not None:
        sc = preset(args.preset)
    elif args.manifest is not None:
        manifest = RunManifest.load(args.manifest)
        if manifest.scenario is None:
            raise InvalidInputError("manifest has no scenario block")
        sc = manifest.scenario
    else:
        data = read_json(args.scenario, "scenario")
        if not isinstance(data, dict):
            raise InvalidInputError("scenario: expected a JSON object")
        sc = SimScenario.from_dict(data)
    if args.seed is not None:
        sc = sc.with_(seed=args.seed)
    if args.rho is not None:
        sc = sc.with_(config={**dict(sc.config or {}), "rho": args.rho})
    sc.validate()
    return sc


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    if args.compare:
        strategies = [s.strip() for s in args.compare.split(",") if s.strip()]
    else:
        strategies = [args.strategy or sc.strategy]
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise InvalidInputError(f"unknown strategy {unknown[0]!r}; expected one of {list(STRATEGIES)}")
    report, runs = compare_strategies(sc, strategies, return_runs=True)
    os.makedirs(args.out, exist_ok=True)
    lines = [dumps(rec) for s in strategies for rec in runs[s].records()]
    atomic_write(os.path.join(args.out, "trajectory.jsonl"), "\n".join(lines) + "\n")
    atomic_write(os.path.join(args.out, "report.json"), dumps(report) + "\n")
    _emit(report)
    return 0


# ---------------------------------------------------------------- mask

def _architecture(spec: str) -> pruning.TargetConfig:
    if spec in pruning.ARCHITECTURES:
        return pruning.ARCHITECTURES[spec]
    if not os.path.exists(spec):
        raise InvalidInputError(
            f"unknown architecture {spec!r}; use a JSON file or one of {sorted(pruning.ARCHITECTURES)}")
    data = read_json(spec, "architecture")
    if not isinstance(data, dict):
        raise InvalidInputError("architecture: expected a JSON object")
    return pruning.TargetConfig.from_dict(data)


def _load_masks(path: str):
    data = loads(_read_text(path, "mask"), "mask")
    if isinstance(data, dict) and "masks" in data:
        data = data["masks"]
    elif isinstance(data, dict) and "mask" in data:
        data = data["mask"]
    return data


def cmd_mask(args) -> int:
    if args.mask_command == "select":
        scores = loads(_read_text(args.scores, "scores"), "scores")
        if isinstance(scores, list):
            if args.quota is None:
                raise InvalidInputError("a flat score list needs --quota")
            mask = pruning.select_mask(scores, args.quota)
            _emit({"mask": mask.tolist(), "kept": int(mask.sum())})
        elif isinstance(scores, dict):
            if args.target is None:
                raise InvalidInputError("per-granularity scores need --target")
            ms = pruning.MaskSet.from_scores(scores, _architecture(args.target))
            _emit({"masks": {g: m.tolist() for g, m in ms.masks.items()},
                   "kept": {g: int(m.sum()) for g, m in ms.masks.items()}})
        else:
            raise InvalidInputError("scores: expected a list or an object of lists")
    elif args.mask_command == "similarity":
        a, b = _load_masks(args.a), _load_masks(args.b)
        if isinstance(a, dict) and isinstance(b, dict):
            shared = [g for g in a if g in b]
            _emit({"similarity": {g: pruning.mask_similarity(a[g], b[g]) for g in shared}})
        elif isinstance(a, list) and isinstance(b, list):
            _emit({"similarity": pruning.mask_similarity(a, b)})
        else:
            raise InvalidInputError("masks must both be lists or both be objects of lists")
    else:
        violations = pruning.validate_target(_architecture(args.source), _architecture(args.target))
        _emit({"ok": not violations, "violations": violations})
    return 0


# ---------------------------------------------------------------- smooth

def cmd_smooth(args) -> int:
    counts = loads(_read_text(args.counts, "counts"), "counts")
    if isinstance(counts, dict):
        names = list(counts)
        ratio = temperature_smooth([counts[k] for k in names], args.rate)
        _emit({"ratio": dict(zip(names, map(float, ratio)))})
    elif isinstance(counts, list):
        _emit({"ratio": [float(v) for v in temperature_smooth(counts, args.rate)]})
    else:
        raise InvalidInputError("counts: expected an object or a list of numbers")
    return 0


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustmix", description="Robust data-mixture scheduling tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("step", help="feed loss records to a stateful scheduler run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--state", required=True, help='state file, or "-" to keep state in memory')
    p.add_argument("--input", default="-", help="loss-record JSONL file (default: stdin)")
    p.add_argument("--rho", type=float)
    p.set_defaults(func=cmd_step)

    p = sub.add_parser("fit", help="fit a power-law loss curve")
    p.add_argument("points", help='points file ("-" for stdin)')
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-3)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run the synthetic training simulator")
    p.add_argument("--scenario")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--strategy")
    p.add_argument("--compare", help="comma-separated strategies run on identical dynamics")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mask", help="pruning-mask utilities")
    msub = p.add_subparsers(dest="mask_command", required=True, parser_class=_Parser)
    m = msub.add_parser("select")
    m.add_argument("scores")
    m.add_argument("--quota", type=int)
    m.add_argument("--target")
    m = msub.add_parser("similarity")
    m.add_argument("a")
    m.add_argument("b")
    m = msub.add_parser("validate")
    m.add_argument("--source", required=True)
    m.add_argument("--target", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("smooth", help="temperature-smoothed sampling ratio from counts")
    p.add_argument("counts")
    p.add_argument("--rate", type=float, default=0.3)
    p.set_defaults(func=cmd_smooth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RobustMixError as exc:
        sys.stderr.write(f"robustmix: {exc}\n")
        return exc.exit_code

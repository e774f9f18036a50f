import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from robustmix import RunManifest, SchedulerConfig, preset
from robustmix.cli import main
from robustmix.domain import DomainSet
from robustmix.formats import parse_loss_record, render_loss_record
from robustmix.exceptions import InvalidInputError, DomainMismatchError
from robustmix.simulator import TABLE4_RATIO

NAMES3 = ["a", "b", "c"]


def _write(path, obj):
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return str(path)


def _manifest(tmp_path, names=NAMES3, p_init=None, **config):
    p_init = p_init or [1 / len(names)] * len(names)
    return _write(tmp_path / "manifest.json",
                  {"version": 1, "domains": names, "p_init": dict(zip(names, p_init)),
                   "config": config})


def _records(names, losses_by_step):
    return "\n".join(json.dumps({"step": s, "losses": dict(zip(names, ls))})
                     for s, ls in losses_by_step) + "\n"


def _run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


class TestStep:
    def test_cold_start_equal_losses(self, tmp_path, capsys):
        man = _manifest(tmp_path, total_steps=4000, update_interval=400)
        inp = _write(tmp_path / "in.jsonl", _records(NAMES3, [(100, [2.0, 2.0, 2.0])]))
        code, out, _ = _run(capsys, ["step", "--manifest", man, "--state", "-", "--input", inp])
        assert code == 0
        doc = json.loads(out)
        assert doc["step"] == 100
        assert list(doc["ratio"]) == NAMES3
        assert all(v == pytest.approx(1 / 3, abs=1e-12) for v in doc["ratio"].values())

    def test_table4_manifest(self, tmp_path, capsys):
        names = list(preset("table4").domain_set.names)
        man = _manifest(tmp_path, names, list(TABLE4_RATIO))
        losses = [2.0, 2.5, 1.5, 2.2, 2.1, 1.9, 2.8]
        inp = _write(tmp_path / "in.jsonl", _records(names, [(400, losses)]))
        code, out, _ = _run(capsys, ["step", "--manifest", man, "--state", "-", "--input", inp])
        doc = json.loads(out)
        assert code == 0 and list(doc["ratio"]) == names
        assert math.fsum(doc["ratio"].values()) == pytest.approx(1.0, abs=1e-12)
        assert doc["ref_ratio"] == pytest.approx(dict(zip(names, TABLE4_RATIO)))

    def test_replay_byte_identical(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        rows = [(400 * k, list(3.0 - 0.1 * np.log(k) + rng.normal(0, 0.01, 3))) for k in range(1, 41)]
        man = _manifest(tmp_path, total_steps=16000)
        inp = _write(tmp_path / "in.jsonl", _records(NAMES3, rows))
        _, first, _ = _run(capsys, ["step", "--manifest", man, "--state", "-", "--input", inp])
        _, second, _ = _run(capsys, ["step", "--manifest", man, "--state", "-", "--input", inp])
        assert first == second and len(first.splitlines()) == 40

    def test_state_file_resume(self, tmp_path, capsys):
        rows = [(400 * k, [3.0 - 0.1 * np.log(k), 2.5, 2.0 - 0.05 * np.log(k)]) for k in range(1, 31)]
        man = _manifest(tmp_path, total_steps=12000)
        whole = _write(tmp_path / "all.jsonl", _records(NAMES3, rows))
        head = _write(tmp_path / "head.jsonl", _records(NAMES3, rows[:15]))
        tail = _write(tmp_path / "tail.jsonl", _records(NAMES3, rows[15:]))
        _, fresh, _ = _run(capsys, ["step", "--manifest", man, "--state", str(tmp_path / "s1"),
                                    "--input", whole])
        state = str(tmp_path / "s2")
        _, a, _ = _run(capsys, ["step", "--manifest", man, "--state", state, "--input", head])
        _, b, _ = _run(capsys, ["step", "--manifest", man, "--state", state, "--input", tail])
        assert a + b == fresh
        assert json.load(open(state))["version"] == 1

    def test_stdin_input(self, tmp_path, capsys, monkeypatch):
        import io
        man = _manifest(tmp_path)
        monkeypatch.setattr(sys, "stdin", io.StringIO(_records(NAMES3, [(10, [1.0, 1.0, 1.0])])))
        code, out, _ = _run(capsys, ["step", "--manifest", man, "--state", "-"])
        assert code == 0 and json.loads(out)["step"] == 10

    @pytest.mark.parametrize("line, code", [
        ("{not json", 2),
        ('{"step": 1.5, "losses": {"a": 1, "b": 1, "c": 1}}', 2),
        ('{"step": 1, "losses": {"a": "x", "b": 1, "c": 1}}', 2),
        ('{"step": 1, "losses": {"a": 1, "b": 1, "c": 1}, "extra": 0}', 2),
        ('{"step": 1, "losses": {"a": 1, "b": 1}}', 3),
        ('{"step": 1, "losses": {"a": 1, "b": 1, "c": 1, "d": 1}}', 3),
    ])
    def test_bad_records(self, tmp_path, capsys, line, code):
        man = _manifest(tmp_path)
        inp = _write(tmp_path / "in.jsonl", line + "\n")
        got, out, err = _run(capsys, ["step", "--manifest", man, "--state", "-", "--input", inp])
        assert got == code and out == "" and err.startswith("robustmix:")

    def test_out_of_order(self, tmp_path, capsys):
        man = _manifest(tmp_path)
        inp = _write(tmp_path / "in.jsonl", _records(NAMES3, [(20, [1, 1, 1]), (20, [1, 1, 1])]))
        code, out, _ = _run(capsys, ["step", "--manifest", man, "--state", "-", "--input", inp])
        assert code == 4 and len(out.splitlines()) == 1

    def test_state_for_other_domains(self, tmp_path, capsys):
        state = str(tmp_path / "state.json")
        inp = _write(tmp_path / "in.jsonl", _records(NAMES3, [(10, [1, 1, 1])]))
        _run(capsys, ["step", "--manifest", _manifest(tmp_path), "--state", state, "--input", inp])
        other = _manifest(tmp_path, ["a", "b", "d"])
        code, _, _ = _run(capsys, ["step", "--manifest", other, "--state", state, "--input", inp])
        assert code == 3
        changed = _manifest(tmp_path, rho=0.5)
        code, _, err = _run(capsys, ["step", "--manifest", changed, "--state", state, "--input", inp])
        assert code == 2 and "different manifest" in err

    def test_atomic_state_write(self, tmp_path, capsys, monkeypatch):
        state = tmp_path / "state.json"
        man = _manifest(tmp_path)
        inp = _write(tmp_path / "in.jsonl", _records(NAMES3, [(10, [1, 1, 1])]))
        _run(capsys, ["step", "--manifest", man, "--state", str(state), "--input", inp])
        before = state.read_bytes()

        def broken(src, dst):
            raise OSError(28, "No space left on device")

        monkeypatch.setattr(os, "replace", broken)
        inp2 = _write(tmp_path / "in2.jsonl", _records(NAMES3, [(20, [1, 1, 1])]))
        with pytest.raises(OSError):
            main(["step", "--manifest", man, "--state", str(state), "--input", inp2])
        assert state.read_bytes() == before
        assert capsys.readouterr().out == ""
        assert not [p for p in os.listdir(tmp_path) if p.startswith(".tmp-")]

    def test_rho_override_zero_keeps_ratio(self, tmp_path, capsys):
        man = _manifest(tmp_path, p_init=[0.5, 0.3, 0.2])
        inp = _write(tmp_path / "in.jsonl", _records(NAMES3, [(10, [3.0, 1.0, 2.0])]))
        _, out, _ = _run(capsys, ["step", "--manifest", man, "--state", "-", "--input", inp,
                                  "--rho", "0"])
        assert json.loads(out)["ratio"] == pytest.approx({"a": 0.5, "b": 0.3, "c": 0.2}, abs=1e-12)


class TestFit:
    def test_constant(self, tmp_path, capsys):
        pts = _write(tmp_path / "p.json", [[s, 2.0] for s in range(100, 1100, 100)])
        code, out, _ = _run(capsys, ["fit", pts, "--horizon", "5000"])
        doc = json.loads(out)
        assert code == 0 and doc["horizon_prediction"] == pytest.approx(2.0, rel=1e-4)

    def test_noiseless_formats(self, tmp_path, capsys):
        steps = np.arange(500, 10001, 500)
        losses = 1.5 + 2.0 * steps ** -0.3
        outs = []
        for name, body in [
            ("pairs.json", json.dumps([[int(s), float(v)] for s, v in zip(steps, losses)])),
            ("objs.json", json.dumps([{"step": int(s), "loss": float(v)} for s, v in zip(steps, losses)])),
            ("cols.json", json.dumps({"steps": steps.tolist(), "losses": losses.tolist()})),
            ("cols.txt", "# step loss\n" + "\n".join(f"{s} {float(v)!r}" for s, v in zip(steps, losses))),
        ]:
            code, out, _ = _run(capsys, ["fit", _write(tmp_path / name, body), "--horizon", "20000"])
            assert code == 0
            outs.append(out)
        assert len(set(outs)) == 1
        doc = json.loads(outs[0])
        assert doc["horizon_prediction"] == pytest.approx(1.5 + 2.0 * 20000 ** -0.3, rel=1e-6)
        assert doc["beta"] == pytest.approx(0.3, rel=1e-3)

    def test_insufficient_history(self, tmp_path, capsys):
        pts = _write(tmp_path / "p.json", [[100, 2.0], [200, 1.9], [300, 1.8]])
        code, out, err = _run(capsys, ["fit", pts, "--horizon", "1000"])
        assert code == 5 and out == "" and "insufficient history" in err

    @pytest.mark.parametrize("body", ['[[1, "x"]]', '{"steps": [1, 2]}', "[[1, 2, 3]]"])
    def test_malformed(self, tmp_path, capsys, body):
        code, out, _ = _run(capsys, ["fit", _write(tmp_path / "p.json", body), "--horizon", "10"])
        assert code == 2 and out == ""

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = _run(capsys, ["fit", str(tmp_path / "nope"), "--horizon", "10"])
        assert code == 2 and "cannot read" in err


class TestSimulate:
    def test_preset_outputs(self, tmp_path, capsys):
        out_dir = tmp_path / "run"
        code, out, _ = _run(capsys, ["simulate", "--preset", "single", "--out", str(out_dir)])
        assert code == 0
        report = json.loads(out)
        assert json.loads((out_dir / "report.json").read_text()) == report
        lines = (out_dir / "trajectory.jsonl").read_text().splitlines()
        assert len(lines) == preset("single").n_evals
        assert all(json.loads(l)["ratio"] == {"only": 1.0} for l in lines)

    def test_compare_and_scenario_file(self, tmp_path, capsys):
        sc = preset("hetero-3").with_(total_steps=2000, eval_interval=20)
        path = _write(tmp_path / "sc.json", sc.to_dict())
        code, out, _ = _run(capsys, ["simulate", "--scenario", path, "--out", str(tmp_path / "o"),
                                     "--compare", "constant,drpruning", "--seed", "4"])
        assert code == 0
        report = json.loads(out)
        assert [e["strategy"] for e in report["strategies"]] == ["constant", "drpruning"]
        assert len((tmp_path / "o" / "trajectory.jsonl").read_text().splitlines()) == 200

    def test_manifest_scenario(self, tmp_path, capsys):
        sc = preset("single")
        path = _write(tmp_path / "m.json", {"version": 1, "domains": ["all"], "p_init": [1.0],
                                            "scenario": sc.to_dict()})
        code, _, _ = _run(capsys, ["simulate", "--manifest", path, "--out", str(tmp_path / "o")])
        assert code == 0

    def test_errors(self, tmp_path, capsys):
        code, _, _ = _run(capsys, ["simulate", "--preset", "single", "--out", str(tmp_path),
                                   "--strategy", "oracle"])
        assert code == 2
        code, _, _ = _run(capsys, ["simulate", "--out", str(tmp_path)])
        assert code == 2
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--preset", "nope", "--out", str(tmp_path)])
        assert exc.value.code == 2


class TestMask:
    def test_select_flat(self, tmp_path, capsys):
        scores = _write(tmp_path / "s.json", [0.1, 0.9, 0.5, 0.7])
        code, out, _ = _run(capsys, ["mask", "select", scores, "--quota", "2"])
        assert code == 0 and json.loads(out) == {"mask": [False, True, False, True], "kept": 2}

    def test_select_per_granularity(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        tgt = _write(tmp_path / "tgt.json",
                     {"hidden": 4, "heads": 2, "intermediate": 8, "layers": 2, "head_dim": 16})
        scores = {"hidden": rng.random(8).tolist(), "head": rng.random(4).tolist(),
                  "intermediate": rng.random(16).tolist(), "layer": rng.random(3).tolist()}
        code, out, err = _run(capsys, ["mask", "select", _write(tmp_path / "sc.json", scores),
                                       "--target", tgt])
        assert code == 0, err
        doc = json.loads(out)
        assert doc["kept"] == {"hidden": 4, "head": 2, "intermediate": 8, "layer": 2}

    def test_similarity(self, tmp_path, capsys):
        a = _write(tmp_path / "a.json", [1, 1, 0, 0])
        b = _write(tmp_path / "b.json", [1, 0, 1, 0])
        code, out, _ = _run(capsys, ["mask", "similarity", a, b])
        assert code == 0 and json.loads(out)["similarity"] == pytest.approx(0.5)
        c = _write(tmp_path / "c.json", [1, 0])
        code, _, _ = _run(capsys, ["mask", "similarity", a, c])
        assert code == 2

    def test_validate(self, capsys):
        code, out, _ = _run(capsys, ["mask", "validate", "--source", "qwen2-7b", "--target", "pruned-1.8b"])
        assert code == 0 and json.loads(out) == {"ok": True, "violations": []}
        code, out, _ = _run(capsys, ["mask", "validate", "--source", "pruned-1.8b", "--target", "qwen2-7b"])
        doc = json.loads(out)
        assert code == 0 and doc["ok"] is False and doc["violations"]

    def test_unknown_architecture(self, capsys):
        code, _, err = _run(capsys, ["mask", "validate", "--source", "nope", "--target", "qwen2-7b"])
        assert code == 2 and "unknown architecture" in err


class TestSmooth:
    def test_mapping(self, tmp_path, capsys):
        counts = _write(tmp_path / "c.json", {"en": 1e9, "zh": 1e7})
        code, out, _ = _run(capsys, ["smooth", counts])
        ratio = json.loads(out)["ratio"]
        expected = np.array([1e9, 1e7]) ** 0.3
        expected /= expected.sum()
        assert code == 0 and list(ratio) == ["en", "zh"]
        assert [ratio["en"], ratio["zh"]] == pytest.approx(expected, rel=1e-12)

    def test_list_and_rate(self, tmp_path, capsys):
        path = _write(tmp_path / "c.json", [3, 1])
        code, out, _ = _run(capsys, ["smooth", path, "--rate", "1"])
        assert code == 0 and json.loads(out)["ratio"] == pytest.approx([0.75, 0.25])
        _, out, _ = _run(capsys, ["smooth", path, "--rate", "0"])
        assert json.loads(out)["ratio"] == pytest.approx([0.5, 0.5])

    def test_bad(self, tmp_path, capsys):
        code, _, _ = _run(capsys, ["smooth", _write(tmp_path / "c.json", '"x"')])
        assert code == 2


class TestFormats:
    def test_manifest_round_trip(self):
        data = {"version": 1, "domains": NAMES3, "p_init": [0.2, 0.3, 0.5],
                "initial_ref_loss": {"a": 1.0, "b": 2.0, "c": 3.0}, "config": {"rho": 0.2}}
        m = RunManifest.from_dict(data)
        assert m.config == SchedulerConfig(rho=0.2)
        assert RunManifest.from_dict(m.to_dict()) == m

    @pytest.mark.parametrize("change, error", [
        ({"extra": 1}, InvalidInputError), ({"version": 2}, InvalidInputError),
        ({"p_init": [0.5, 0.5]}, DomainMismatchError), ({"config": {"rhoo": 1}}, InvalidInputError),
        ({"p_init": [1.0, 0.0, 0.0]}, InvalidInputError)])
    def test_manifest_rejects(self, change, error):
        data = {"version": 1, "domains": NAMES3, "p_init": [0.2, 0.3, 0.5], **change}
        with pytest.raises(error):
            RunManifest.from_dict(data)

    def test_loss_record_round_trip(self):
        ds = DomainSet(NAMES3)
        rec = parse_loss_record('{"step": 5, "losses": {"c": 0.1, "a": 1e-300, "b": 2.5}}', ds)
        assert rec.losses == (1e-300, 2.5, 0.1)
        assert parse_loss_record(render_loss_record(rec, ds), ds) == rec


def test_module_entry_point(tmp_path):
    pts = _write(tmp_path / "p.json", [[100, 2.0], [200, 1.9]])
    proc = subprocess.run([sys.executable, "-m", "robustmix", "fit", pts, "--horizon", "1000"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 5 and proc.stdout == ""

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from robustmix import (ARCHITECTURES, HardConcreteParams, InvalidInputError, MaskSet,
                       TargetConfig, hc_open_prob, hc_sample, lagrangian_penalty,
                       mask_similarity, select_mask, validate_target)

binary = st.lists(st.integers(0, 1), min_size=1, max_size=64)


def _mp_gate(u, log_alpha=0.0, temperature=2 / 3, gamma=-0.1, zeta=1.1, clip=True):
    mpmath.mp.dps = 50
    u = mpmath.mpf(u)
    logit = (mpmath.log(u) - mpmath.log(1 - u) + log_alpha) / mpmath.mpf(temperature)
    s = 1 / (1 + mpmath.exp(-logit))
    stretched = s * (mpmath.mpf(zeta) - mpmath.mpf(gamma)) + mpmath.mpf(gamma)
    return float(min(1, max(0, stretched)) if clip else stretched)


class TestLagrangian:
    def test_examples(self):
        assert lagrangian_penalty(5.0, 5.0, 3.0, 7.0) == 0.0
        assert lagrangian_penalty(4.0, 1.0, 1.0, 2.0) == 21.0
        assert lagrangian_penalty(1.0, 3.0, 0.5, 0.0) == -1.0

    @given(st.floats(-1e3, 1e3), st.floats(-10, 10), st.floats(-10, 10))
    def test_zero_on_target(self, t, lam, phi):
        assert lagrangian_penalty(t, t, lam, phi) == 0.0


class TestHardConcrete:
    def test_symmetry_point(self):
        assert hc_sample(HardConcreteParams(), 0.5) == pytest.approx(0.5, abs=1e-15)

    def test_lower_clip(self):
        assert hc_sample(HardConcreteParams(), 1e-9) == 0.0

    def test_upper_region_against_mpmath(self):
        # The default stretch interval (-0.1, 1.1) maps u = 0.9 above 1, so the gate clips.
        assert _mp_gate(0.9, clip=False) == pytest.approx(1.0571428, abs=1e-6)
        assert hc_sample(HardConcreteParams(), 0.9) == _mp_gate(0.9) == 1.0

    @pytest.mark.parametrize("u", [0.05, 0.2, 0.35, 0.6, 0.8])
    def test_interior_against_mpmath(self, u):
        for log_alpha in (-1.0, 0.0, 0.7):
            got = hc_sample(HardConcreteParams(log_alpha=log_alpha), u)
            assert got == pytest.approx(_mp_gate(u, log_alpha), abs=1e-14)

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.5, float("nan")])
    def test_u_outside_open_interval(self, u):
        with pytest.raises(InvalidInputError):
            hc_sample(HardConcreteParams(), u)

    def test_invalid_params(self):
        with pytest.raises(InvalidInputError):
            HardConcreteParams(temperature=0.0)
        with pytest.raises(InvalidInputError):
            HardConcreteParams(gamma=0.1)

    def test_open_prob_examples(self):
        assert hc_open_prob(HardConcreteParams()) == pytest.approx(0.8318, abs=1e-4)
        assert hc_open_prob(HardConcreteParams(log_alpha=40)) >= 1 - 1e-6
        assert hc_open_prob(HardConcreteParams(log_alpha=-40)) <= 1e-6

    def test_open_prob_small_monte_carlo(self):
        params = HardConcreteParams(log_alpha=0.3)
        u = np.random.default_rng(7).uniform(1e-12, 1 - 1e-12, 200_000)
        assert np.mean(hc_sample(params, u) > 0) == pytest.approx(hc_open_prob(params), abs=0.01)

    @given(st.floats(1e-6, 1 - 1e-6), st.floats(-8, 8), st.floats(0.05, 3))
    def test_range(self, u, log_alpha, temperature):
        g = hc_sample(HardConcreteParams(log_alpha=log_alpha, temperature=temperature), u)
        assert 0.0 <= g <= 1.0

    @given(st.floats(0.01, 0.99))
    def test_pair_symmetry_before_clipping(self, u):
        p = HardConcreteParams()
        s = [_mp_gate(v, clip=False) for v in (u, 1 - u)]
        assert s[0] + s[1] == pytest.approx(1.0, abs=1e-12)
        a, b = hc_sample(p, u), hc_sample(p, 1 - u)
        if 0 < a < 1 and 0 < b < 1:
            assert a + b == pytest.approx(1.0, abs=1e-12)


class TestSelectMask:
    def test_examples(self):
        assert select_mask([0.9, 0.1, 0.5, 0.7], 2).tolist() == [1, 0, 0, 1]
        assert select_mask([0.3] * 4, 2).tolist() == [1, 1, 0, 0]

    def test_head_quota_against_sorting_oracle(self, rng):
        scores = rng.normal(size=32)
        mask = select_mask(scores, 16)
        assert mask.sum() == 16
        oracle = sorted(range(32), key=lambda i: (-scores[i], i))[:16]
        assert set(np.flatnonzero(mask)) == set(oracle)

    def test_quota_too_large(self):
        with pytest.raises(InvalidInputError):
            select_mask([1, 2], 3)

    @given(st.lists(st.integers(-3, 3), min_size=0, max_size=40), st.data())
    def test_popcount_and_ties(self, scores, data):
        quota = data.draw(st.integers(0, len(scores)))
        mask = select_mask(np.array(scores, dtype=float), quota)
        assert mask.sum() == quota
        oracle = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:quota]
        assert set(np.flatnonzero(mask)) == set(oracle)


class TestMaskSimilarity:
    def test_examples(self):
        assert mask_similarity([1, 0, 1], [1, 0, 1]) == 1.0
        assert mask_similarity([1, 0, 1], [0, 1, 0]) == 0.0
        assert mask_similarity([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5

    def test_errors(self):
        with pytest.raises(InvalidInputError):
            mask_similarity([1, 0], [1, 0, 1])
        with pytest.raises(InvalidInputError):
            mask_similarity([1, 2], [1, 0])

    @given(binary, st.data())
    def test_properties(self, a, data):
        b = data.draw(st.lists(st.integers(0, 1), min_size=len(a), max_size=len(a)))
        a_arr, b_arr = np.array(a), np.array(b)
        assert mask_similarity(a, a) == 1.0
        assert mask_similarity(a, b) == mask_similarity(b, a)
        assert mask_similarity(a, 1 - a_arr) == 0.0
        assert mask_similarity(a, b) == pytest.approx(1.0 - np.sum(a_arr != b_arr) / len(a), abs=1e-15)


class TestTargets:
    @pytest.mark.parametrize("source, target", [
        ("llama2-7b", "pruned-2.7b"), ("llama2-7b", "pruned-1.3b"),
        ("llama2-7b", "pruned-0.5b"), ("qwen2-7b", "pruned-1.8b")])
    def test_paper_targets_valid(self, source, target):
        assert validate_target(ARCHITECTURES[source], ARCHITECTURES[target]) == []

    def test_table_values(self):
        t = ARCHITECTURES["pruned-2.7b"]
        assert (t.layers, t.hidden, t.intermediate, t.heads, t.head_dim) == (32, 2560, 6912, 20, 128)
        t = ARCHITECTURES["pruned-1.8b"]
        assert (t.layers, t.hidden, t.intermediate, t.heads, t.kv_heads) == (28, 1536, 8960, 14, 2)

    def test_oversized_target(self):
        big = TargetConfig(layers=24, hidden=8192, intermediate=5504, heads=16, head_dim=128)
        assert validate_target(ARCHITECTURES["llama2-7b"], big) == ["hidden exceeds source"]

    def test_all_violations_reported(self):
        src = ARCHITECTURES["qwen2-7b"]
        bad = TargetConfig(layers=30, hidden=1536, intermediate=8960, heads=15, head_dim=64, kv_heads=5)
        assert validate_target(src, bad) == [
            "layers exceeds source", "head_dim differs from source", "kv_heads exceeds source"]

    def test_kv_divisibility_invariant(self):
        with pytest.raises(InvalidInputError, match="divisible"):
            TargetConfig(layers=1, hidden=8, intermediate=8, heads=6, head_dim=4, kv_heads=4)

    def test_positive_fields(self):
        with pytest.raises(InvalidInputError):
            TargetConfig(layers=0, hidden=8, intermediate=8, heads=2, head_dim=4)

    def test_dict_round_trip(self):
        t = ARCHITECTURES["pruned-1.8b"]
        assert TargetConfig.from_dict(t.to_dict()) == t
        with pytest.raises(InvalidInputError, match="unknown"):
            TargetConfig.from_dict({**t.to_dict(), "experts": 8})


class TestMaskSet:
    def test_quotas_and_similarity(self, rng):
        target = ARCHITECTURES["pruned-1.3b"]
        scores = {"layer": rng.normal(size=32), "head": rng.normal(size=32)}
        a = MaskSet.from_scores(scores, target)
        assert a.masks["layer"].sum() == 24 and a.masks["head"].sum() == 16
        assert a.similarity(a) == {"layer": 1.0, "head": 1.0}

    def test_unknown_granularity(self):
        with pytest.raises(InvalidInputError):
            MaskSet.from_scores({"expert": [1.0]}, ARCHITECTURES["pruned-1.3b"])

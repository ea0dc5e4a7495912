"""Task vectors, trimming, sign election, and random sparsifiers."""

from __future__ import annotations

import numpy as np
import pytest

from geomerge.delta_ops import (
    SparsifySpec,
    dare_drop,
    della_drop,
    disjoint_merge,
    elect_signs,
    sparsify_stream,
    task_vector,
    trim_topk,
)
from oracles import trim_reference


class TestTaskVector:
    def test_simple_difference(self):
        np.testing.assert_array_equal(
            task_vector(np.array([2.0, 3.0]), np.array([1.0, 1.0])), [1.0, 2.0]
        )

    def test_expert_equals_base(self):
        v = np.array([0.5, -0.25, 7.0])
        np.testing.assert_array_equal(task_vector(v, v), np.zeros(3))

    def test_reconstruction_is_exact_in_f64(self):
        # f32-width inputs (the working precision) widened to f64: the
        # difference is computed exactly, so base + delta returns expert bitwise
        rng = np.random.default_rng(30)
        for _ in range(100):
            d = int(rng.integers(1, 200))
            base = rng.standard_normal(d).astype(np.float32)
            expert = rng.standard_normal(d).astype(np.float32)
            recovered = base.astype(np.float64) + task_vector(expert, base)
            np.testing.assert_array_equal(recovered, expert.astype(np.float64))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            task_vector(np.ones(3), np.ones(4))


class TestTrimTopk:
    def test_half_density_keeps_two_largest(self):
        out = trim_topk(np.array([0.1, -2.0, 0.5, 0.05]), 0.5)
        np.testing.assert_array_equal(out, [0.0, -2.0, 0.5, 0.0])

    def test_full_density_is_identity(self):
        v = np.array([1.0, -3.0, 0.0, 2.0])
        np.testing.assert_array_equal(trim_topk(v, 1.0), v)

    def test_tie_break_keeps_lower_index(self):
        out = trim_topk(np.array([1.0, -1.0, 1.0, -1.0]), 0.5)
        np.testing.assert_array_equal(out, [1.0, -1.0, 0.0, 0.0])

    def test_against_brute_force_reference(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            n = int(rng.integers(1, 50))
            vals = np.round(rng.standard_normal(n), 1)  # rounding forces ties
            density = float(rng.uniform(0.05, 1.0))
            expected = trim_reference(list(vals), density)
            np.testing.assert_array_equal(trim_topk(vals, density), expected)

    def test_nonzero_count_and_magnitude_split(self):
        rng = np.random.default_rng(32)
        for _ in range(50):
            n = int(rng.integers(2, 80))
            vals = rng.standard_normal(n)
            density = float(rng.uniform(0.1, 0.9))
            out = trim_topk(vals, density)
            k = int(np.ceil(density * n))
            assert np.count_nonzero(out) == k
            kept = np.abs(vals[out != 0])
            zeroed = np.abs(vals[out == 0])
            if kept.size and zeroed.size:
                assert kept.min() >= zeroed.max() - 1e-15

    def test_invalid_density(self):
        with pytest.raises(ValueError):
            trim_topk(np.ones(3), 0.0)


class TestElectSigns:
    def test_weighted_sum_decides(self):
        signs = elect_signs([np.array([1.0]), np.array([-3.0])], np.array([0.5, 0.5]))
        np.testing.assert_array_equal(signs, [-1.0])

    def test_agreeing_positive(self):
        signs = elect_signs([np.array([2.0]), np.array([2.0])], np.array([0.5, 0.5]))
        np.testing.assert_array_equal(signs, [1.0])

    def test_zero_sum_tie_breaks_positive(self):
        signs = elect_signs([np.array([1.0]), np.array([-1.0])], np.array([0.5, 0.5]))
        np.testing.assert_array_equal(signs, [1.0])


class TestDisjointMerge:
    def test_only_agreeing_model_counts(self):
        out = disjoint_merge(
            [np.array([3.0]), np.array([-1.0])], np.array([0.5, 0.5]), np.array([1.0])
        )
        np.testing.assert_array_equal(out, [3.0])

    def test_plain_mean_when_all_agree(self):
        out = disjoint_merge(
            [np.array([2.0]), np.array([4.0])], np.array([0.5, 0.5]), np.array([1.0])
        )
        np.testing.assert_array_equal(out, [3.0])

    def test_zero_when_no_model_agrees(self):
        out = disjoint_merge(
            [np.array([-2.0]), np.array([-4.0])], np.array([0.5, 0.5]), np.array([1.0])
        )
        np.testing.assert_array_equal(out, [0.0])

    def test_unequal_weights_renormalized_over_agreers(self):
        # models 0 and 2 agree with +1; their weights 0.2/0.5 renormalize to 2/7, 5/7
        out = disjoint_merge(
            [np.array([7.0]), np.array([-1.0]), np.array([14.0])],
            np.array([0.2, 0.3, 0.5]),
            np.array([1.0]),
        )
        np.testing.assert_allclose(out, [(0.2 * 7 + 0.5 * 14) / 0.7])

    def test_output_never_contradicts_elected_sign(self):
        rng = np.random.default_rng(33)
        for _ in range(100):
            m = int(rng.integers(2, 6))
            n = int(rng.integers(1, 40))
            deltas = [rng.standard_normal(n) for _ in range(m)]
            w = rng.uniform(0.1, 1.0, size=m)
            w = w / w.sum()
            signs = elect_signs(deltas, w)
            out = disjoint_merge(deltas, w, signs)
            nz = out != 0
            assert np.all(np.sign(out[nz]) == signs[nz])


class TestDareDrop:
    def test_zero_rate_is_identity(self):
        v = np.array([1.0, -2.0, 3.0])
        out = dare_drop(v, 0.0, sparsify_stream(0, "t", 0))
        np.testing.assert_array_equal(out, v)

    def test_zero_delta_stays_zero(self):
        out = dare_drop(np.zeros(16), 0.7, sparsify_stream(0, "t", 0))
        np.testing.assert_array_equal(out, np.zeros(16))

    def test_survivors_rescaled(self):
        v = np.ones(1000)
        out = dare_drop(v, 0.5, sparsify_stream(1, "t", 0))
        survivors = out[out != 0]
        np.testing.assert_allclose(survivors, 2.0)

    def test_same_key_bit_identical(self):
        v = np.random.default_rng(34).standard_normal(64)
        a = dare_drop(v, 0.4, sparsify_stream(7, "layer.w", 2))
        b = dare_drop(v, 0.4, sparsify_stream(7, "layer.w", 2))
        np.testing.assert_array_equal(a, b)

    def test_different_keys_differ(self):
        v = np.ones(64)
        a = dare_drop(v, 0.5, sparsify_stream(7, "layer.w", 0))
        b = dare_drop(v, 0.5, sparsify_stream(7, "layer.w", 1))
        c = dare_drop(v, 0.5, sparsify_stream(7, "layer.b", 0))
        d = dare_drop(v, 0.5, sparsify_stream(8, "layer.w", 0))
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_monte_carlo_unbiased(self):
        # deterministic streams; mean over trials must sit within 4 standard
        # errors of the input, per coordinate
        rng = np.random.default_rng(35)
        delta = rng.standard_normal(32)
        p = 0.5
        trials = 4000
        acc = np.zeros_like(delta)
        for s in range(trials):
            acc += dare_drop(delta, p, sparsify_stream(s, "mc", 0))
        mean = acc / trials
        se = np.abs(delta) * np.sqrt(p / (1 - p)) / np.sqrt(trials)
        assert np.all(np.abs(mean - delta) <= 4 * se + 1e-12)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            dare_drop(np.ones(3), 1.0, sparsify_stream(0, "t", 0))


class TestDellaDrop:
    def test_window_zero_reduces_to_dare_bitwise(self):
        rng = np.random.default_rng(36)
        v = rng.standard_normal(128)
        spec = SparsifySpec(drop_rate=0.3, window=0.0, seed=5)
        a = della_drop(v, spec, sparsify_stream(5, "t", 1))
        b = dare_drop(v, 0.3, sparsify_stream(5, "t", 1))
        np.testing.assert_array_equal(a, b)

    def test_drop_probabilities_at_band_endpoints(self):
        # two coordinates, drop 0.5, window 0.4: small magnitude drops at 0.9,
        # large at 0.1; observed survival rates must match 1-p
        v = np.array([1e-3, 1e3])
        spec = SparsifySpec(drop_rate=0.5, window=0.4)
        trials = 4000
        survived = np.zeros(2)
        for s in range(trials):
            out = della_drop(v, spec, sparsify_stream(s, "endpoints", 0))
            survived += out != 0
        rate = survived / trials
        assert abs(rate[0] - 0.1) < 0.02
        assert abs(rate[1] - 0.9) < 0.02

    def test_survivor_scaling_per_coordinate(self):
        v = np.array([1e-3, 1e3])
        spec = SparsifySpec(drop_rate=0.5, window=0.4)
        for s in range(200):
            out = della_drop(v, spec, sparsify_stream(s, "scale", 0))
            if out[0] != 0:
                np.testing.assert_allclose(out[0], v[0] / (1 - 0.9))
            if out[1] != 0:
                np.testing.assert_allclose(out[1], v[1] / (1 - 0.1))

    def test_monte_carlo_unbiased(self):
        rng = np.random.default_rng(37)
        delta = rng.standard_normal(32)
        spec = SparsifySpec(drop_rate=0.4, window=0.2)
        trials = 4000
        acc = np.zeros_like(delta)
        for s in range(trials):
            acc += della_drop(delta, spec, sparsify_stream(s, "mc2", 0))
        mean = acc / trials
        # loose per-coordinate bound: worst-case drop rate in the band
        se = np.abs(delta) * np.sqrt(0.6 / 0.4) / np.sqrt(trials)
        assert np.all(np.abs(mean - delta) <= 4 * se + 1e-12)

    def test_single_coordinate_uses_central_rate(self):
        spec = SparsifySpec(drop_rate=0.5, window=0.4)
        survived = 0
        trials = 2000
        for s in range(trials):
            out = della_drop(np.array([3.0]), spec, sparsify_stream(s, "one", 0))
            survived += out[0] != 0
        assert abs(survived / trials - 0.5) < 0.05


class TestSparsifySpec:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"density": 0.0},
            {"density": 1.5},
            {"drop_rate": 1.0},
            {"drop_rate": -0.1},
            {"drop_rate": 0.2, "window": 0.3},
            {"drop_rate": 0.6, "window": 0.5},
            {"window": -0.05},
        ],
    )
    def test_invalid_specs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            SparsifySpec(**kwargs)

    def test_defaults_valid(self):
        spec = SparsifySpec()
        assert spec.density == 0.5
        assert spec.drop_rate == 0.5
        assert spec.window == 0.1

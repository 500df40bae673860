"""Metrics, calibration, rank tests and comparison protocols against
brute-force and Monte-Carlo oracles."""

import itertools
import math

import mpmath as mp
import numpy as np
import pytest

from censura.evaluation import (
    CALIBRATION_GRID,
    CalibrationCurve,
    ablation_delta_nll,
    calibration_curve,
    compare_models,
    ence_bins,
    eval_ence,
    eval_mse,
    eval_nll,
    evaluate,
    inverse_normal_cdf,
    mann_whitney_u,
)
from censura.losses import BatchTargets
from censura.models import UncertainPrediction

mp.mp.dps = 30


def preds_of(mean, aleatoric=None, epistemic=None):
    return UncertainPrediction(mean=mean, aleatoric_variance=aleatoric,
                               epistemic_variance=epistemic)


class TestEvalMse:
    def test_perfect_observed(self):
        preds = preds_of([1.0, 2.0], aleatoric=[1.0, 1.0])
        assert eval_mse(preds, BatchTargets([1.0, 2.0], [0, 0])) == 0.0

    def test_correct_side_censored_contributes_zero(self):
        preds = preds_of([5.0], aleatoric=[1.0])
        assert eval_mse(preds, BatchTargets([6.0], [-1])) == 0.0

    def test_mixed_batch_matches_hand_sum(self):
        preds = preds_of([4.2, 5.0, 7.0, 3.0])
        targets = BatchTargets([5.0, 6.0, 6.0, 4.0], [0, -1, -1, 1])
        hand = (0.8**2 + 0.0 + 1.0 + 1.0) / 4.0
        assert eval_mse(preds, targets) == pytest.approx(hand, abs=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            eval_mse(preds_of(np.array([])),
                     BatchTargets(np.array([]), np.array([], dtype=int)))


class TestEvalNll:
    def test_zero_residual_unit_variance(self):
        preds = preds_of([3.0], aleatoric=[1.0])
        value = eval_nll(preds, BatchTargets([3.0], [0]), "aleatoric")
        assert value == pytest.approx(0.9189385332046727, abs=1e-12)

    def test_left_censored_at_mean(self):
        preds = preds_of([3.0], aleatoric=[2.5])
        value = eval_nll(preds, BatchTargets([3.0], [-1]), "aleatoric")
        assert value == pytest.approx(math.log(2.0), abs=1e-12)

    def test_batch_equals_mean_of_per_point_oracle(self):
        rng = np.random.default_rng(8)
        n = 50
        mean = rng.normal(size=n)
        var = rng.uniform(0.3, 2.0, size=n)
        labels = mean + rng.normal(size=n)
        masks = rng.integers(-1, 2, size=n)
        preds = preds_of(mean, aleatoric=var)
        value = eval_nll(preds, BatchTargets(labels, masks), "aleatoric")

        def point(i):
            mu, v, y, m = mean[i], var[i], labels[i], masks[i]
            t = (y - mu) / math.sqrt(v)
            if m == 0:
                return 0.5 * math.log(2 * math.pi * v) + t * t / 2
            cdf = mp.mpf(1) / 2 * mp.erfc(-mp.mpf(t) / mp.sqrt(2))
            return float(-mp.log(cdf if m == -1 else 1 - cdf))

        oracle = sum(point(i) for i in range(n)) / n
        assert value == pytest.approx(oracle, abs=1e-12)

    def test_epistemic_channel_floored(self):
        preds = preds_of([0.0], epistemic=[0.0])
        value = eval_nll(preds, BatchTargets([0.0], [0]), "epistemic")
        expected = 0.5 * math.log(2 * math.pi * 1e-6)
        assert value == pytest.approx(expected, abs=1e-12)

    def test_missing_channel_raises(self):
        preds = preds_of([0.0], aleatoric=[1.0])
        with pytest.raises(ValueError, match="epistemic"):
            eval_nll(preds, BatchTargets([0.0], [0]), "epistemic")


class TestEvalEnce:
    def test_single_bin_matched(self):
        # rmse == rmv == 1
        preds = preds_of([0.0, 0.0], aleatoric=[1.0, 1.0])
        targets = BatchTargets([1.0, -1.0], [0, 0])
        assert eval_ence(preds, targets, "aleatoric", n_bins=1) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_two_bin_hand_example(self):
        # ascending variance: bin1 (rmse 2, rmv 1), bin2 (rmse 1, rmv 2)
        preds = preds_of([0.0, 0.0], aleatoric=[1.0, 4.0])
        targets = BatchTargets([2.0, 1.0], [0, 0])
        value = eval_ence(preds, targets, "aleatoric", n_bins=2)
        assert value == pytest.approx(0.75, abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(9)
        n = 40
        mean = rng.normal(size=n)
        var = rng.uniform(0.2, 2.0, size=n)
        labels = mean + rng.normal(size=n)
        targets = BatchTargets(labels, np.zeros(n, dtype=int))
        base = eval_ence(preds_of(mean, aleatoric=var), targets, "aleatoric", 5)
        perm = rng.permutation(n)
        shuffled = eval_ence(
            preds_of(mean[perm], aleatoric=var[perm]),
            BatchTargets(labels[perm], np.zeros(n, dtype=int)),
            "aleatoric", 5,
        )
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_remainder_spread_over_first_bins(self):
        preds = preds_of(np.zeros(7), aleatoric=np.arange(1.0, 8.0))
        targets = BatchTargets(np.zeros(7), np.zeros(7, dtype=int))
        rmse, rmv = ence_bins(preds, targets, "aleatoric", n_bins=3)
        # 7 = 3 + 2 + 2
        np.testing.assert_allclose(
            rmv,
            [math.sqrt(2.0), math.sqrt(4.5), math.sqrt(6.5)],
        )

    def test_bin_count_bounds(self):
        preds = preds_of([0.0], aleatoric=[1.0])
        targets = BatchTargets([0.0], [0])
        with pytest.raises(ValueError):
            eval_ence(preds, targets, "aleatoric", n_bins=2)


class TestCalibrationCurve:
    def test_zero_width_interval_counts_exact_hits(self):
        # one exact observed hit, one correctly-sided censored point, one miss
        preds = preds_of([1.0, 5.0, 0.0], aleatoric=[1.0, 1.0, 1.0])
        targets = BatchTargets([1.0, 6.0, 2.0], [0, -1, 0])
        curve = calibration_curve(preds, targets, "aleatoric", grid=[0.0])
        assert curve.observed_fractions[0] == pytest.approx(2.0 / 3.0)

    def test_full_interval_captures_everything(self):
        preds = preds_of([0.0, 0.0], aleatoric=[1.0, 1.0])
        targets = BatchTargets([50.0, -50.0], [0, 0])
        curve = calibration_curve(preds, targets, "aleatoric", grid=[1.0])
        assert curve.observed_fractions[0] == 1.0

    def test_standard_normal_monte_carlo(self):
        rng = np.random.default_rng(10)
        n = 100_000
        residuals = rng.standard_normal(n)
        preds = preds_of(np.zeros(n), aleatoric=np.ones(n))
        targets = BatchTargets(residuals, np.zeros(n, dtype=int))
        curve = calibration_curve(preds, targets, "aleatoric")
        assert curve.max_deviation() < 0.01

    def test_observed_fractions_nondecreasing(self):
        rng = np.random.default_rng(11)
        n = 500
        preds = preds_of(rng.normal(size=n),
                         aleatoric=rng.uniform(0.1, 2.0, size=n))
        targets = BatchTargets(rng.normal(size=n), rng.integers(-1, 2, size=n))
        curve = calibration_curve(preds, targets, "aleatoric")
        assert np.all(np.diff(curve.observed_fractions) >= 0)

    def test_default_grid(self):
        np.testing.assert_allclose(CALIBRATION_GRID[:3], [0.0, 0.05, 0.1])
        assert CALIBRATION_GRID.size == 21

    def test_empty_grid_rejected(self):
        preds = preds_of([0.0], aleatoric=[1.0])
        with pytest.raises(ValueError):
            calibration_curve(preds, BatchTargets([0.0], [0]), "aleatoric",
                              grid=[])

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            CalibrationCurve(expected_fractions=[0.5], observed_fractions=[1.5])


class TestInverseNormalCdf:
    def test_median(self):
        assert inverse_normal_cdf(0.5) == 0.0

    def test_erf_oracle_value(self):
        assert inverse_normal_cdf(0.975) == pytest.approx(
            1.9599639845400542, abs=1e-9
        )

    def test_roundtrip_identity(self):
        from censura.numerics import GaussianParams, gauss_cdf

        std = GaussianParams(mean=0.0, variance=1.0)
        grid = np.linspace(1e-6, 1 - 1e-6, 501)
        back = np.array([gauss_cdf(inverse_normal_cdf(p), std) for p in grid])
        np.testing.assert_allclose(back, grid, atol=1e-9)

    def test_domain_enforced(self):
        for bad in (0.0, 1.0, -0.5, 2.0):
            with pytest.raises(ValueError):
                inverse_normal_cdf(bad)


def permutation_oracle(a, b, u_obs):
    """Independent exact tail probabilities via pairwise-count enumeration."""
    pooled = np.concatenate([a, b])
    n = pooled.size
    n_a = len(a)
    at_most = at_least = total = 0
    for idx in itertools.combinations(range(n), n_a):
        mask = np.zeros(n, dtype=bool)
        mask[list(idx)] = True
        aa, bb = pooled[mask], pooled[~mask]
        u = sum(1 for x in aa for y in bb if x > y)
        total += 1
        at_most += u <= u_obs
        at_least += u >= u_obs
    return at_most / total, at_least / total


class TestMannWhitneyU:
    def test_textbook_one_sided(self):
        u, p = mann_whitney_u([1.0, 2.0], [3.0, 4.0], alternative="less")
        assert u == 0.0
        assert p == pytest.approx(1.0 / 6.0, abs=1e-15)

    def test_identical_samples_two_sided(self):
        _, p = mann_whitney_u([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert p == 1.0

    def test_u_complement_identity(self):
        rng = np.random.default_rng(12)
        a = rng.normal(size=6)
        b = rng.normal(size=9)
        u_a, _ = mann_whitney_u(a, b)
        u_b, _ = mann_whitney_u(b, a)
        assert u_a + u_b == pytest.approx(6 * 9, abs=1e-12)

    def test_exact_matches_permutation_oracle(self):
        rng = np.random.default_rng(13)
        for n_a in range(1, 5):
            for n_b in range(1, 5):
                a = rng.normal(size=n_a)
                b = rng.normal(size=n_b)
                u, p_less = mann_whitney_u(a, b, alternative="less")
                _, p_greater = mann_whitney_u(a, b, alternative="greater")
                o_less, o_greater = permutation_oracle(a, b, u)
                assert p_less == pytest.approx(o_less, abs=1e-12)
                assert p_greater == pytest.approx(o_greater, abs=1e-12)

    def test_large_samples_use_normal_approximation(self):
        rng = np.random.default_rng(14)
        a = rng.normal(size=40)
        b = rng.normal(size=40) + 2.0
        _, p = mann_whitney_u(a, b, alternative="less")
        assert p < 1e-6
        _, p_two = mann_whitney_u(a, b)
        assert p_two < 1e-5

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError):
            mann_whitney_u([], [1.0])

    def test_unknown_alternative(self):
        with pytest.raises(ValueError):
            mann_whitney_u([1.0], [2.0], alternative="sideways")


class TestAblationDeltaNll:
    def test_identical_scores_inconclusive(self):
        scores = list(np.linspace(0.0, 1.0, 10))
        delta, _, verdict = ablation_delta_nll(scores, scores)
        assert delta == 0.0 and verdict == "inconclusive"

    def test_uniform_shift_censored_better(self):
        cen = np.linspace(0.0, 0.09, 10)
        obs = cen + 1.0
        delta, p, verdict = ablation_delta_nll(obs, cen)
        assert delta == pytest.approx(1.0)
        assert p < 0.05 and verdict == "censored_better"

    def test_sign_flip_observed_better(self):
        cen = np.linspace(0.0, 0.09, 10) + 1.0
        obs = np.linspace(0.0, 0.09, 10)
        delta, p, verdict = ablation_delta_nll(obs, cen)
        assert delta == pytest.approx(-1.0)
        assert p < 0.05 and verdict == "observed_better"

    def test_needs_two_repeats(self):
        with pytest.raises(ValueError):
            ablation_delta_nll([1.0], [2.0])


class TestCompareModels:
    def test_single_model_starred(self):
        rows = compare_models({"only": [1.0, 2.0]})
        assert rows[0]["starred"] is True

    def test_disjoint_ranges_only_best_starred(self):
        rng = np.random.default_rng(15)
        good = rng.uniform(0.0, 0.1, size=10)
        bad = rng.uniform(1.0, 1.1, size=10)
        rows = compare_models({"good": list(good), "bad": list(bad)})
        by_name = {r["model"]: r for r in rows}
        assert by_name["good"]["starred"] is True
        assert by_name["bad"]["starred"] is False
        assert rows[0]["model"] == "good"

    def test_identical_models_both_starred(self):
        scores = list(np.linspace(0.0, 1.0, 10))
        rows = compare_models({"a": scores, "b": scores})
        assert all(r["starred"] for r in rows)

    def test_higher_is_better_direction(self):
        rows = compare_models(
            {"lo": [0.1, 0.2, 0.15, 0.12], "hi": [0.9, 0.8, 0.85, 0.95]},
            lower_is_better=False,
        )
        assert rows[0]["model"] == "hi"
        by_name = {r["model"]: r for r in rows}
        assert by_name["hi"]["starred"] and not by_name["lo"]["starred"]


class TestEvaluateReport:
    def test_counts_and_fields(self):
        rng = np.random.default_rng(16)
        n = 64
        mean = rng.normal(size=n)
        preds = preds_of(mean, aleatoric=rng.uniform(0.5, 1.5, size=n))
        masks = np.zeros(n, dtype=int)
        masks[:10] = -1
        targets = BatchTargets(mean + rng.normal(size=n), masks)
        report = evaluate(preds, targets, "aleatoric", n_bins=4)
        assert report.n_points == n and report.n_censored == 10
        assert report.variance_source == "aleatoric"
        doc = report.to_dict()
        assert set(doc) >= {"mse", "nll", "ence", "calibration", "n_points"}

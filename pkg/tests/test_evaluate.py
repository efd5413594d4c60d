import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scanpipe.errors import AggregationError, CalibrationError, UndefinedMetricError
from scanpipe.evaluate import (
    ConfusionCounts,
    aggregate_scan,
    bootstrap_ci,
    calibrate_threshold,
    confusion_metrics,
    evaluate_predictions,
    fleiss_kappa,
    percent,
    plot_roc,
    roc_auc,
    threshold_candidates,
    write_roc_csv,
)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    won = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return won / (len(pos) * len(neg))


def sweep_gap(scores, labels):
    """Smallest |sens - spec| over every midpoint, by direct counting."""
    s = sorted(set(scores))
    best = None
    for a, b in zip(s, s[1:]):
        t = (a + b) / 2
        tp = sum(1 for x, y in zip(scores, labels) if y == 1 and x > t)
        tn = sum(1 for x, y in zip(scores, labels) if y == 0 and x <= t)
        gap = abs(Fraction(tp, labels.count(1)) - Fraction(tn, labels.count(0)))
        best = gap if best is None else min(best, gap)
    return best


def counts_to_arrays(tp, fn, tn, fp):
    probs = [0.9] * tp + [0.1] * fn + [0.1] * tn + [0.9] * fp
    labels = [1] * (tp + fn) + [0] * (tn + fp)
    return probs, labels


scored = st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=200).filter(
    lambda xs: len({y for _, y in xs}) == 2
)


class TestAggregate:
    def test_view_mean(self):
        r = aggregate_scan({"axial": [0.2, 0.6], "sagittal": [0.5], "coronal": [0.5]})
        assert r.view_probs["axial"] == pytest.approx(0.4)

    def test_ensemble_of_three(self):
        r = aggregate_scan({"axial": [0.9], "sagittal": [0.6], "coronal": [0.3]})
        assert r.ensemble == pytest.approx(0.6) and not r.missing_view

    def test_missing_view(self):
        with pytest.warns(UserWarning, match="missing"):
            r = aggregate_scan({"axial": [0.7]}, "S1")
        assert r.ensemble == 0.7 and r.missing_view and set(r.missing_views) == {"sagittal", "coronal"}

    @pytest.mark.parametrize("bad", [{}, {"axial": []}, {"axial": [1.2]}])
    def test_errors(self, bad):
        with pytest.raises(AggregationError):
            aggregate_scan(bad)

    @given(st.dictionaries(st.sampled_from(["axial", "sagittal", "coronal"]),
                           st.lists(st.floats(0, 1), min_size=1, max_size=3), min_size=1))
    def test_ensemble_bounds(self, probs):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            r = aggregate_scan(probs)
        vp = list(r.view_probs.values())
        assert min(vp) - 1e-12 <= r.ensemble <= max(vp) + 1e-12


class TestConfusion:
    @pytest.mark.parametrize(
        "counts,acc,sens,spec",
        [
            ((16, 1, 25, 4), "89.13% (41/46)", "94.12%", "86.21%"),
            ((5, 1, 59, 6), "90.14% (64/71)", "83.33%", "90.77%"),
            ((2, 0, 8, 2), "83.33% (10/12)", "100.00%", "80.00%"),
        ],
    )
    def test_reference_rows(self, counts, acc, sens, spec):
        c = confusion_metrics(*counts_to_arrays(*counts), threshold=0.5)
        assert (c.tp, c.fn, c.tn, c.fp) == counts
        a = c.accuracy
        assert f"{percent(a)} ({c.tp + c.tn}/{c.n})" == acc
        assert percent(c.sensitivity) == sens and percent(c.specificity) == spec

    def test_strict_rule(self):
        c = confusion_metrics([0.5, 0.5], [1, 0], 0.5)
        assert (c.tp, c.fn, c.tn, c.fp) == (0, 1, 1, 0)

    def test_arithmetic(self):
        c = ConfusionCounts(3, 1, 5, 2)
        assert c.accuracy == Fraction(8, 11) and c.sensitivity == Fraction(3, 4) and c.specificity == Fraction(5, 7)

    @settings(max_examples=50)
    @given(xs=scored, t1=st.floats(0, 1), t2=st.floats(0, 1))
    def test_threshold_monotone(self, xs, t1, t2):
        s, y = zip(*xs)
        lo, hi = sorted((t1, t2))
        a, b = confusion_metrics(s, y, lo), confusion_metrics(s, y, hi)
        assert b.sensitivity <= a.sensitivity and b.specificity >= a.specificity


class TestAUC:
    def test_perfect(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_example(self):
        assert roc_auc([0.35, 0.8, 0.1, 0.4], [1, 1, 0, 0]) == 0.75

    def test_all_equal(self):
        assert roc_auc([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            roc_auc([0.1, 0.2], [1, 1])

    @settings(max_examples=100)
    @given(xs=scored)
    def test_matches_pairwise(self, xs):
        s, y = zip(*xs)
        assert abs(roc_auc(s, y) - pairwise_auc(s, y)) <= 1e-12

    @settings(max_examples=50)
    @given(xs=st.lists(st.tuples(st.integers(0, 1000), st.integers(0, 1)), min_size=2, max_size=200).filter(
        lambda xs: len({y for _, y in xs}) == 2))
    def test_monotone_transform(self, xs):
        # scores on a coarse grid so the transform stays strictly increasing in float arithmetic
        s, y = zip(*xs)
        s = np.asarray(s) / 1000
        t = np.exp(3 * np.asarray(s)) + 7
        assert roc_auc(t, y) == pytest.approx(roc_auc(s, y), abs=1e-12)


class TestCalibration:
    def test_example(self):
        preds = [(0.9, 1), (0.6, 1), (0.4, 0), (0.7, 0)]
        t = calibrate_threshold(preds)
        assert t == pytest.approx(0.65)
        c = confusion_metrics([p for p, _ in preds], [y for _, y in preds], t)
        assert c.sensitivity == c.specificity == Fraction(1, 2)

    def test_separated(self):
        preds = [(0.1, 0), (0.2, 0), (0.7, 1), (0.8, 1)]
        t = calibrate_threshold(preds)
        assert t == pytest.approx(0.45)
        c = confusion_metrics([p for p, _ in preds], [y for _, y in preds], t)
        assert c.sensitivity == c.specificity == 1

    def test_single_class(self):
        with pytest.raises(CalibrationError):
            calibrate_threshold([(0.2, 1), (0.4, 1)])

    def test_identical_scores(self):
        with pytest.raises(CalibrationError):
            calibrate_threshold([(0.2, 1), (0.2, 0)])

    def test_tie_prefers_sensitivity(self):
        # t=0.25 gives sens 1, spec 1/2; t=0.55 gives sens 0, spec 1/2: equal gaps
        preds = [(0.1, 0), (0.4, 1), (0.7, 0)]
        t = calibrate_threshold(preds)
        assert t == pytest.approx(0.25)
        c = confusion_metrics([p for p, _ in preds], [y for _, y in preds], t)
        assert c.sensitivity == 1

    @settings(max_examples=100)
    @given(xs=scored)
    def test_sweep_optimal(self, xs):
        s, y = zip(*xs)
        if len(set(s)) < 2:
            return
        t = calibrate_threshold(xs)
        assert t in set(threshold_candidates(s))
        c = confusion_metrics(s, y, t)
        assert abs(c.sensitivity - c.specificity) == sweep_gap(list(s), list(y))


class TestBootstrap:
    def test_constant_metric_zero_width(self):
        b = bootstrap_ci([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], threshold=0.5, iterations=200)
        for name in ("auc", "accuracy", "sensitivity", "specificity"):
            assert b.ci[name] == (1.0, 1.0)

    def test_iterations_recorded_and_deterministic(self, rng):
        s = rng.random(40)
        y = (rng.random(40) < 0.3).astype(int)
        y[:2] = [0, 1]
        a = bootstrap_ci(s, y, 0.5, iterations=1000, seed=3)
        b = bootstrap_ci(s, y, 0.5, iterations=1000, seed=3, workers=3)
        assert a.iterations == 1000 and a.to_dict() == b.to_dict()
        assert a.redraws == 0

    @settings(max_examples=20, deadline=None)
    @given(xs=scored.filter(lambda xs: len(xs) >= 6), t=st.floats(0.05, 0.95))
    def test_ci_contains_point(self, xs, t):
        s, y = zip(*xs)
        b = bootstrap_ci(s, y, t, iterations=200, seed=0)
        for name, (lo, hi) in b.ci.items():
            assert lo - 1e-12 <= b.point[name] <= hi + 1e-12 or name == "auc"
        assert b.ci["auc"][0] <= b.ci["auc"][1]

    def test_stratified_keeps_class_counts(self):
        b = bootstrap_ci([0.3, 0.6, 0.2, 0.1, 0.7], [1, 0, 0, 0, 0], 0.5, iterations=50)
        assert b.redraws == 0 and len(b.roc_tpr_low) == len(b.roc_fpr) == 101


class TestKappa:
    def test_complete_agreement(self):
        assert fleiss_kappa([[3, 0, 0, 0], [0, 3, 0, 0], [0, 0, 0, 3], [3, 0, 0, 0]]) == 1.0

    def test_three_raters_four_subjects(self):
        assert abs(fleiss_kappa([[3, 0], [0, 3], [2, 1], [1, 2]]) - 1 / 3) <= 1e-12

    def test_undefined(self):
        with pytest.raises(UndefinedMetricError):
            fleiss_kappa([[4, 0], [4, 0], [4, 0]])

    def test_row_sums_checked(self):
        with pytest.raises(ValueError):
            fleiss_kappa([[3, 0], [1, 1]])


class TestReport:
    def test_report_and_outputs(self, tmp_path):
        s = [0.1, 0.3, 0.35, 0.8, 0.9, 0.2]
        y = [0, 0, 1, 1, 1, 0]
        r = evaluate_predictions(s, y, 0.32, iterations=100)
        d = r.to_dict()
        assert d["counts"] == {"tp": 3, "fn": 0, "tn": 3, "fp": 0} and d["accuracy_fraction"] == "1/1"
        assert d["bootstrap"]["iterations"] == 100
        csv_text = write_roc_csv(s, y, tmp_path / "roc.csv").read_text().splitlines()
        assert csv_text[0] == "threshold,fpr,tpr" and len(csv_text) > 2
        assert plot_roc({"ensemble": (s, y)}, tmp_path / "roc.png").stat().st_size > 0

    def test_single_class_report_has_no_auc(self):
        r = evaluate_predictions([0.2, 0.8], [0, 0], 0.5, iterations=10)
        assert np.isnan(r.auc) and r.bootstrap is None and r.specificity == Fraction(1, 2)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driversa import evaluation
from driversa.evaluation import (CvReport, feature_effect_report,
                                 fold_assignment, grouped_fold_assignment,
                                 kfold_cv, metrics, pearson, spearman,
                                 spearman_with_p, write_effect_reports)
from driversa.gbdt import TrainParams
from driversa.timebase import is_missing

from oracles import naive_mae, naive_pearson, naive_rmse, naive_spearman

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


class TestMetrics:
    def test_spearman_frozen_example(self):
        # one swapped adjacent pair among four: 1 - 6*2/(4*15) = 0.8 exactly
        assert spearman([1, 3, 2, 4], [1, 2, 3, 4]) == 0.8

    def test_rmse_mae_hand_values(self):
        rmse, mae, corr = metrics([0.0, 0.0, 0.0, 0.0], [1.0, -1.0, 1.0, -1.0])
        assert rmse == 1.0 and mae == 1.0
        assert is_missing(corr)  # constant y has no correlation

    def test_pearson_perfect_and_inverse(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(37)
        for _ in range(300):
            n = int(rng.integers(2, 200))
            y = rng.normal(size=n) * rng.uniform(0.1, 50)
            yhat = y + rng.normal(size=n)
            rmse, mae, corr = metrics(y, yhat)
            assert rmse == pytest.approx(naive_rmse(y, yhat), abs=1e-12)
            assert mae == pytest.approx(naive_mae(y, yhat), abs=1e-12)
            assert corr == pytest.approx(naive_pearson(y, yhat), abs=1e-12)

    def test_spearman_matches_direct_summation_with_ties(self):
        rng = np.random.default_rng(41)
        for _ in range(300):
            n = int(rng.integers(2, 100))
            x = rng.integers(0, 12, size=n).astype(float)  # many ties
            y = rng.normal(size=n)
            if np.ptp(x) == 0:
                continue
            assert spearman(x, y) == pytest.approx(naive_spearman(x, y),
                                                   abs=1e-12)

    @given(st.lists(st.tuples(finite, finite), min_size=2, max_size=50))
    @settings(max_examples=150, deadline=None)
    def test_pearson_property(self, pairs):
        # boundedness and the missing-on-constant contract; exact agreement
        # with the naive formula is checked on well-conditioned inputs in
        # test_matches_direct_summation (arbitrary inputs can cancel
        # catastrophically in any formulation)
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        r = pearson(a, b)
        if is_missing(r):
            # constant input, or variance underflowing to zero in float
            assert (np.sum((a - a.mean()) ** 2) == 0
                    or np.sum((b - b.mean()) ** 2) == 0)
        else:
            assert -1.0 - 1e-6 <= r <= 1.0 + 1e-6

    def test_spearman_p_value(self):
        rho, p = spearman_with_p([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
        assert rho == 1.0 and p == 0.0
        rng = np.random.default_rng(5)
        x = rng.normal(size=30)
        rho, p = spearman_with_p(x, rng.normal(size=30))
        assert 0.0 <= p <= 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            metrics([], [])
        with pytest.raises(ValueError):
            spearman([1.0], [2.0])


class TestFolds:
    def test_sizes_differ_by_at_most_one(self):
        folds = fold_assignment(105, 10, seed=0)
        counts = np.bincount(folds, minlength=10)
        assert counts.min() >= 10 and counts.max() <= 11
        assert counts.sum() == 105

    def test_deterministic_and_seed_sensitive(self):
        assert np.array_equal(fold_assignment(50, 5, 1), fold_assignment(50, 5, 1))
        assert not np.array_equal(fold_assignment(50, 5, 1),
                                  fold_assignment(50, 5, 2))

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            fold_assignment(5, 10, 0)

    def test_grouped_folds_keep_groups_together(self):
        groups = np.repeat([f"p{i}" for i in range(12)], 4)
        folds = grouped_fold_assignment(groups, 4, seed=0)
        for g in np.unique(groups):
            assert len(np.unique(folds[groups == g])) == 1
        assert np.bincount(folds).tolist() == [12, 12, 12, 12]

    def test_grouped_folds_need_enough_groups(self):
        with pytest.raises(ValueError):
            grouped_fold_assignment(["a", "b"], 3, 0)


class TestKfoldCv:
    def params(self):
        return TrainParams(min_data_in_leaf=5, max_rounds=30,
                           early_stopping_rounds=10)

    def test_report_contents(self, small_run):
        ds = small_run["dataset"]
        report = kfold_cv(ds, self.params(), k=4, seed=0)
        assert report.k == 4
        assert len(report.fold_metrics) == 4
        assert len(report.oof_pred) == len(ds)
        assert set(np.unique(report.folds)) == {0, 1, 2, 3}
        pooled_rmse, _, _ = metrics(ds.labels(), report.oof_pred)
        assert report.pooled["rmse"] == pytest.approx(pooled_rmse)

    def test_grouped_cv_isolates_participants(self, small_run):
        ds = small_run["dataset"]
        report = kfold_cv(ds, self.params(), k=4, seed=0,
                          group_by_participant=True)
        pids = ds.frame["participant_id"].to_numpy()
        for p in np.unique(pids):
            assert len(np.unique(report.folds[pids == p])) == 1

    def test_thread_count_does_not_change_results(self, small_run, monkeypatch):
        ds = small_run["dataset"]
        serial = kfold_cv(ds, self.params(), k=4, seed=0, threads=1)
        # this container exposes a single CPU; force the pool path
        monkeypatch.setattr(evaluation.os, "cpu_count", lambda: 4)
        pooled = kfold_cv(ds, self.params(), k=4, seed=0, threads=4)
        assert np.array_equal(serial.oof_pred, pooled.oof_pred)
        assert serial.fold_metrics == pooled.fold_metrics

    def test_report_round_trip(self, small_run, tmp_path):
        report = kfold_cv(small_run["dataset"], self.params(), k=4, seed=0)
        report.save(tmp_path / "cv.json")
        back = CvReport.load(tmp_path / "cv.json")
        assert np.array_equal(back.oof_pred, report.oof_pred)
        assert np.array_equal(back.folds, report.folds)
        assert back.params == report.params
        assert back.pooled == report.pooled


class TestEffectReport:
    def test_monotone_effect_has_positive_rho(self, small_run, tmp_path):
        ds = small_run["dataset"]
        X, names, _ = ds.design_matrix()
        shap = np.zeros_like(X)
        j = names.index("mean_HR")
        shap[:, j] = 0.01 * X[:, j]  # perfectly increasing effect
        effects = feature_effect_report(shap, ds, names)
        assert effects["mean_HR"]["spearman_rho"] == pytest.approx(1.0)
        assert effects["mean_HR"]["spearman_p"] == 0.0
        assert is_missing(effects["age"]["spearman_rho"])  # zero shap
        seg = effects["mean_HR"]["segments"]
        assert sum(s["n"] for s in seg) == len(ds)
        write_effect_reports(effects, tmp_path / "effects")
        assert (tmp_path / "effects" / "mean_HR.csv").exists()

    def test_shape_mismatch_rejected(self, small_run):
        ds = small_run["dataset"]
        with pytest.raises(ValueError, match="shape"):
            feature_effect_report(np.zeros((3, 2)), ds, None)

import json
import math

import numpy as np
import pytest

from driversa import gbdt
from driversa.gbdt import (BinnedMatrix, Ensemble, TrainParams, bin_features,
                           find_best_split, goss_sample, predict, train)

from oracles import exhaustive_best_split, split_partition_gain


def candidate_left_mask(cand, X):
    """Row mask routed left by a SplitCandidate, mirroring prediction."""
    col = X[:, cand.feature]
    miss = ~np.isfinite(col)
    if cand.categories_left:
        base = np.isin(col, cand.categories_left) & ~miss
    else:
        base = (col <= cand.threshold) & ~miss
    if cand.missing_left:
        base = base | miss
    return base


def random_split_problem(rng):
    """Random numeric split-search problem with lossless binning.

    Numeric only: the exhaustive-subset oracle is a valid reference for the
    sorted-prefix categorical scan only in the unregularized case, which
    gets its own dedicated test.
    """
    n = int(rng.integers(10, 200))
    n_feat = int(rng.integers(1, 4))
    kinds = []
    cols = []
    for f in range(n_feat):
        kinds.append("numeric")
        # small value grid so quantile binning is lossless
        col = rng.integers(0, 12, size=n).astype(float) / 3.0
        if rng.random() < 0.5:
            col[rng.random(n) < 0.2] = math.nan
        cols.append(col)
    X = np.column_stack(cols)
    grad = rng.normal(size=n)
    hess = np.ones(n) if rng.random() < 0.5 else rng.uniform(0.5, 2.0, size=n)
    min_data = int(rng.integers(1, 6))
    lam = float(rng.choice([0.0, 0.5]))
    return X, kinds, grad, hess, min_data, lam


class TestParams:
    def test_defaults(self):
        p = TrainParams()
        assert (p.learning_rate, p.min_data_in_leaf, p.num_leaves) == (0.05, 20, 50)
        assert (p.early_stopping_rounds, p.max_rounds, p.max_bin) == (100, 1000, 255)

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainParams(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainParams(num_leaves=1)
        with pytest.raises(ValueError):
            TrainParams(goss=(0.7, 0.6))

    def test_json_round_trip(self):
        p = TrainParams(goss=(0.2, 0.1), seed=5)
        assert TrainParams.from_json(p.to_json()) == p


class TestBinning:
    def test_few_distinct_values_bin_exactly(self):
        X = np.array([[3.0], [1.0], [2.0], [1.0], [3.0]])
        b = bin_features(X, ["numeric"], max_bin=255)
        assert b.bin_upper[0].tolist() == [1.0, 2.0, 3.0]
        assert b.codes[:, 0].tolist() == [2, 0, 1, 0, 2]
        assert b.n_bins[0] == 3

    def test_missing_gets_reserved_bin(self):
        X = np.array([[1.0], [math.nan], [2.0]])
        b = bin_features(X, ["numeric"])
        assert b.codes[:, 0].tolist() == [0, 2, 1]

    def test_many_values_respect_max_bin(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(5000, 1))
        b = bin_features(X, ["numeric"], max_bin=16)
        assert b.n_bins[0] <= 16
        assert b.codes[:, 0].max() == b.n_bins[0] - 1
        # bins are value-ordered: larger value never gets a smaller bin
        order = np.argsort(X[:, 0])
        assert np.all(np.diff(b.codes[order, 0]) >= 0)

    def test_categorical_codes(self):
        X = np.array([[0.0], [3.0], [math.nan], [1.0]])
        b = bin_features(X, ["categorical"])
        assert b.is_cat[0] == 1
        assert b.n_bins[0] == 4
        assert b.codes[:, 0].tolist() == [0, 3, 4, 1]

    def test_categorical_rejects_non_integer(self):
        with pytest.raises(ValueError, match="categorical"):
            bin_features(np.array([[0.5]]), ["categorical"])
        with pytest.raises(ValueError, match="categorical"):
            bin_features(np.array([[-1.0]]), ["categorical"])


class TestSplitSearch:
    def test_hand_computed_split(self):
        # grads -1 on values 1..4, +1 on 5..8: split at 4 with gain
        # 16/4 + 16/4 - 0 = 8
        X = np.arange(1.0, 9.0)[:, None]
        b = bin_features(X, ["numeric"])
        grad = np.array([-1.0] * 4 + [1.0] * 4)
        cand = find_best_split(b, np.arange(8), grad, np.ones(8),
                               TrainParams(min_data_in_leaf=2))
        assert cand.feature == 0
        assert cand.gain == pytest.approx(8.0, abs=1e-12)
        assert cand.threshold == 4.0

    def test_returns_none_without_positive_gain(self):
        X = np.arange(8.0)[:, None]
        b = bin_features(X, ["numeric"])
        cand = find_best_split(b, np.arange(8), np.zeros(8), np.ones(8),
                               TrainParams(min_data_in_leaf=2))
        assert cand is None

    def test_returns_none_when_node_too_small(self):
        X = np.arange(8.0)[:, None]
        b = bin_features(X, ["numeric"])
        grad = np.array([-1.0] * 4 + [1.0] * 4)
        assert find_best_split(b, np.arange(8), grad, np.ones(8),
                               TrainParams(min_data_in_leaf=5)) is None

    def test_min_data_respected(self):
        X = np.arange(1.0, 9.0)[:, None]
        b = bin_features(X, ["numeric"])
        # best unconstrained cut isolates the single +5 row; min_data=3
        # forces the boundary inward
        grad = np.array([0.0] * 7 + [5.0])
        cand = find_best_split(b, np.arange(8), grad, np.ones(8),
                               TrainParams(min_data_in_leaf=3))
        left = candidate_left_mask(cand, X)
        assert left.sum() >= 3 and (~left).sum() >= 3

    def test_categorical_subset_split(self):
        # categories {0, 2} carry negative gradients: a one-feature subset
        # split separates them exactly
        codes = np.array([0.0, 1.0, 2.0, 3.0] * 5)
        X = codes[:, None]
        grad = np.where(np.isin(codes, [0.0, 2.0]), -1.0, 1.0)
        b = bin_features(X, ["categorical"])
        cand = find_best_split(b, np.arange(20), grad, np.ones(20),
                               TrainParams(min_data_in_leaf=2))
        left = candidate_left_mask(cand, X)
        assert set(codes[left]) in ({0.0, 2.0}, {1.0, 3.0})
        assert cand.gain == pytest.approx(20.0, abs=1e-12)

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(23)
        for _ in range(25):
            X, kinds, grad, hess, min_data, lam = random_split_problem(rng)
            b = bin_features(X, kinds)
            cand = find_best_split(b, np.arange(len(X)), grad, hess,
                                   TrainParams(min_data_in_leaf=min_data,
                                               lambda_l2=lam))
            best_gain, best = exhaustive_best_split(X, kinds, grad, hess,
                                                    min_data, lam)
            if cand is None:
                assert best_gain <= 1e-9
                continue
            assert cand.gain == pytest.approx(best_gain, abs=1e-9)
            # the chosen partition itself achieves the optimal gain and the
            # chosen feature is among the tied-optimal ones
            left = candidate_left_mask(cand, X)
            assert split_partition_gain(left, grad, hess, lam) == \
                pytest.approx(best_gain, abs=1e-9)
            assert cand.feature in {f for f, _ in best}

    def test_categorical_matches_exhaustive_when_unregularized(self):
        # with unit hessians and no L2 penalty the sorted-prefix scan is
        # provably optimal, so full subset enumeration is a valid oracle
        rng = np.random.default_rng(27)
        for _ in range(25):
            n = int(rng.integers(12, 120))
            col = rng.integers(0, 6, size=n).astype(float)
            if rng.random() < 0.5:
                col[rng.random(n) < 0.15] = math.nan
            X = col[:, None]
            grad = rng.normal(size=n)
            hess = np.ones(n)
            b = bin_features(X, ["categorical"])
            cand = find_best_split(b, np.arange(n), grad, hess,
                                   TrainParams(min_data_in_leaf=1))
            best_gain, best = exhaustive_best_split(X, ["categorical"], grad,
                                                    hess, 1, 0.0)
            if cand is None:
                assert best_gain <= 1e-9
                continue
            assert cand.gain == pytest.approx(best_gain, abs=1e-9)
            left = candidate_left_mask(cand, X)
            assert split_partition_gain(left, grad, hess, 0.0) == \
                pytest.approx(best_gain, abs=1e-9)


class TestGoss:
    def test_frozen_example(self):
        # n=10, a=0.2, b=0.1: top-2 |gradient| rows keep weight 1, one
        # uniformly sampled remaining row is amplified by (1-a)/b = 8
        g = np.arange(1, 11) / 10.0
        idx, w = goss_sample(g, 0.2, 0.1, seed=0)
        assert len(idx) == 3
        assert set(idx[w == 1.0]) == {8, 9}
        assert list(w[idx < 8]) == [8.0]
        assert np.all(np.diff(idx) > 0)

    def test_zero_other_rate(self):
        idx, w = goss_sample(np.arange(10.0), 0.3, 0.0, seed=1)
        assert list(idx) == [7, 8, 9]
        assert w.tolist() == [1.0, 1.0, 1.0]

    def test_invalid_rates(self):
        with pytest.raises(ValueError):
            goss_sample(np.ones(5), 0.8, 0.5, seed=0)

    def test_deterministic_per_seed(self):
        g = np.random.default_rng(2).normal(size=100)
        a = goss_sample(g, 0.2, 0.1, seed=42)
        b = goss_sample(g, 0.2, 0.1, seed=42)
        c = goss_sample(g, 0.2, 0.1, seed=43)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(a[0], c[0])


def toy_problem(seed=0, n=400):
    rng = np.random.default_rng(seed)
    X = np.column_stack([
        rng.normal(size=n),
        rng.normal(size=n),
        rng.integers(0, 4, size=n).astype(float),
    ])
    y = (1.5 * X[:, 0] - np.sin(2 * X[:, 1])
         + np.where(X[:, 2] == 2.0, 1.0, 0.0)
         + rng.normal(0, 0.1, size=n))
    return X, y, ["numeric", "numeric", "categorical"]


class TestTraining:
    def test_fits_toy_function(self):
        X, y, kinds = toy_problem()
        params = TrainParams(min_data_in_leaf=5, max_rounds=200)
        model = train(X, y, kinds, params)
        rmse = math.sqrt(np.mean((predict(model, X) - y) ** 2))
        assert rmse < 0.2

    def test_training_loss_never_increases(self):
        X, y, kinds = toy_problem(seed=3, n=200)
        params = TrainParams(min_data_in_leaf=5, max_rounds=200)
        model = train(X, y, kinds, params)
        pred = np.full(len(y), model.base_score)
        last = math.inf
        for tree in model.trees:
            tree.predict_into(X, pred)
            loss = float(np.mean((pred - y) ** 2))
            assert loss <= last + 1e-12
            last = loss

    def test_early_stopping_truncates(self):
        X, y, kinds = toy_problem(seed=4)
        params = TrainParams(min_data_in_leaf=5, max_rounds=400,
                             early_stopping_rounds=20)
        model = train(X[:300], y[:300], kinds, params,
                      valid=(X[300:], y[300:]))
        assert model.best_round >= 0
        assert len(model.trees) == model.best_round + 1
        assert len(model.trees) < 400

    def test_num_leaves_and_min_data_limits(self):
        X, y, kinds = toy_problem()
        params = TrainParams(num_leaves=8, min_data_in_leaf=10, max_rounds=5)
        model = train(X, y, kinds, params)
        for tree in model.trees:
            assert tree.n_leaves <= 8
            leaf_cover = tree.cover[tree.is_leaf.astype(bool)]
            assert leaf_cover.min() >= 10

    def test_learns_missing_default_direction(self):
        rng = np.random.default_rng(8)
        n = 300
        X = rng.normal(size=(n, 1))
        miss = rng.random(n) < 0.4
        X[miss, 0] = math.nan
        y = np.where(miss, 3.0, 0.0) + rng.normal(0, 0.05, size=n)
        model = train(X, y, ["numeric"], TrainParams(min_data_in_leaf=5,
                                                     max_rounds=60))
        assert predict(model, np.array([math.nan])) == pytest.approx(3.0, abs=0.2)
        assert predict(model, np.array([0.0])) == pytest.approx(0.0, abs=0.2)

    def test_deterministic_given_seed(self):
        X, y, kinds = toy_problem(seed=6)
        params = TrainParams(min_data_in_leaf=5, max_rounds=30,
                             goss=(0.3, 0.2), seed=11)
        a = train(X, y, kinds, params)
        b = train(X, y, kinds, params)
        assert json.dumps(a.to_json()) == json.dumps(b.to_json())

    def test_input_validation(self):
        with pytest.raises(ValueError):
            train(np.empty((0, 1)), np.empty(0), ["numeric"], TrainParams())
        with pytest.raises(ValueError, match="finite"):
            train(np.ones((3, 1)), np.array([1.0, math.nan, 2.0]),
                  ["numeric"], TrainParams())

    def test_save_load_round_trip(self, tmp_path):
        X, y, kinds = toy_problem(seed=7, n=200)
        model = train(X, y, kinds, TrainParams(min_data_in_leaf=5,
                                               max_rounds=25))
        path = tmp_path / "model.json"
        model.save(path)
        back = Ensemble.load(path)
        assert np.array_equal(predict(back, X), predict(model, X))
        assert back.feature_names == model.feature_names
        assert back.params == model.params

    def test_predict_single_row_and_validation(self):
        X, y, kinds = toy_problem(n=100)
        model = train(X, y, kinds, TrainParams(min_data_in_leaf=5,
                                               max_rounds=10))
        single = predict(model, X[0])
        assert single == pytest.approx(predict(model, X[:1])[0])
        with pytest.raises(ValueError, match="features"):
            predict(model, X[:, :2])

"""Leaf-wise histogram gradient-boosted regression trees with L2 loss.

Supports categorical splits (sorted prefix scan), learned default
directions for missing values, gradient-based one-side sampling and
early stopping on a validation set. Deterministic given the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._kernels import (MAX_CATEGORIES, best_split_kernel, build_histogram,
                       grow_tree_kernel, partition_rows, predict_tree_into)


@dataclass(frozen=True)
class TrainParams:
    learning_rate: float = 0.05
    min_data_in_leaf: int = 20
    num_leaves: int = 50
    early_stopping_rounds: int = 100
    max_rounds: int = 1000
    max_bin: int = 255
    lambda_l2: float = 0.0
    goss: tuple | None = None  # (top_rate, other_rate) or None for off
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.num_leaves < 2:
            raise ValueError("num_leaves must be at least 2")
        if self.min_data_in_leaf < 1:
            raise ValueError("min_data_in_leaf must be positive")
        if self.max_rounds < 1 or self.early_stopping_rounds < 1:
            raise ValueError("round counts must be positive")
        if self.max_bin < 2:
            raise ValueError("max_bin must be at least 2")
        if self.goss is not None:
            a, b = self.goss
            if a < 0 or b < 0 or a + b > 1:
                raise ValueError("GOSS rates must satisfy a, b >= 0 and a + b <= 1")
            object.__setattr__(self, "goss", (float(a), float(b)))

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["goss"] = list(self.goss) if self.goss else None
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainParams":
        obj = dict(obj)
        if obj.get("goss") is not None:
            obj["goss"] = tuple(obj["goss"])
        return cls(**obj)


@dataclass(frozen=True)
class BinnedMatrix:
    """Quantile-binned feature matrix with a reserved missing bin per feature."""

    codes: np.ndarray        # (n, F) int32 bin ids; missing bin == n_bins[f]
    n_bins: np.ndarray       # (F,) non-missing bin counts
    is_cat: np.ndarray       # (F,) uint8
    bin_upper: tuple         # per numeric feature: upper value of each bin

    @property
    def n_rows(self) -> int:
        return self.codes.shape[0]

    @property
    def n_features(self) -> int:
        return self.codes.shape[1]


def bin_features(X: np.ndarray, kinds, max_bin: int = 255) -> BinnedMatrix:
    """Quantize numerics to quantile bins and categoricals to id bins."""
    X = np.asarray(X, dtype=np.float64)
    n, n_feat = X.shape
    if len(kinds) != n_feat:
        raise ValueError("kinds length must match feature count")
    codes = np.empty((n, n_feat), dtype=np.int32)
    n_bins = np.empty(n_feat, dtype=np.int32)
    is_cat = np.zeros(n_feat, dtype=np.uint8)
    uppers = []
    for f in range(n_feat):
        col = X[:, f]
        finite = np.isfinite(col)
        vals = col[finite]
        if kinds[f] == "categorical":
            is_cat[f] = 1
            if len(vals):
                if vals.min() < 0 or not np.all(vals == np.floor(vals)):
                    raise ValueError(f"feature {f}: categorical codes must be "
                                     "non-negative integers")
                nb = int(vals.max()) + 1
                if nb > MAX_CATEGORIES + 1:
                    raise ValueError(f"feature {f}: too many categories ({nb})")
            else:
                nb = 1
            codes[:, f] = np.where(finite, col, nb).astype(np.int32)
            n_bins[f] = nb
            uppers.append(np.empty(0))
        else:
            if len(vals) == 0:
                upper = np.array([0.0])
            else:
                distinct = np.unique(vals)
                if len(distinct) <= max_bin:
                    upper = distinct
                else:
                    edges = np.quantile(vals, np.arange(1, max_bin) / max_bin)
                    upper = np.unique(np.append(edges, distinct[-1]))
            nb = len(upper)
            c = np.searchsorted(upper, col, side="left")
            np.minimum(c, nb - 1, out=c)
            codes[:, f] = np.where(finite, c, nb).astype(np.int32)
            n_bins[f] = nb
            uppers.append(upper)
    return BinnedMatrix(codes=codes, n_bins=n_bins, is_cat=is_cat,
                        bin_upper=tuple(uppers))


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    gain: float
    missing_left: bool
    threshold_bin: int = -1            # numeric splits
    threshold: float = math.nan        # numeric splits, raw-value form
    categories_left: tuple = ()        # categorical splits, bin/code ids


def find_best_split(binned: BinnedMatrix, rows: np.ndarray, grad: np.ndarray,
                    hess: np.ndarray, params: TrainParams):
    """Gain-maximizing split of one node, or None.

    ``rows`` indexes the node's samples; ``grad``/``hess`` are full-length
    per-row arrays. Returns None when no split has positive gain or the
    node cannot produce two children of ``min_data_in_leaf`` rows.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) < 2 * params.min_data_in_leaf:
        return None
    hist_g, hist_h, hist_c = _node_histograms(binned, rows, grad, hess)
    total_g = float(grad[rows].sum())
    total_h = float(hess[rows].sum())
    return _candidate_from_kernel(
        binned, hist_g, hist_h, hist_c, total_g, total_h, len(rows), params)


def _node_histograms(binned, rows, grad, hess):
    width = int(binned.n_bins.max()) + 1
    hist_g = np.zeros((binned.n_features, width))
    hist_h = np.zeros((binned.n_features, width))
    hist_c = np.zeros((binned.n_features, width), dtype=np.int64)
    build_histogram(binned.codes, rows, grad, hess, hist_g, hist_h, hist_c)
    return hist_g, hist_h, hist_c


def _candidate_from_kernel(binned, hist_g, hist_h, hist_c,
                           total_g, total_h, total_c, params):
    f, gain, tbin, mleft, cat_mask = best_split_kernel(
        hist_g, hist_h, hist_c, binned.n_bins, binned.is_cat,
        total_g, total_h, total_c, params.min_data_in_leaf, params.lambda_l2)
    if f < 0:
        return None
    if binned.is_cat[f]:
        bits = int(cat_mask)
        cats = tuple(c for c in range(MAX_CATEGORIES + 1) if (bits >> c) & 1)
        return SplitCandidate(feature=int(f), gain=float(gain),
                              missing_left=bool(mleft),
                              categories_left=cats)
    return SplitCandidate(feature=int(f), gain=float(gain),
                          missing_left=bool(mleft), threshold_bin=int(tbin),
                          threshold=float(binned.bin_upper[f][tbin]))


@dataclass(frozen=True)
class Tree:
    """Flat-array binary tree; node 0 is the root."""

    feature: np.ndarray
    is_cat: np.ndarray
    threshold: np.ndarray
    cat_bits: np.ndarray        # uint64 bitmask of category ids routed left
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    is_leaf: np.ndarray
    value: np.ndarray
    cover: np.ndarray           # training rows through each node

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    @property
    def n_leaves(self) -> int:
        return int(self.is_leaf.sum())

    @property
    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        out = 0
        for node in range(self.n_nodes):
            if not self.is_leaf[node]:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
            else:
                out = max(out, int(depth[node]))
        return out

    def predict_into(self, X: np.ndarray, out: np.ndarray) -> None:
        predict_tree_into(self.feature, self.is_cat, self.threshold,
                          self.cat_bits, self.default_left, self.left,
                          self.right, self.is_leaf, self.value, X, out)

    def expected_value(self) -> float:
        """Cover-weighted mean leaf value (model output with nothing known)."""
        leaf = self.is_leaf.astype(bool)
        return float(np.sum(self.value[leaf] * self.cover[leaf]) / self.cover[0])

    def to_json(self) -> list:
        nodes = []
        for i in range(self.n_nodes):
            if self.is_leaf[i]:
                nodes.append({"id": i, "kind": "leaf",
                              "value": float(self.value[i]),
                              "cover": float(self.cover[i])})
            else:
                node = {"id": i, "kind": "split", "feature": int(self.feature[i]),
                        "default_left": bool(self.default_left[i]),
                        "cover": float(self.cover[i]),
                        "left": int(self.left[i]), "right": int(self.right[i])}
                if self.is_cat[i]:
                    bits = int(self.cat_bits[i])
                    node["categories_left"] = [c for c in range(MAX_CATEGORIES + 1)
                                               if (bits >> c) & 1]
                else:
                    node["threshold"] = float(self.threshold[i])
                nodes.append(node)
        return nodes

    @classmethod
    def from_json(cls, nodes: list) -> "Tree":
        n = len(nodes)
        b = _TreeBuilder()
        b.resize(n)
        for node in nodes:
            i = node["id"]
            b.cover[i] = node["cover"]
            if node["kind"] == "leaf":
                b.is_leaf[i] = 1
                b.value[i] = node["value"]
            else:
                b.is_leaf[i] = 0
                b.feature[i] = node["feature"]
                b.default_left[i] = node["default_left"]
                b.left[i] = node["left"]
                b.right[i] = node["right"]
                if "categories_left" in node:
                    b.is_cat[i] = 1
                    bits = 0
                    for c in node["categories_left"]:
                        bits |= 1 << c
                    b.cat_bits[i] = bits
                else:
                    b.threshold[i] = node["threshold"]
        return b.freeze()


class _TreeBuilder:
    def __init__(self):
        self.feature = []
        self.is_cat = []
        self.threshold = []
        self.cat_bits = []
        self.default_left = []
        self.left = []
        self.right = []
        self.is_leaf = []
        self.value = []
        self.cover = []

    def resize(self, n: int):
        self.feature = np.zeros(n, np.int32)
        self.is_cat = np.zeros(n, np.uint8)
        self.threshold = np.zeros(n, np.float64)
        self.cat_bits = np.zeros(n, np.uint64)
        self.default_left = np.zeros(n, np.uint8)
        self.left = np.full(n, -1, np.int32)
        self.right = np.full(n, -1, np.int32)
        self.is_leaf = np.zeros(n, np.uint8)
        self.value = np.zeros(n, np.float64)
        self.cover = np.zeros(n, np.float64)

    def add_leaf(self, value: float, cover: float) -> int:
        self.feature.append(-1)
        self.is_cat.append(0)
        self.threshold.append(math.nan)
        self.cat_bits.append(0)
        self.default_left.append(1)
        self.left.append(-1)
        self.right.append(-1)
        self.is_leaf.append(1)
        self.value.append(value)
        self.cover.append(cover)
        return len(self.value) - 1

    def split_node(self, nid: int, cand: SplitCandidate,
                   left_id: int, right_id: int) -> None:
        self.is_leaf[nid] = 0
        self.feature[nid] = cand.feature
        self.default_left[nid] = 1 if cand.missing_left else 0
        self.left[nid] = left_id
        self.right[nid] = right_id
        self.value[nid] = 0.0
        if cand.categories_left:
            self.is_cat[nid] = 1
            bits = 0
            for c in cand.categories_left:
                bits |= 1 << c
            self.cat_bits[nid] = bits
        else:
            self.threshold[nid] = cand.threshold

    def freeze(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, np.int32),
            is_cat=np.asarray(self.is_cat, np.uint8),
            threshold=np.asarray(self.threshold, np.float64),
            cat_bits=np.asarray(self.cat_bits, np.uint64),
            default_left=np.asarray(self.default_left, np.uint8),
            left=np.asarray(self.left, np.int32),
            right=np.asarray(self.right, np.int32),
            is_leaf=np.asarray(self.is_leaf, np.uint8),
            value=np.asarray(self.value, np.float64),
            cover=np.asarray(self.cover, np.float64),
        )


@dataclass(frozen=True)
class Ensemble:
    """Ordered regression trees on top of a constant base score."""

    base_score: float
    trees: tuple
    params: TrainParams
    feature_names: tuple
    feature_kinds: tuple
    best_round: int = -1

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def expected_value(self) -> float:
        return self.base_score + sum(t.expected_value() for t in self.trees)

    def to_json(self) -> dict:
        return {
            "base_score": self.base_score,
            "params": self.params.to_json(),
            "feature_names": list(self.feature_names),
            "feature_kinds": list(self.feature_kinds),
            "best_round": self.best_round,
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Ensemble":
        return cls(
            base_score=float(obj["base_score"]),
            trees=tuple(Tree.from_json(t) for t in obj["trees"]),
            params=TrainParams.from_json(obj["params"]),
            feature_names=tuple(obj["feature_names"]),
            feature_kinds=tuple(obj["feature_kinds"]),
            best_round=int(obj.get("best_round", -1)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(),
                                         separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> "Ensemble":
        return cls.from_json(json.loads(Path(path).read_text()))


def goss_sample(gradients: np.ndarray, top_rate: float, other_rate: float,
                seed: int):
    """Gradient-based one-side sampling.

    Keeps the ceil(a*n) largest-|gradient| rows with weight 1 and a uniform
    sample of ceil(b*n) remaining rows amplified by (1-a)/b. Returns row
    indices (ascending) and matching weights.
    """
    g = np.asarray(gradients, dtype=np.float64)
    n = len(g)
    if top_rate < 0 or other_rate < 0 or top_rate + other_rate > 1:
        raise ValueError("GOSS rates must satisfy a, b >= 0 and a + b <= 1")
    n_top = min(math.ceil(top_rate * n), n)
    order = np.argsort(-np.abs(g), kind="stable")
    top = np.sort(order[:n_top])
    rest = np.sort(order[n_top:])
    if other_rate == 0 or len(rest) == 0:
        return top, np.ones(len(top))
    n_other = min(math.ceil(other_rate * n), len(rest))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    sampled = np.sort(rng.choice(rest, size=n_other, replace=False))
    amplify = (1.0 - top_rate) / other_rate
    idx = np.concatenate([top, sampled])
    w = np.concatenate([np.ones(len(top)), np.full(n_other, amplify)])
    order = np.argsort(idx, kind="stable")
    return idx[order], w[order]


def _tree_workspace(binned: BinnedMatrix, params: TrainParams) -> tuple:
    """Reusable per-node histogram buffers (allocated once per training run)."""
    max_nodes = 2 * params.num_leaves - 1
    width = int(binned.n_bins.max()) + 1
    n_feat = binned.n_features
    return (np.empty((max_nodes, n_feat, width)),
            np.empty((max_nodes, n_feat, width)),
            np.empty((max_nodes, n_feat, width), dtype=np.int64))


def _grow_tree(binned: BinnedMatrix, rows: np.ndarray, grad: np.ndarray,
               hess: np.ndarray, params: TrainParams,
               workspace: tuple | None = None) -> Tree:
    max_nodes = 2 * params.num_leaves - 1
    hist_g, hist_h, hist_c = (workspace if workspace is not None
                              else _tree_workspace(binned, params))

    feature = np.empty(max_nodes, np.int32)
    is_cat_node = np.empty(max_nodes, np.uint8)
    thresh_bin = np.empty(max_nodes, np.int32)
    cat_bits = np.empty(max_nodes, np.uint64)
    default_left = np.empty(max_nodes, np.uint8)
    left = np.empty(max_nodes, np.int32)
    right = np.empty(max_nodes, np.int32)
    is_leaf = np.empty(max_nodes, np.uint8)
    value = np.empty(max_nodes, np.float64)
    cover = np.empty(max_nodes, np.float64)

    n_nodes = grow_tree_kernel(
        binned.codes, np.asarray(rows, dtype=np.int64), grad, hess,
        binned.n_bins, binned.is_cat, params.min_data_in_leaf,
        params.lambda_l2, params.learning_rate, params.num_leaves,
        hist_g, hist_h, hist_c,
        feature, is_cat_node, thresh_bin, cat_bits, default_left,
        left, right, is_leaf, value, cover)

    threshold = np.full(n_nodes, math.nan)
    for i in range(n_nodes):
        if not is_leaf[i] and not is_cat_node[i]:
            threshold[i] = binned.bin_upper[feature[i]][thresh_bin[i]]
    return Tree(feature=feature[:n_nodes].copy(),
                is_cat=is_cat_node[:n_nodes].copy(),
                threshold=threshold,
                cat_bits=cat_bits[:n_nodes].copy(),
                default_left=default_left[:n_nodes].copy(),
                left=left[:n_nodes].copy(), right=right[:n_nodes].copy(),
                is_leaf=is_leaf[:n_nodes].copy(), value=value[:n_nodes].copy(),
                cover=cover[:n_nodes].copy())


def train(X: np.ndarray, y: np.ndarray, kinds, params: TrainParams,
          valid: tuple | None = None, feature_names=None) -> Ensemble:
    """Boost L2-loss regression trees; early-stops on validation RMSE.

    With a validation set the returned ensemble is truncated at the round
    with the best validation RMSE.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D and aligned with y")
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels must be finite")
    if feature_names is None:
        feature_names = tuple(f"f{i}" for i in range(X.shape[1]))

    binned = bin_features(X, kinds, params.max_bin)
    workspace = _tree_workspace(binned, params)
    n = len(y)
    base = float(np.mean(y))
    pred = np.full(n, base)
    all_rows = np.arange(n, dtype=np.int64)
    ones = np.ones(n)

    if valid is not None:
        Xv = np.asarray(valid[0], dtype=np.float64)
        yv = np.asarray(valid[1], dtype=np.float64)
        pred_v = np.full(len(yv), base)
        best_rmse = math.inf
    best_round = -1

    trees = []
    for rnd in range(params.max_rounds):
        grad = pred - y
        if params.goss is not None:
            a, b = params.goss
            rows, w = goss_sample(grad, a, b, _derive_seed(params.seed, rnd))
            gw = np.zeros(n)
            hw = np.zeros(n)
            gw[rows] = grad[rows] * w
            hw[rows] = w
        else:
            rows, gw, hw = all_rows, grad, ones
        tree = _grow_tree(binned, rows, gw, hw, params, workspace)
        trees.append(tree)
        tree.predict_into(X, pred)
        if valid is not None:
            tree.predict_into(Xv, pred_v)
            rmse = math.sqrt(float(np.mean((pred_v - yv) ** 2)))
            if rmse < best_rmse:
                best_rmse = rmse
                best_round = rnd
            if rnd - best_round >= params.early_stopping_rounds:
                break

    if valid is not None:
        trees = trees[:best_round + 1]
    return Ensemble(base_score=base, trees=tuple(trees), params=params,
                    feature_names=tuple(feature_names),
                    feature_kinds=tuple(kinds), best_round=best_round)


def _derive_seed(seed: int, rnd: int) -> int:
    return int(np.random.SeedSequence([seed, rnd]).generate_state(1)[0])


def predict(ensemble: Ensemble, X: np.ndarray) -> np.ndarray:
    """Model output for a row matrix (or a single row vector)."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != ensemble.n_features:
        raise ValueError(
            f"row has {X.shape[1]} features, model expects {ensemble.n_features}")
    out = np.full(len(X), ensemble.base_score)
    for tree in ensemble.trees:
        tree.predict_into(X, out)
    return float(out[0]) if single else out

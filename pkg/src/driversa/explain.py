"""Exact Shapley attributions for tree ensembles and SHAP-driven selection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, gbdt
from ._kernels import tree_shap_matrix
from .featureset import Dataset


@dataclass(frozen=True)
class ShapMatrix:
    """Per-row, per-feature attributions plus the per-row base value.

    Local accuracy: base + sum of a row's attributions equals the model
    prediction for that row.
    """

    values: np.ndarray          # (n, F)
    base_value: float           # expected model output (same for all rows)
    feature_names: tuple
    row_ids: tuple = ()

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def mean_abs(self) -> np.ndarray:
        return np.abs(self.values).mean(axis=0)


def tree_shap(ensemble: gbdt.Ensemble, X: np.ndarray,
              row_ids=()) -> ShapMatrix:
    """Exact Shapley values under cover-weighted path expectations.

    Additive across trees; polynomial time per row.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != ensemble.n_features:
        raise ValueError(
            f"rows have {X.shape[1]} features, model expects {ensemble.n_features}")
    phi = np.zeros((len(X), ensemble.n_features))
    for tree in ensemble.trees:
        tree_shap_matrix(tree.feature, tree.is_cat, tree.threshold,
                         tree.cat_bits, tree.default_left, tree.left,
                         tree.right, tree.is_leaf, tree.value, tree.cover,
                         X, tree.max_depth, phi)
    return ShapMatrix(values=phi, base_value=ensemble.expected_value(),
                      feature_names=ensemble.feature_names,
                      row_ids=tuple(row_ids))


@dataclass(frozen=True)
class ImportanceRanking:
    """Features ordered by fold-averaged mean |SHAP|, descending."""

    feature_names: tuple
    scores: tuple

    def top(self, k: int) -> tuple:
        return self.feature_names[:k]

    def to_json(self) -> dict:
        return {"features": list(self.feature_names), "scores": list(self.scores)}

    @classmethod
    def from_json(cls, obj: dict) -> "ImportanceRanking":
        return cls(feature_names=tuple(obj["features"]),
                   scores=tuple(float(s) for s in obj["scores"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "ImportanceRanking":
        return cls.from_json(json.loads(Path(path).read_text()))


def rank_features(fold_matrices) -> ImportanceRanking:
    """Average per-fold mean |SHAP| per feature; sort descending, ties by name."""
    fold_matrices = list(fold_matrices)
    if not fold_matrices:
        raise ValueError("need at least one fold SHAP matrix")
    names = fold_matrices[0].feature_names
    for m in fold_matrices[1:]:
        if m.feature_names != names:
            raise ValueError("fold SHAP matrices have inconsistent schemas")
    scores = np.mean([m.mean_abs() for m in fold_matrices], axis=0)
    order = sorted(range(len(names)), key=lambda j: (-scores[j], names[j]))
    return ImportanceRanking(feature_names=tuple(names[j] for j in order),
                             scores=tuple(float(scores[j]) for j in order))


def fold_shap(dataset: Dataset, params: gbdt.TrainParams, k: int = 10,
              seed: int = 0, feature_names=None, threads: int = 1,
              group_by_participant: bool = False):
    """Cross-validated SHAP: each fold's model attributes its held-out rows.

    Returns (CvReport, list of per-fold ShapMatrix, pooled ShapMatrix whose
    rows align with the dataset).
    """
    report, models = evaluation.kfold_cv(
        dataset, params, k=k, seed=seed, feature_names=feature_names,
        threads=threads, group_by_participant=group_by_participant,
        return_models=True)
    per_fold, pooled_matrix = shap_from_cv(report, models, dataset)
    return report, per_fold, pooled_matrix


def shap_from_cv(report, models, dataset: Dataset):
    """SHAP for existing CV fold models, each attributing its held-out rows.

    Returns (list of per-fold ShapMatrix, pooled ShapMatrix aligned with the
    dataset's rows).
    """
    X, names, _ = dataset.design_matrix(report.feature_names)
    per_fold = []
    pooled = np.zeros_like(X, dtype=np.float64)
    base = np.zeros(len(X))
    for f, model in enumerate(models):
        test_idx = np.flatnonzero(report.folds == f)
        sm = tree_shap(model, X[test_idx], row_ids=tuple(int(i) for i in test_idx))
        per_fold.append(sm)
        pooled[test_idx] = sm.values
        base[test_idx] = sm.base_value
    pooled_matrix = ShapMatrix(values=pooled, base_value=float(base.mean()),
                               feature_names=names,
                               row_ids=tuple(range(len(X))))
    return per_fold, pooled_matrix


@dataclass(frozen=True)
class SelectionCurve:
    """CV metrics as features are added in SHAP-importance order."""

    entries: tuple       # dicts: k, rmse, mae, corr
    k_star: int          # argmin RMSE, ties to the smaller k
    ranking: ImportanceRanking

    def entry(self, k: int) -> dict:
        for e in self.entries:
            if e["k"] == k:
                return dict(e)
        raise KeyError(k)

    def selected_features(self) -> tuple:
        return self.ranking.top(self.k_star)

    def to_json(self) -> dict:
        return {"entries": [dict(e) for e in self.entries],
                "k_star": self.k_star, "ranking": self.ranking.to_json()}

    def save_csv(self, path: str | Path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "rmse", "mae", "corr"])
            for e in self.entries:
                w.writerow([e["k"], repr(e["rmse"]), repr(e["mae"]),
                            repr(e["corr"])])


def incremental_selection(dataset: Dataset, ranking: ImportanceRanking,
                          params: gbdt.TrainParams, k_range=None,
                          cv_folds: int = 10, seed: int = 0,
                          threads: int = 1,
                          group_by_participant: bool = False) -> SelectionCurve:
    """Grow the feature set by importance rank, running full CV at each size."""
    n_features = len(ranking.feature_names)
    if k_range is None:
        k_range = range(1, n_features + 1)
    entries = []
    for k in k_range:
        if not 1 <= k <= n_features:
            raise ValueError(f"feature subset size {k} out of range")
        report = evaluation.kfold_cv(
            dataset, params, k=cv_folds, seed=seed,
            feature_names=ranking.top(k), threads=threads,
            group_by_participant=group_by_participant)
        entries.append({"k": int(k), "rmse": report.pooled["rmse"],
                        "mae": report.pooled["mae"],
                        "corr": report.pooled["corr"]})
    best = min(entries, key=lambda e: (e["rmse"], e["k"]))
    return SelectionCurve(entries=tuple(entries), k_star=best["k"],
                          ranking=ranking)


def write_shap_csv(matrix: ShapMatrix, path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", "base"] + [f"phi_{n}" for n in matrix.feature_names])
        ids = matrix.row_ids or tuple(range(matrix.n_rows))
        for i, rid in enumerate(ids):
            w.writerow([rid, repr(matrix.base_value)]
                       + [repr(float(v)) for v in matrix.values[i]])

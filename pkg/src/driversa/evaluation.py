"""Cross-validated evaluation: RMSE/MAE/Pearson, Spearman feature effects."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata
from scipy.stats import t as t_dist

from . import gbdt
from .featureset import Dataset
from .timebase import MISSING, is_missing


def metrics(y, yhat):
    """(RMSE, MAE, Pearson correlation); Corr is MISSING on zero variance."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if len(y) == 0 or len(y) != len(yhat):
        raise ValueError("y and yhat must be equal-length and non-empty")
    err = y - yhat
    rmse = math.sqrt(float(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    return rmse, mae, pearson(y, yhat)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(np.sum(da ** 2)) * float(np.sum(db ** 2)))
    if denom == 0:
        return MISSING
    return float(np.sum(da * db)) / denom


def spearman(x, y) -> float:
    """Rank correlation with average-rank ties; MISSING on constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        raise ValueError("spearman needs two equal-length vectors of >= 2 points")
    return pearson(rankdata(x), rankdata(y))


def spearman_with_p(x, y):
    """(rho, two-sided p) using the t approximation."""
    rho = spearman(x, y)
    if is_missing(rho):
        return rho, MISSING
    n = len(x)
    if n <= 2 or abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * t_dist.sf(abs(t), df=n - 2))


def fold_assignment(n: int, k: int, seed: int) -> np.ndarray:
    """Deterministic fold index per row; sizes differ by at most one."""
    if n < k:
        raise ValueError(f"need at least {k} rows for {k}-fold CV, got {n}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    perm = rng.permutation(n)
    folds = np.empty(n, dtype=np.int64)
    base, extra = divmod(n, k)
    pos = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        folds[perm[pos:pos + size]] = f
        pos += size
    return folds


def grouped_fold_assignment(groups, k: int, seed: int) -> np.ndarray:
    """Fold index per row with whole groups (participants) kept together."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if len(uniq) < k:
        raise ValueError(f"need at least {k} groups for grouped {k}-fold CV")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    perm = rng.permutation(len(uniq))
    fold_of_group = {}
    base, extra = divmod(len(uniq), k)
    pos = 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        for gi in perm[pos:pos + size]:
            fold_of_group[uniq[gi]] = f
        pos += size
    return np.array([fold_of_group[g] for g in groups], dtype=np.int64)


@dataclass(frozen=True)
class CvReport:
    k: int
    seed: int
    params: gbdt.TrainParams
    feature_names: tuple
    folds: np.ndarray            # fold index per row
    oof_pred: np.ndarray         # out-of-fold prediction per row
    fold_metrics: tuple          # per fold: dict rmse/mae/corr/n/best_round
    pooled: dict                 # metrics over concatenated oof predictions

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "params": self.params.to_json(),
            "feature_names": list(self.feature_names),
            "folds": self.folds.tolist(),
            "oof_pred": self.oof_pred.tolist(),
            "fold_metrics": [dict(m) for m in self.fold_metrics],
            "pooled": dict(self.pooled),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, obj: dict) -> "CvReport":
        return cls(
            k=int(obj["k"]), seed=int(obj["seed"]),
            params=gbdt.TrainParams.from_json(obj["params"]),
            feature_names=tuple(obj["feature_names"]),
            folds=np.asarray(obj["folds"], dtype=np.int64),
            oof_pred=np.asarray(obj["oof_pred"], dtype=np.float64),
            fold_metrics=tuple(obj["fold_metrics"]),
            pooled=dict(obj["pooled"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> "CvReport":
        return cls.from_json(json.loads(Path(path).read_text()))


def _train_fold(args):
    X, y, kinds, names, params, train_idx, test_idx = args
    model = gbdt.train(X[train_idx], y[train_idx], kinds, params,
                       valid=(X[test_idx], y[test_idx]), feature_names=names)
    preds = gbdt.predict(model, X[test_idx])
    return preds, model


def kfold_cv(dataset: Dataset, params: gbdt.TrainParams, k: int = 10,
             seed: int = 0, feature_names=None, threads: int = 1,
             group_by_participant: bool = False, return_models: bool = False):
    """Seeded k-fold CV; the held-out fold doubles as the early-stopping set.

    Pooled metrics are computed over the concatenated out-of-fold
    predictions. Results are independent of ``threads``.
    """
    X, names, kinds = dataset.design_matrix(feature_names)
    y = dataset.labels()
    if group_by_participant:
        folds = grouped_fold_assignment(
            dataset.frame["participant_id"].to_numpy(), k, seed)
    else:
        folds = fold_assignment(len(y), k, seed)

    tasks = []
    for f in range(k):
        test_idx = np.flatnonzero(folds == f)
        train_idx = np.flatnonzero(folds != f)
        tasks.append((X, y, kinds, names, params, train_idx, test_idx))

    # More workers than CPUs only adds fork/pickle overhead; results are
    # identical for any thread count because folds are joined in order.
    workers = min(threads, os.cpu_count() or 1, k)
    if workers > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(max_workers=workers,
                                 mp_context=mp.get_context("fork")) as pool:
            results = list(pool.map(_train_fold, tasks))
    else:
        results = [_train_fold(t) for t in tasks]

    oof = np.empty(len(y))
    fold_metrics = []
    models = []
    for f, (preds, model) in enumerate(results):
        test_idx = np.flatnonzero(folds == f)
        oof[test_idx] = preds
        rmse, mae, corr = metrics(y[test_idx], preds)
        fold_metrics.append({"fold": f, "n": int(len(test_idx)), "rmse": rmse,
                             "mae": mae, "corr": corr,
                             "best_round": model.best_round})
        models.append(model)

    rmse, mae, corr = metrics(y, oof)
    report = CvReport(k=k, seed=seed, params=params, feature_names=names,
                      folds=folds, oof_pred=oof,
                      fold_metrics=tuple(fold_metrics),
                      pooled={"n": int(len(y)), "rmse": rmse, "mae": mae,
                              "corr": corr})
    if return_models:
        return report, models
    return report


def feature_effect_report(shap_values: np.ndarray, dataset: Dataset,
                          feature_names, max_segments: int = 20) -> dict:
    """Per-feature effect summary: binned SHAP quartiles + Spearman rho/p.

    Numeric features are quantile-segmented (at most ``max_segments``
    groups); categorical features get one segment per category.
    """
    X, names, kinds = dataset.design_matrix(feature_names)
    if shap_values.shape != X.shape:
        raise ValueError("shap matrix shape does not match the dataset")
    out = {}
    for j, name in enumerate(names):
        vals = X[:, j]
        phi = shap_values[:, j]
        ok = np.isfinite(vals)
        report = {"feature": name, "kind": kinds[j], "segments": []}
        if ok.sum() >= 2 and np.ptp(vals[ok]) > 0 and np.ptp(phi[ok]) > 0:
            rho, p = spearman_with_p(vals[ok], phi[ok])
        else:
            rho, p = MISSING, MISSING
        report["spearman_rho"] = rho
        report["spearman_p"] = p

        v = vals[ok]
        f = phi[ok]
        if len(v):
            if kinds[j] == "categorical":
                edges = np.unique(v)
                seg_of = np.searchsorted(edges, v)
            else:
                qs = np.quantile(v, np.linspace(0, 1, max_segments + 1))
                edges = np.unique(qs)
                seg_of = np.clip(np.searchsorted(edges, v, side="right") - 1,
                                 0, max(len(edges) - 2, 0))
            for s in np.unique(seg_of):
                sel = f[seg_of == s]
                q1, med, q3 = np.quantile(sel, [0.25, 0.5, 0.75])
                lo = float(edges[s]) if s < len(edges) else float(edges[-1])
                report["segments"].append({
                    "segment": int(s), "value_lo": lo,
                    "n": int(len(sel)), "phi_q1": float(q1),
                    "phi_median": float(med), "phi_q3": float(q3),
                })
        out[name] = report
    return out


def write_effect_reports(effects: dict, out_dir: str | Path) -> None:
    import csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rep in effects.items():
        with open(out_dir / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment", "value_lo", "n", "phi_q1", "phi_median",
                        "phi_q3", "spearman_rho", "spearman_p"])
            for seg in rep["segments"]:
                w.writerow([seg["segment"], repr(seg["value_lo"]), seg["n"],
                            repr(seg["phi_q1"]), repr(seg["phi_median"]),
                            repr(seg["phi_q3"]), repr(rep["spearman_rho"]),
                            repr(rep["spearman_p"])])

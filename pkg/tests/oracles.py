"""Independent brute-force reference implementations used by the tests.

Everything here favors obviousness over speed: direct summation, full
enumeration, no shared code with the package under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# --- signal references -------------------------------------------------------

def naive_rmssd(intervals, divide: bool) -> float:
    s = 0.0
    for a, b in zip(intervals, intervals[1:]):
        s += (b - a) ** 2
    if divide:
        s /= len(intervals) - 1
    return math.sqrt(s)


def naive_median_mean_baseline(values, k_med: int, k_mean: int):
    """Centered median then mean with nearest-edge padding, one index at a time."""
    n = len(values)
    hm = k_med // 2

    def window(arr, i, h):
        idx = np.clip(np.arange(i - h, i + h + 1), 0, n - 1)
        return np.asarray(arr, dtype=float)[idx]

    med = np.array([np.median(window(values, i, hm)) for i in range(n)])
    hu = k_mean // 2
    return np.array([np.mean(window(med, i, hu)) for i in range(n)])


def naive_idt(t, x, y, max_disp: float, min_dur: float):
    """Reference dispersion-threshold scan; returns (start, end) index pairs."""
    n = len(t)

    def disp(i, j):
        xs = x[i:j + 1]
        ys = y[i:j + 1]
        return (max(xs) - min(xs)) + (max(ys) - min(ys))

    out = []
    i = 0
    while i < n:
        j = i
        while j < n and t[j] - t[i] < min_dur:
            j += 1
        if j >= n:
            break
        if disp(i, j) <= max_disp:
            while j + 1 < n and disp(i, j + 1) <= max_disp:
                j += 1
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


# --- metric references -------------------------------------------------------

def naive_rmse(y, yhat) -> float:
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(y, yhat)) / len(y))


def naive_mae(y, yhat) -> float:
    return sum(abs(a - b) for a, b in zip(y, yhat)) / len(y)


def naive_pearson(a, b) -> float:
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = sum((x - ma) ** 2 for x in a)
    db = sum((y - mb) ** 2 for y in b)
    return num / math.sqrt(da * db)


def naive_rankdata(v):
    order = sorted(range(len(v)), key=lambda i: v[i])
    ranks = [0.0] * len(v)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def naive_spearman(a, b) -> float:
    return naive_pearson(naive_rankdata(a), naive_rankdata(b))


# --- GBDT split reference ----------------------------------------------------

def _gain(gl, hl, gr, hr, lam):
    g = gl + gr
    h = hl + hr
    return gl * gl / (hl + lam) + gr * gr / (hr + lam) - g * g / (h + lam)


def exhaustive_best_split(X, kinds, grad, hess, min_data, lam, tol=1e-9):
    """Best achievable split gain by unbinned enumeration.

    Returns (best_gain, splits) where splits lists every
    (feature, left_row_tuple) whose gain comes within ``tol`` of the best.
    Considers every threshold between distinct values (both missing
    directions) and every categorical subset.
    """
    n, n_feat = X.shape
    rows = np.arange(n)
    candidates = []  # (gain, feature, frozenset(left rows))
    for f in range(n_feat):
        col = X[:, f]
        miss = ~np.isfinite(col)
        vals = np.unique(col[~miss])
        if kinds[f] == "categorical":
            cats = [int(v) for v in vals]
            for r in range(1, len(cats) + 1):
                for subset in itertools.combinations(cats, r):
                    base_left = np.isin(col, subset) & ~miss
                    for mleft in (True, False):
                        left = base_left | (miss if mleft else np.zeros(n, bool))
                        candidates.append((f, left))
        else:
            # a cut at the largest value is meaningful too: it separates
            # the finite rows from the missing ones
            for cut in vals:
                base_left = (col <= cut) & ~miss
                for mleft in (True, False):
                    left = base_left | (miss if mleft else np.zeros(n, bool))
                    candidates.append((f, left))
    scored = []
    for f, left in candidates:
        nl = int(left.sum())
        nr = n - nl
        if nl < min_data or nr < min_data:
            continue
        gl = float(grad[left].sum())
        hl = float(hess[left].sum())
        gr = float(grad[~left].sum())
        hr = float(hess[~left].sum())
        if hl + lam <= 0 or hr + lam <= 0:
            continue
        scored.append((_gain(gl, hl, gr, hr, lam), f, tuple(rows[left])))
    best_gain = max((g for g, _, _ in scored), default=0.0)
    if best_gain <= 0:
        return 0.0, []
    best = [(f, left) for g, f, left in scored if g >= best_gain - tol]
    return best_gain, best


def split_partition_gain(left_mask, grad, hess, lam) -> float:
    """Gain of an arbitrary binary row partition under the same formula."""
    gl = float(np.sum(grad[left_mask]))
    hl = float(np.sum(hess[left_mask]))
    gr = float(np.sum(grad[~left_mask]))
    hr = float(np.sum(hess[~left_mask]))
    return _gain(gl, hl, gr, hr, lam)


# --- TreeSHAP reference ------------------------------------------------------

def tree_features(tree):
    return sorted({int(tree.feature[i]) for i in range(tree.n_nodes)
                   if not tree.is_leaf[i]})


def _route(tree, node, x):
    f = tree.feature[node]
    v = x[f]
    if v != v:
        return tree.left[node] if tree.default_left[node] else tree.right[node]
    if tree.is_cat[node]:
        c = int(v)
        if 0 <= c <= 63 and (int(tree.cat_bits[node]) >> c) & 1:
            return tree.left[node]
        return tree.right[node]
    return tree.left[node] if v <= tree.threshold[node] else tree.right[node]


def expvalue(tree, x, known: set, node: int = 0) -> float:
    """Cover-weighted conditional expectation with only ``known`` features set."""
    if tree.is_leaf[node]:
        return float(tree.value[node])
    f = int(tree.feature[node])
    if f in known:
        return expvalue(tree, x, known, _route(tree, node, x))
    lf = int(tree.left[node])
    rf = int(tree.right[node])
    wl = float(tree.cover[lf])
    wr = float(tree.cover[rf])
    return (wl * expvalue(tree, x, known, lf)
            + wr * expvalue(tree, x, known, rf)) / (wl + wr)


def brute_shapley(tree, x):
    """Exact Shapley values of one tree by subset enumeration.

    Returns (phi dict over the tree's features, base value v(empty set)).
    """
    feats = tree_features(tree)
    m = len(feats)
    phi = {f: 0.0 for f in feats}
    for f in feats:
        others = [g for g in feats if g != f]
        for r in range(m):
            for subset in itertools.combinations(others, r):
                s = set(subset)
                weight = (math.factorial(len(s)) * math.factorial(m - len(s) - 1)
                          / math.factorial(m))
                phi[f] += weight * (expvalue(tree, x, s | {f})
                                    - expvalue(tree, x, s))
    return phi, expvalue(tree, x, set())

import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from driversa import cli, featureset, synthgen
from driversa.gbdt import Tree


SMALL_SYNTH = synthgen.SynthConfig(
    n_participants=4, drives_per_participant=2, total_rows=40, seed=7)


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A small generated study with its extracted dataset (8 drives, 40 rows)."""
    out = tmp_path_factory.mktemp("small_run")
    truth = synthgen.generate(SMALL_SYNTH, out)
    cfg = cli.PipelineConfig(synth=SMALL_SYNTH)

    class Args:
        pass

    args = Args()
    args.out = str(out)
    args.threads = 1
    cli.cmd_extract(args, cfg)
    dataset = featureset.load_dataset(out / "dataset.csv")
    return {"dir": out, "truth": truth, "dataset": dataset, "config": cfg}


def random_tree(rng: np.random.Generator, n_features: int = 4,
                max_depth: int = 3, n_categories: int = 4) -> Tree:
    """A structurally valid random tree with numeric and categorical splits.

    Feature 0 is categorical (codes 0..n_categories-1); the rest are numeric
    with thresholds in [-1, 1]. Covers are consistent (parent = sum of
    children) and strictly positive.
    """
    feature, is_cat, threshold, cat_bits = [], [], [], []
    default_left, left, right, is_leaf = [], [], [], []
    value, cover = [], []

    def new_node():
        feature.append(-1)
        is_cat.append(0)
        threshold.append(math.nan)
        cat_bits.append(0)
        default_left.append(1)
        left.append(-1)
        right.append(-1)
        is_leaf.append(1)
        value.append(0.0)
        cover.append(0.0)
        return len(value) - 1

    def grow(node, depth, cov):
        cover[node] = cov
        if depth >= max_depth or cov < 2 or rng.random() < 0.3:
            value[node] = float(rng.normal())
            return
        f = int(rng.integers(0, n_features))
        is_leaf[node] = 0
        feature[node] = f
        default_left[node] = int(rng.integers(0, 2))
        if f == 0:
            is_cat[node] = 1
            cats = rng.choice(n_categories, size=int(rng.integers(1, n_categories)),
                              replace=False)
            bits = 0
            for c in cats:
                bits |= 1 << int(c)
            cat_bits[node] = bits
        else:
            threshold[node] = float(rng.uniform(-1, 1))
        cl = int(rng.integers(1, int(cov)))
        li = new_node()
        ri = new_node()
        left[node] = li
        right[node] = ri
        grow(li, depth + 1, float(cl))
        grow(ri, depth + 1, float(cov - cl))

    root = new_node()
    grow(root, 0, float(rng.integers(8, 64)))
    return Tree(
        feature=np.asarray(feature, np.int32),
        is_cat=np.asarray(is_cat, np.uint8),
        threshold=np.asarray(threshold, np.float64),
        cat_bits=np.asarray(cat_bits, np.uint64),
        default_left=np.asarray(default_left, np.uint8),
        left=np.asarray(left, np.int32),
        right=np.asarray(right, np.int32),
        is_leaf=np.asarray(is_leaf, np.uint8),
        value=np.asarray(value, np.float64),
        cover=np.asarray(cover, np.float64),
    )


def random_row(rng: np.random.Generator, n_features: int = 4,
               n_categories: int = 4, p_missing: float = 0.15) -> np.ndarray:
    x = rng.uniform(-1, 1, size=n_features)
    x[0] = float(rng.integers(0, n_categories))
    miss = rng.random(n_features) < p_missing
    x[miss] = math.nan
    return x

"""Honest multi-treatment causal forest and its weighted representation."""
from __future__ import annotations

import gzip
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import sparse

from . import _tree
from .errors import DataError, NumericalError, UsageError
from .sample import N_ARMS, EstimationSample

WEIGHT_CHUNK_BYTES = 64 * 2 ** 20


@dataclass
class ForestParams:
    n_trees: int = 1000
    subsample_fraction: float = 0.5
    min_leaf_per_arm: int = 5
    mtry: int | None = None
    honesty: bool = True
    seed: int = 0
    penalty_lambda: float = 1.0
    outcome_adjustment: bool = True
    centering_trees: int = 50
    max_depth: int = -1

    def __post_init__(self):
        if self.n_trees < 1:
            raise UsageError("n_trees must be >= 1")
        if self.min_leaf_per_arm < 2:
            raise UsageError("min_leaf_per_arm must be >= 2")
        if not 0 < self.subsample_fraction <= 1:
            raise UsageError("subsample_fraction must be in (0, 1]")
        if self.mtry is not None and self.mtry < 1:
            raise UsageError("mtry must be >= 1")

    def resolved_mtry(self, p: int) -> int:
        return min(p, self.mtry if self.mtry is not None else math.ceil(math.sqrt(p)))


def _seed_words(*key) -> tuple[int, int]:
    a, b = np.random.SeedSequence([int(k) for k in key]).generate_state(2, np.uint64)
    return int(a), int(b >> np.uint64(1))  # the kernel seed must fit an int64


def default_threads() -> int:
    return os.cpu_count() or 1


def _set_numba_threads(threads: int):
    numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))


def _check_categories(X, unordered):
    if unordered.any():
        cats = X[:, unordered]
        if np.any(cats < 0) or np.any(cats >= _tree.MAX_CATEGORIES) or np.any(cats != np.floor(cats)):
            raise DataError(f"unordered features must be integer codes in 0..{_tree.MAX_CATEGORIES - 1}")


# --------------------------------------------------------------------------
# Sample splitting


def honest_split(sample: EstimationSample, seed: int, min_leaf_per_arm: int = 5):
    """Stratified random halving into (train, honest) index arrays.

    Odd arm counts hand their extra observation alternately to train and
    honest, so the two halves differ in size by at most one.
    """
    counts = np.bincount(sample.d, minlength=N_ARMS)
    if np.any(counts < 2):
        raise DataError(f"every arm needs at least 2 observations, got counts {counts.tolist()}")
    if sample.n < 2 * N_ARMS * min_leaf_per_arm:
        raise DataError(f"sample of {sample.n} too small for min_leaf_per_arm={min_leaf_per_arm}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 31])))
    train, honest = [], []
    extra_to_train = True
    for arm in range(N_ARMS):
        members = rng.permutation(np.flatnonzero(sample.d == arm))
        half = len(members) // 2
        if len(members) % 2:
            cut = half + 1 if extra_to_train else half
            extra_to_train = not extra_to_train
        else:
            cut = half
        train.append(members[:cut])
        honest.append(members[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(honest))


# --------------------------------------------------------------------------
# Trees


@dataclass
class CausalTree:
    feature: np.ndarray
    threshold: np.ndarray
    catmask: np.ndarray
    left: np.ndarray
    right: np.ndarray
    honest_leaves: np.ndarray | None = None  # leaf id of every honest observation

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for node in range(self.n_nodes):
            if self.feature[node] != _tree.LEAF:
                depth[self.left[node]] = depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def apply(self, X, unordered) -> np.ndarray:
        return _tree.apply_tree(np.ascontiguousarray(X, dtype=float), unordered, self.feature,
                                self.threshold, self.catmask, self.left, self.right)

    def leaf_members(self, d_honest) -> dict[int, list[np.ndarray]]:
        """Honest row positions per leaf, split by arm."""
        out = {}
        for leaf in np.unique(self.honest_leaves):
            rows = np.flatnonzero(self.honest_leaves == leaf)
            out[int(leaf)] = [rows[d_honest[rows] == a] for a in range(N_ARMS)]
        return out

    def topology(self) -> tuple:
        return (self.feature.tobytes(), self.threshold.tobytes(), self.catmask.tobytes(),
                self.left.tobytes(), self.right.tobytes())


def build_tree(X, unordered, target, d, rows, params: ForestParams, seed: int) -> CausalTree:
    """Grow one causal tree on ``rows`` (a subsample of the training half)."""
    present = np.bincount(d[rows], minlength=N_ARMS)
    if np.any(present == 0):
        raise DataError(f"tree subsample lacks arm(s) {np.flatnonzero(present == 0).tolist()}")
    arrays = _tree.grow_tree(X, unordered, target, d, N_ARMS, rows.astype(np.int64), _tree.CAUSAL,
                             params.min_leaf_per_arm, params.resolved_mtry(X.shape[1]),
                             params.penalty_lambda, seed, params.max_depth)
    return CausalTree(*arrays)


def leaf_effect(y_honest, members: list[np.ndarray], m: int, l: int) -> float:
    """Mean honest outcome of arm ``m`` minus that of arm ``l`` within one leaf."""
    if len(members[m]) == 0 or len(members[l]) == 0:
        raise NumericalError(f"leaf has no honest observations of arm {m if not len(members[m]) else l}")
    return float(np.mean(y_honest[members[m]]) - np.mean(y_honest[members[l]]))


# --------------------------------------------------------------------------
# Auxiliary regression / classification forests


class RegressionForest:
    """Plain subsampled forest on the shared kernels (squared error or Gini)."""

    def __init__(self, n_trees=100, min_leaf=10, mtry=None, subsample_fraction=0.5,
                 classification=False, n_classes=N_ARMS, seed=0):
        self.n_trees = n_trees
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.subsample_fraction = subsample_fraction
        self.classification = classification
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, X, y, unordered):
        X = np.ascontiguousarray(X, dtype=float)
        _check_categories(X, unordered)
        n, p = X.shape
        mtry = self.mtry or max(1, math.ceil(p / 3))
        if self.classification:
            groups = np.asarray(y, dtype=np.int64)
            target = np.zeros(n)
            values = np.eye(self.n_classes)[groups]
            mode, n_groups = _tree.CLASSIFICATION, self.n_classes
        else:
            target = np.asarray(y, dtype=float)
            groups = np.zeros(n, dtype=np.int64)
            values = target[:, None]
            mode, n_groups = _tree.REGRESSION, 1
        size = max(2 * self.min_leaf, int(round(self.subsample_fraction * n)))
        self.unordered = unordered
        self.trees = []
        for t in range(self.n_trees):
            s_rng, s_tree = _seed_words(self.seed, 101, t)
            rng = np.random.Generator(np.random.PCG64(s_rng))
            rows = np.sort(rng.choice(n, size=min(size, n), replace=False)).astype(np.int64)
            arrays = _tree.grow_tree(X, unordered, target, groups, n_groups, rows, mode,
                                     self.min_leaf, min(mtry, p), 0.0, s_tree, -1)
            tree = CausalTree(*arrays)
            leaves = tree.apply(X[rows], unordered)
            self.trees.append((tree, _tree.leaf_means(leaves, values[rows], tree.n_nodes)))
        return self

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        acc = None
        for tree, means in self.trees:
            pred = means[tree.apply(X, self.unordered)]
            acc = pred if acc is None else acc + pred
        acc /= len(self.trees)
        return acc if self.classification else acc[:, 0]


def cross_fit(X, y, unordered, folds=2, seed=0, **kwargs):
    """Out-of-fold forest predictions for every row of ``X`` plus the fold models."""
    n = len(X)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 53])))
    fold = rng.permutation(np.arange(n) % folds)
    out, models = None, []
    for k in range(folds):
        fit_rows, pred_rows = fold != k, fold == k
        model = RegressionForest(seed=seed * 1000 + k, **kwargs).fit(X[fit_rows], y[fit_rows], unordered)
        pred = model.predict(X[pred_rows])
        if out is None:
            out = np.zeros((n,) + pred.shape[1:])
        out[pred_rows] = pred
        models.append(model)
    return out, models


def cross_fit_predict(X, y, unordered, folds=2, seed=0, **kwargs) -> np.ndarray:
    return cross_fit(X, y, unordered, folds, seed, **kwargs)[0]


# --------------------------------------------------------------------------
# Forest


@dataclass
class Forest:
    params: ForestParams
    trees: list[CausalTree]
    train_idx: np.ndarray
    honest_idx: np.ndarray
    d_honest: np.ndarray
    unordered: np.ndarray
    feature_names: list[str]
    honest_leaves: np.ndarray = field(repr=False, default=None)  # (n_trees, n_honest)
    # train-half outcome forecast at the honest rows (zeros without adjustment)
    honest_forecast: np.ndarray = field(repr=False, default=None)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def apply(self, X, threads: int | None = None) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=float)
        _check_categories(X, self.unordered)
        with ThreadPoolExecutor(max_workers=threads or default_threads()) as pool:
            leaves = list(pool.map(lambda t: t.apply(X, self.unordered), self.trees))
        return np.stack(leaves)


def _subsample(train_idx, d, fraction, rng) -> np.ndarray:
    rows = []
    for arm in range(N_ARMS):
        members = train_idx[d[train_idx] == arm]
        k = max(1, int(round(fraction * len(members))))
        rows.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(rows))


def centered_outcome(sample: EstimationSample, train_idx, params: ForestParams, X_other=None):
    """Training outcomes minus a cross-fitted outcome forecast.

    Returns the centered training outcomes and the forecast at ``X_other``
    (the fold models averaged), both built from the training half alone.
    """
    X = sample.X[train_idx]
    y = sample.y[train_idx].astype(float)
    if params.centering_trees <= 0:
        n_other = 0 if X_other is None else len(X_other)
        return y - y.mean(), np.full(n_other, y.mean())
    m_hat, models = cross_fit(X, y, sample.meta.unordered_mask, folds=2, seed=params.seed,
                              n_trees=params.centering_trees, min_leaf=10)
    other = None
    if X_other is not None:
        other = np.mean([m.predict(X_other) for m in models], axis=0)
    return y - m_hat, other


def build_forest(sample: EstimationSample, params: ForestParams, threads: int | None = None,
                 split=None) -> Forest:
    """Honest split, then ``n_trees`` causal trees on arm-stratified subsamples.

    Tree ``s`` draws its subsample and split randomness from a stream keyed by
    (seed, s), so the forest does not depend on the number of threads.
    """
    X = np.ascontiguousarray(sample.X, dtype=float)
    unordered = sample.meta.unordered_mask
    _check_categories(X, unordered)
    if split is None:
        split = honest_split(sample, params.seed, params.min_leaf_per_arm)
    train_idx, honest_idx = (np.asarray(a, dtype=np.int64) for a in split)
    if not params.honesty:
        honest_idx = np.arange(sample.n)
        train_idx = np.arange(sample.n)
    target = np.zeros(sample.n)
    target[train_idx], forecast = centered_outcome(sample, train_idx, params, X[honest_idx])
    if not params.outcome_adjustment or not params.honesty:
        forecast = np.zeros(len(honest_idx))
    d = sample.d.astype(np.int64)

    def grow(s):
        s_rng, s_tree = _seed_words(params.seed, 17, s)
        rng = np.random.Generator(np.random.PCG64(s_rng))
        rows = _subsample(train_idx, d, params.subsample_fraction, rng)
        try:
            tree = build_tree(X, unordered, target, d, rows, params, s_tree)
        except (DataError, NumericalError) as exc:
            raise type(exc)(f"tree {s}: {exc}") from exc
        tree.honest_leaves = tree.apply(X[honest_idx], unordered)
        return tree

    with ThreadPoolExecutor(max_workers=threads or default_threads()) as pool:
        trees = list(pool.map(grow, range(params.n_trees)))
    return Forest(params, trees, train_idx, honest_idx, d[honest_idx], unordered,
                  list(sample.meta.names), np.stack([t.honest_leaves for t in trees]), forecast)


# --------------------------------------------------------------------------
# Weights


@dataclass
class WeightMatrix:
    """Forest weights of honest observations for each query row.

    ``matrix[q, i]`` is the weight of honest observation ``i`` in the estimate
    of arm ``arms[i]`` at query ``q``; restricted to one arm's columns every
    supported row sums to one.
    """

    matrix: sparse.csr_matrix
    arms: np.ndarray
    trees_used: np.ndarray
    query_is_honest: bool = False

    @property
    def supported(self) -> np.ndarray:
        return self.trees_used > 0

    @property
    def shape(self):
        return self.matrix.shape

    def arm(self, a: int) -> sparse.csr_matrix:
        mask = sparse.diags((self.arms == a).astype(float))
        return (self.matrix @ mask).tocsr()

    def arm_indicator(self) -> np.ndarray:
        return (self.arms[:, None] == np.arange(N_ARMS)[None, :]).astype(float)

    def row_sums(self) -> np.ndarray:
        """(n_query, K) per-arm weight totals."""
        return np.asarray(self.matrix @ self.arm_indicator())

    def potential_outcomes(self, y) -> np.ndarray:
        """(n_query, K) weighted arm means of ``y``."""
        return np.asarray(self.matrix @ (self.arm_indicator() * np.asarray(y, float)[:, None]))

    def self_weights(self) -> np.ndarray:
        if not self.query_is_honest:
            raise ValueError("self weights need the honest sample as query set")
        return np.asarray(self.matrix.diagonal())


def compute_weights(forest: Forest, X_query, threads: int | None = None,
                    query_is_honest: bool = False) -> WeightMatrix:
    """Weighted representation of the forest at ``X_query``.

    Rows whose every tree leaf lacks some arm are unsupported (all-zero).
    """
    X_query = np.ascontiguousarray(X_query, dtype=float)
    if X_query.ndim != 2 or X_query.shape[1] != len(forest.feature_names):
        raise DataError("query columns do not match the training covariates")
    threads = threads or default_threads()
    q_leaf = forest.apply(X_query, threads)
    n_honest = len(forest.honest_idx)
    max_nodes = max(t.n_nodes for t in forest.trees)
    order = np.empty((forest.n_trees, n_honest), dtype=np.int32)
    start = np.zeros((forest.n_trees, max_nodes, N_ARMS), dtype=np.int32)
    count = np.zeros((forest.n_trees, max_nodes, N_ARMS), dtype=np.int32)
    for s, tree in enumerate(forest.trees):
        o, st, c = _tree.leaf_index(forest.honest_leaves[s], forest.d_honest, tree.n_nodes, N_ARMS)
        order[s] = o
        start[s, :tree.n_nodes] = st
        count[s, :tree.n_nodes] = c
    _set_numba_threads(threads)
    n_query = len(X_query)
    chunk = max(1, WEIGHT_CHUNK_BYTES // (8 * max(n_honest, 1)))
    blocks, used = [], []
    for r0 in range(0, n_query, chunk):
        r1 = min(n_query, r0 + chunk)
        dense, u = _tree.weight_rows(q_leaf, order, start, count, n_honest, r0, r1)
        blocks.append(sparse.csr_matrix(dense))
        used.append(u)
    matrix = sparse.vstack(blocks, format="csr") if blocks else sparse.csr_matrix((0, n_honest))
    return WeightMatrix(matrix, forest.d_honest.copy(),
                        np.concatenate(used) if used else np.zeros(0, dtype=np.int64),
                        query_is_honest)


def honest_weights(forest: Forest, sample: EstimationSample, threads: int | None = None) -> WeightMatrix:
    """Weights with the honest half itself as the prediction set."""
    return compute_weights(forest, sample.X[forest.honest_idx], threads, query_is_honest=True)


def forest_leaf_effects(forest: Forest, X_query, y_honest, m: int, l: int) -> np.ndarray:
    """Average over trees of the per-tree leaf effect (trees whose leaf lacks an arm abstain)."""
    q_leaf = forest.apply(X_query)
    out = np.full(len(X_query), np.nan)
    for q in range(len(X_query)):
        effects = []
        for s, tree in enumerate(forest.trees):
            rows = np.flatnonzero(forest.honest_leaves[s] == q_leaf[s, q])
            arms = forest.d_honest[rows]
            if np.all(np.bincount(arms, minlength=N_ARMS) > 0):
                members = [rows[arms == a] for a in range(N_ARMS)]
                effects.append(leaf_effect(y_honest, members, m, l))
        if effects:
            out[q] = np.mean(effects)
    return out


# --------------------------------------------------------------------------
# Serialization


FOREST_FORMAT = "honestforest/forest-v1"


def forest_to_json(forest: Forest) -> dict:
    return {
        "format": FOREST_FORMAT,
        "params": asdict(forest.params),
        "feature_names": list(forest.feature_names),
        "unordered": forest.unordered.astype(int).tolist(),
        "train_idx": forest.train_idx.tolist(),
        "honest_idx": forest.honest_idx.tolist(),
        "d_honest": forest.d_honest.tolist(),
        "honest_forecast": [float(v) for v in forest.honest_forecast],
        "trees": [{
            "feature": t.feature.tolist(),
            "threshold": t.threshold.tolist(),
            "catmask": [int(m) for m in t.catmask],
            "left": t.left.tolist(),
            "right": t.right.tolist(),
            "honest_leaves": t.honest_leaves.tolist(),
        } for t in forest.trees],
    }


def forest_from_json(data: dict) -> Forest:
    if data.get("format") != FOREST_FORMAT:
        raise DataError(f"not a forest container: format={data.get('format')!r}")
    trees = [CausalTree(np.array(t["feature"], dtype=np.int32), np.array(t["threshold"], dtype=float),
                        np.array(t["catmask"], dtype=np.uint64), np.array(t["left"], dtype=np.int32),
                        np.array(t["right"], dtype=np.int32), np.array(t["honest_leaves"], dtype=np.int32))
             for t in data["trees"]]
    return Forest(ForestParams(**data["params"]), trees, np.array(data["train_idx"], dtype=np.int64),
                  np.array(data["honest_idx"], dtype=np.int64), np.array(data["d_honest"], dtype=np.int64),
                  np.array(data["unordered"], dtype=bool), list(data["feature_names"]),
                  np.stack([t.honest_leaves for t in trees]),
                  np.array(data["honest_forecast"], dtype=float))


def save_forest(forest: Forest, path):
    """Write the forest as JSON (gzip-compressed when the name ends in ``.gz``)."""
    text = json.dumps(forest_to_json(forest), separators=(",", ":"))
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wt") as fh:
            fh.write(text)
    else:
        path.write_text(text)


def load_forest(path) -> Forest:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rt") as fh:
                data = json.load(fh)
        else:
            data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read forest {path}: {exc}") from exc
    return forest_from_json(data)

import json

import numpy as np
import pytest

from honestforest.causal_forest import (ForestParams, build_forest, build_tree, compute_weights,
                                        forest_leaf_effects, forest_to_json, honest_split,
                                        honest_weights, leaf_effect, load_forest, save_forest)
from honestforest.effects import estimate_iates, fit, honest_outcomes
from honestforest.errors import DataError, NumericalError, UsageError
from honestforest.sample import N_ARMS, EstimationSample, Feature, FeatureMetadata
from honestforest.synthetic_dgp import true_iate


def toy_sample(n, p=3, rng=None, d=None, y=None):
    rng = np.random.default_rng(0) if rng is None else rng
    meta = FeatureMetadata(tuple(Feature(f"x{j}") for j in range(p)))
    d = np.arange(n) % N_ARMS if d is None else d
    y = rng.integers(0, 2, n) if y is None else y
    return EstimationSample(y=y, d=d, X=rng.normal(size=(n, p)), meta=meta, z_names=())


# --------------------------------------------------------------------------
# honest split


def test_split_halves_balanced_sample():
    s = toy_sample(100)
    train, honest = honest_split(s, seed=1, min_leaf_per_arm=2)
    assert (len(train), len(honest)) == (50, 50)
    assert set(train).isdisjoint(honest) and len(set(train) | set(honest)) == 100
    for part in (train, honest):
        assert np.all(np.bincount(s.d[part], minlength=N_ARMS) > 0)


def test_split_odd_size_and_determinism():
    s = toy_sample(101)
    train, honest = honest_split(s, seed=1, min_leaf_per_arm=2)
    assert (len(train), len(honest)) == (51, 50)
    again = honest_split(s, seed=1, min_leaf_per_arm=2)
    assert np.array_equal(train, again[0]) and np.array_equal(honest, again[1])
    other = honest_split(s, seed=2, min_leaf_per_arm=2)
    assert not np.array_equal(train, other[0])


def test_split_errors():
    d = np.zeros(60, dtype=int)
    d[:3] = [1, 2, 3]
    with pytest.raises(DataError):
        honest_split(toy_sample(60, d=d), seed=0, min_leaf_per_arm=2)
    with pytest.raises(DataError):
        honest_split(toy_sample(30), seed=0, min_leaf_per_arm=5)


def test_params_validation():
    for bad in (dict(n_trees=0), dict(min_leaf_per_arm=1), dict(subsample_fraction=0.0),
                dict(subsample_fraction=1.5)):
        with pytest.raises(UsageError):
            ForestParams(**bad)


# --------------------------------------------------------------------------
# leaf effect


def test_leaf_effect_examples(rng):
    y = np.array([1, 0, 1, 0, 0], dtype=float)
    members = [np.array([3, 4]), np.array([], int), np.array([], int), np.array([0, 1, 2])]
    assert leaf_effect(y, members, 3, 0) == pytest.approx(2 / 3, abs=1e-12)
    same = [np.array([0, 1]), np.array([2, 3])]
    assert leaf_effect(np.array([1.0, 0.0, 1.0, 0.0]), same, 1, 0) == 0.0
    with pytest.raises(NumericalError):
        leaf_effect(y, members, 1, 0)
    # brute-force two-mean oracle on random tiny leaves
    for _ in range(20):
        yy = rng.random(9)
        mem = [np.sort(rng.choice(9, 3, replace=False)) for _ in range(N_ARMS)]
        oracle = sum(yy[mem[2]]) / 3 - sum(yy[mem[1]]) / 3
        assert leaf_effect(yy, mem, 2, 1) == pytest.approx(oracle, abs=1e-14)


# --------------------------------------------------------------------------
# tree growth


def _brute_force_score(target, d, x, thr, lam=1.0):
    """Spelled-out split objective: pairwise effect differences minus variance penalties."""
    left = x <= thr
    gain, pen = 0.0, 0.0
    nl, nr = left.sum(), (~left).sum()
    means = {}
    for side, mask in (("L", left), ("R", ~left)):
        for a in range(N_ARMS):
            v = target[mask & (d == a)]
            means[side, a] = v.mean()
            pen += (3 + lam * 9) * v.var(ddof=1) / len(v)
    for a in range(N_ARMS):
        for b in range(a + 1, N_ARMS):
            diff = (means["L", a] - means["L", b]) - (means["R", a] - means["R", b])
            gain += nl * nr * diff ** 2
    return gain - pen


def test_root_splits_on_effect_switch(rng):
    n = 400
    switch = (np.arange(n) % 2).astype(float)
    X = np.column_stack([rng.normal(size=n), switch, rng.normal(size=n)])
    d = (np.arange(n) // 2) % N_ARMS
    sign = np.where(switch == 1, 1.0, -1.0)
    target = 0.5 * sign * (d == 3) + 0.1 * rng.normal(size=n)
    rows = np.arange(n, dtype=np.int64)
    params = ForestParams(n_trees=1, mtry=3, min_leaf_per_arm=5, max_depth=1)
    tree = build_tree(X, np.zeros(3, bool), target, d.astype(np.int64), rows, params, seed=7)
    assert tree.feature[0] == 1
    # brute force over every candidate threshold of every feature
    best = (-np.inf, None)
    for j in range(3):
        vals = np.unique(X[:, j])
        for thr in (vals[:-1] + vals[1:]) / 2:
            left = X[:, j] <= thr
            if min(np.bincount(d[left], minlength=4).min(), np.bincount(d[~left], minlength=4).min()) < 5:
                continue
            score = _brute_force_score(target, d, X[:, j], thr)
            if score > best[0]:
                best = (score, j)
    assert best[1] == 1


def test_forced_stump():
    s = toy_sample(80)
    forest = build_forest(s, ForestParams(n_trees=5, min_leaf_per_arm=10, seed=1))
    assert all(t.n_nodes == 1 for t in forest.trees)


def test_tree_leaves_respect_min_leaf(small_world):
    _, sample, _ = small_world
    rows = np.arange(0, sample.n, 2, dtype=np.int64)
    params = ForestParams(n_trees=1, min_leaf_per_arm=6)
    unordered = sample.meta.unordered_mask
    target = sample.y - sample.y.mean()
    tree = build_tree(sample.X, unordered, target, sample.d, rows, params, seed=11)
    assert tree.n_nodes > 1
    leaves = tree.apply(sample.X[rows], unordered)
    for leaf in np.unique(leaves):
        assert tree.feature[leaf] == -1
        counts = np.bincount(sample.d[rows][leaves == leaf], minlength=N_ARMS)
        assert counts.min() >= 6


# --------------------------------------------------------------------------
# weights


def test_weight_rows_sum_to_one(small_fit):
    _, res = small_fit
    sums = res.weights.row_sums()[res.weights.supported]
    np.testing.assert_allclose(sums, 1.0, atol=1e-10)
    assert np.all(res.weights.matrix.data >= 0)


def test_weights_equal_tree_average_of_leaf_effects(small_fit):
    sample, res = small_fit
    forest = res.forest
    Xq = sample.X[:40]
    W = compute_weights(forest, Xq)
    adj = res.outcomes.adjusted
    po = W.potential_outcomes(adj)
    for m, l in ((3, 0), (2, 1)):
        brute = forest_leaf_effects(forest, Xq, adj, m, l)
        ok = W.supported
        np.testing.assert_allclose(po[ok, m] - po[ok, l], brute[ok], atol=1e-10)
        assert np.all(np.isnan(brute[~ok]))


def test_stump_forest_matches_brute_force(small_world):
    _, sample, _ = small_world
    params = ForestParams(n_trees=20, seed=4, max_depth=1, outcome_adjustment=False)
    forest = build_forest(sample, params)
    weights = honest_weights(forest, sample)
    iates = estimate_iates(weights, honest_outcomes(forest, sample, weights))
    Xh = sample.X[forest.honest_idx]
    yh = sample.y[forest.honest_idx]
    dh = forest.d_honest
    q = np.arange(0, len(Xh), 37)
    for m, l in ((3, 0), (1, 2)):
        brute = np.zeros(len(q))
        used = np.zeros(len(q))
        for tree in forest.trees:
            f = tree.feature[0]
            if f < 0:
                side = np.ones(len(Xh), bool)
            elif forest.unordered[f]:
                side = np.array([(int(tree.catmask[0]) >> int(v)) & 1 == 1 for v in Xh[:, f]])
            else:
                side = Xh[:, f] <= tree.threshold[0]
            for k, i in enumerate(q):
                grp = side == side[i]
                if all(np.any(grp & (dh == a)) for a in range(N_ARMS)):
                    brute[k] += yh[grp & (dh == m)].mean() - yh[grp & (dh == l)].mean()
                    used[k] += 1
        ok = used > 0
        np.testing.assert_allclose(iates.effect(m, l)[q][ok], brute[ok] / used[ok], atol=1e-12)


# --------------------------------------------------------------------------
# honesty and determinism


def test_permuting_honest_outcomes_keeps_topology(small_world, rng):
    _, sample, _ = small_world
    params = ForestParams(n_trees=15, seed=8)
    split = honest_split(sample, params.seed, params.min_leaf_per_arm)
    a = build_forest(sample, params, split=split)
    y = sample.y.copy()
    y[split[1]] = rng.permutation(y[split[1]])
    b = build_forest(EstimationSample(y, sample.d, sample.X, sample.meta), params, split=split)
    assert [t.topology() for t in a.trees] == [t.topology() for t in b.trees]


def test_thread_count_does_not_change_results(small_world):
    _, sample, _ = small_world
    params = ForestParams(n_trees=25, seed=3)
    one, eight = fit(sample, params, threads=1), fit(sample, params, threads=8)
    assert json.dumps(forest_to_json(one.forest)) == json.dumps(forest_to_json(eight.forest))
    assert one.ate().to_csv() == eight.ate().to_csv()
    assert one.iates.to_csv() == eight.iates.to_csv()


def test_save_load_round_trip(small_fit, tmp_path):
    sample, res = small_fit
    for name in ("forest.json", "forest.json.gz"):
        save_forest(res.forest, tmp_path / name)
        back = load_forest(tmp_path / name)
        assert [t.topology() for t in back.trees] == [t.topology() for t in res.forest.trees]
        w = compute_weights(back, sample.X[:30])
        assert (w.matrix != compute_weights(res.forest, sample.X[:30]).matrix).nnz == 0
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(DataError):
        load_forest(tmp_path / "bad.json")


def test_more_trees_lower_iate_error(small_world):
    _, sample, oracle = small_world
    errs = []
    for n_trees in (10, 200):
        res = fit(sample, ForestParams(n_trees=n_trees, seed=6))
        ok = res.iates.supported
        truth = true_iate(oracle, sample.X[res.forest.honest_idx], 3, 0)
        errs.append(np.sqrt(np.mean((res.iates.effect(3, 0)[ok] - truth[ok]) ** 2)))
    assert errs[1] < errs[0]

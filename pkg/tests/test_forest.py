import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixscan.forest import (
    LEAF,
    EvalMetrics,
    Forest,
    LabeledCorpus,
    TrainConfig,
    Tree,
    _best_split,
    _grow_tree,
    confusion,
    cross_validate,
    evaluate,
    oob_coverage,
    oob_error,
    permutation_importance,
    predict,
    split_train_test,
    train_forest,
)


def corpus(X, y):
    X = np.asarray(X, dtype=float)
    return LabeledCorpus([f"t{i}" for i in range(len(y))], X, np.asarray(y))


def separable(n=200, seed=0):
    """Label depends only on feature 2; the rest is noise."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 8))
    y = (X[:, 2] > 0.1).astype(int)
    return corpus(X, y)


def gini_scaled(ys):
    n = len(ys)
    if n == 0:
        return 0.0
    p = sum(ys) / n
    return n * 2 * p * (1 - p)


def brute_split(xs, ys, min_leaf=1):
    """Every midpoint between distinct sorted values, scored from scratch."""
    best = None
    vals = sorted(set(xs))
    for a, b in zip(vals, vals[1:]):
        thr = (a + b) / 2
        left = [y for x, y in zip(xs, ys) if x <= thr]
        right = [y for x, y in zip(xs, ys) if x > thr]
        if len(left) < min_leaf or len(right) < min_leaf:
            continue
        score = gini_scaled(left) + gini_scaled(right)
        if best is None or score < best[0] - 1e-9:
            best = (score, thr)
    return best


@settings(max_examples=200, deadline=None)
@given(
    data=st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=1, max_size=25),
    min_leaf=st.integers(1, 3),
)
def test_best_split_matches_exhaustive(data, min_leaf):
    data.sort(key=lambda d: d[0])
    xs = np.array([d[0] for d in data], dtype=float)
    ys = np.array([d[1] for d in data])
    got = _best_split(xs, ys, min_leaf)
    want = brute_split(xs.tolist(), ys.tolist(), min_leaf)
    if want is None:
        assert got is None
    else:
        assert got[0] == pytest.approx(want[0])
        assert got[1] == pytest.approx(want[1])


def test_root_split_is_global_best_with_lowest_index_tie():
    # features 1 and 3 separate equally well; feature 1 must win
    X = np.zeros((8, 8))
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    X[:, 1] = [0, 1, 2, 3, 10, 11, 12, 13]
    X[:, 3] = X[:, 1]
    X[:, 5] = [0, 10, 1, 11, 2, 12, 3, 13]
    tree = _grow_tree(X, y, np.arange(8), TrainConfig(n_trees=1, mtry=8), np.random.default_rng(0))
    assert tree.feature[0] == 1
    assert tree.threshold[0] == pytest.approx(6.5)
    assert (tree.predict(X) == y).all()


def test_constant_features_do_not_consume_mtry():
    X = np.zeros((10, 8))
    X[:, 7] = np.arange(10)
    y = (np.arange(10) >= 5).astype(int)
    for seed in range(10):
        tree = _grow_tree(X, y, np.arange(10), TrainConfig(n_trees=1, mtry=1), np.random.default_rng(seed))
        assert tree.feature[0] == 7


def test_tree_fits_training_data_exactly():
    c = separable()
    tree = _grow_tree(c.X, c.y, np.arange(len(c)), TrainConfig(mtry=8), np.random.default_rng(1))
    assert (tree.predict(c.X) == c.y).all()
    leaves = tree.feature == LEAF
    assert (tree.left[leaves] == LEAF).all()


def test_max_depth_and_min_leaf():
    c = separable(seed=3)
    stump = _grow_tree(c.X, c.y, np.arange(len(c)), TrainConfig(mtry=8, max_depth=1), np.random.default_rng(0))
    assert stump.n_nodes == 3
    with pytest.raises(ValueError):
        TrainConfig(min_leaf=0)
    with pytest.raises(ValueError):
        TrainConfig(mtry=9)
    with pytest.raises(ValueError):
        TrainConfig(n_trees=0)


def test_forest_deterministic_under_seed():
    c = separable()
    a = train_forest(c, TrainConfig(n_trees=30, rng_seed=5))
    b = train_forest(c, TrainConfig(n_trees=30, rng_seed=5))
    other = train_forest(c, TrainConfig(n_trees=30, rng_seed=6))
    assert [t.to_dict() for t in a.trees] == [t.to_dict() for t in b.trees]
    assert [t.to_dict() for t in a.trees] != [t.to_dict() for t in other.trees]
    assert oob_error(a, c) == oob_error(b, c)


def test_bootstrap_leaves_out_about_one_over_e():
    c = separable(n=300)
    means = []
    for seed in range(100):
        f = train_forest(c, TrainConfig(n_trees=5, rng_seed=seed, max_depth=1))
        means.append(oob_coverage(f).mean())
    assert abs(np.mean(means) - math.exp(-1)) <= 0.05
    assert all(abs(m - math.exp(-1)) <= 0.05 for m in means)


def test_separable_accuracy_and_oob():
    c = separable(n=600)
    train, test = split_train_test(c, 0.7, seed=0)
    f = train_forest(train, TrainConfig(n_trees=60, rng_seed=0))
    assert evaluate(f, test).accuracy >= 0.95
    assert oob_error(f, train) <= 0.05


def test_vote_tie_goes_negative():
    yes = Tree(np.array([LEAF]), np.array([0.0]), np.array([LEAF]), np.array([LEAF]), np.array([1]))
    no = Tree(np.array([LEAF]), np.array([0.0]), np.array([LEAF]), np.array([LEAF]), np.array([0]))
    f = Forest([yes, no], TrainConfig(n_trees=2))
    assert predict(f, np.zeros(8)) == 0
    assert predict(Forest([yes, no, yes], TrainConfig(n_trees=3)), np.zeros(8)) == 1


def test_save_load_roundtrip(tmp_path):
    c = separable()
    f = train_forest(c, TrainConfig(n_trees=10, rng_seed=2))
    f.save(tmp_path / "m.json")
    g = Forest.load(tmp_path / "m.json")
    assert (g.predict(c.X) == f.predict(c.X)).all()
    assert g.config == f.config
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["format_version"] == 1 and doc["n_trees"] == 10
    with pytest.raises(ValueError):
        oob_error(g, c)
    doc["format_version"] = 2
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        Forest.load(tmp_path / "bad.json")


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_forest(corpus(np.zeros((5, 8)), [1] * 5))
    with pytest.raises(ValueError):
        train_forest(corpus(np.zeros((0, 8)), []))


def test_metrics_and_zero_denominators():
    m = confusion([1, 1, 0, 0], [1, 0, 1, 0])
    assert m == EvalMetrics(tp=1, fp=1, tn=1, fn=1)
    assert m.accuracy == 0.5 and m.fpr == 0.5 and m.fnr == 0.5
    assert m.csv_row("x") == "x,0.500000,0.500000,0.500000"
    empty = EvalMetrics(0, 0, 0, 0)
    assert empty.accuracy == empty.fpr == empty.fnr == 0.0


def test_split_sizes_and_seed():
    c = separable(n=100)
    tr, te = split_train_test(c, 0.7, seed=0)
    assert len(tr) == 70 and len(te) == 30
    assert set(tr.ids).isdisjoint(te.ids)
    tr2, _ = split_train_test(c, 0.7, seed=1)
    assert tr.ids != tr2.ids
    with pytest.warns(UserWarning):
        split_train_test(c, 1.0)


def test_permutation_importance_finds_the_signal():
    c = separable(n=400)
    tr, te = split_train_test(c, 0.7, seed=0)
    f = train_forest(tr, TrainConfig(n_trees=40, rng_seed=0))
    imp = permutation_importance(f, te, seed=0)
    assert max(imp, key=imp.get) == f.feature_names[2]


def test_cross_validate():
    scores = cross_validate(separable(n=300), TrainConfig(n_trees=20), folds=5, seed=0)
    assert len(scores) == 5 and scores.min() >= 0.9

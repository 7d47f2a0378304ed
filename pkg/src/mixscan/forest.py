"""Bagged decision forest (Gini, axis-aligned splits) with out-of-bag error.

Labels are 0/1 with 1 = Wasabi CoinJoin. Vote ties go to 0.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .wasabi import FEATURE_NAMES

FORMAT_VERSION = 1
LEAF = -1


@dataclass
class LabeledCorpus:
    ids: list[str]
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y) or len(self.ids) != len(self.y):
            raise ValueError("ids, X and y must have matching lengths")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> LabeledCorpus:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledCorpus([self.ids[i] for i in idx], self.X[idx], self.y[idx])


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 500
    mtry: int = 2
    rng_seed: int = 0
    max_depth: int | None = None
    min_leaf: int = 1

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 1 <= self.mtry <= len(FEATURE_NAMES):
            raise ValueError(f"mtry must be in [1, {len(FEATURE_NAMES)}]")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            active = feat != LEAF
            if not active.any():
                break
            r, n, f = rows[active], node[active], feat[active]
            go_left = X[r, f] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
        return self.value[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.int64),
        )


@dataclass
class Forest:
    trees: list[Tree]
    config: TrainConfig
    # per-tree bootstrap multiplicities over the training rows; None after load
    inbag: list[np.ndarray] | None = None
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def votes(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        total = np.zeros(len(X), dtype=np.int64)
        for tree in self.trees:
            total += tree.predict(X)
        return total

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (2 * self.votes(X) > len(self.trees)).astype(np.int64)

    def save(self, path: str | Path) -> None:
        doc = {
            "format_version": FORMAT_VERSION,
            "n_trees": len(self.trees),
            "mtry": self.config.mtry,
            "seed": self.config.rng_seed,
            "max_depth": self.config.max_depth,
            "min_leaf": self.config.min_leaf,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }
        Path(path).write_text(json.dumps(doc, separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Forest:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {doc.get('format_version')!r}")
        if tuple(doc["feature_names"]) != FEATURE_NAMES:
            raise ValueError("model feature names do not match this build")
        cfg = TrainConfig(
            n_trees=doc["n_trees"],
            mtry=doc["mtry"],
            rng_seed=doc["seed"],
            max_depth=doc.get("max_depth"),
            min_leaf=doc.get("min_leaf", 1),
        )
        trees = [Tree.from_dict(t) for t in doc["trees"]]
        if len(trees) != cfg.n_trees:
            raise ValueError("tree count does not match header")
        return cls(trees, cfg, None, tuple(doc["feature_names"]))


def predict(forest: Forest, x) -> int:
    """Majority vote for a single feature vector (or array-like row)."""
    row = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=np.float64)
    return int(forest.predict(row.reshape(1, -1))[0])


def _best_split(xs: np.ndarray, ys: np.ndarray, min_leaf: int):
    """Best Gini split of one sorted feature column.

    Returns (weighted impurity, threshold) or None when no valid split exists.
    """
    n = len(xs)
    if n < 2 * min_leaf:
        return None
    pos = np.cumsum(ys)[:-1].astype(np.float64)
    n_left = np.arange(1, n, dtype=np.float64)
    n_right = n - n_left
    total_pos = float(pos[-1] + ys[-1]) if n > 1 else float(ys[0])
    pos_right = total_pos - pos
    valid = xs[:-1] < xs[1:]
    valid &= (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    # n_node * weighted Gini = 2*l_pos*l_neg/n_l + 2*r_pos*r_neg/n_r
    score = 2 * pos * (n_left - pos) / n_left + 2 * pos_right * (n_right - pos_right) / n_right
    score = np.where(valid, score, np.inf)
    i = int(np.argmin(score))
    lo, hi = xs[i], xs[i + 1]
    thr = lo + (hi - lo) / 2
    if thr >= hi:
        thr = lo
    return float(score[i]), float(thr)


def _grow_tree(X: np.ndarray, y: np.ndarray, sample: np.ndarray, cfg: TrainConfig, rng) -> Tree:
    n_features = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node() -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, sample, 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys_node = y[idx]
        n_pos = int(ys_node.sum())
        # majority label, ties to the negative class
        value[node] = 1 if 2 * n_pos > len(idx) else 0
        if n_pos == 0 or n_pos == len(idx):
            continue
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            continue

        candidates = []
        evaluated = 0
        for f in rng.permutation(n_features):
            col = X[idx, f]
            order = np.argsort(col, kind="stable")
            xs = col[order]
            if xs[0] == xs[-1]:
                continue
            evaluated += 1
            found = _best_split(xs, ys_node[order], cfg.min_leaf)
            if found is not None:
                candidates.append((int(f), *found))
            if evaluated >= cfg.mtry:
                break
        if not candidates:
            continue
        candidates.sort(key=lambda c: c[0])
        best_f, best_score, best_thr = candidates[0]
        for f, score, thr in candidates[1:]:
            if score < best_score - 1e-9:
                best_f, best_score, best_thr = f, score, thr

        go_left = X[idx, best_f] <= best_thr
        feature[node] = best_f
        threshold[node] = best_thr
        lnode, rnode = new_node(), new_node()
        left[node], right[node] = lnode, rnode
        stack.append((rnode, idx[~go_left], depth + 1))
        stack.append((lnode, idx[go_left], depth + 1))

    return Tree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.int64),
    )


def train_forest(train: LabeledCorpus, cfg: TrainConfig = TrainConfig()) -> Forest:
    if len(train) == 0:
        raise ValueError("empty training corpus")
    if len(np.unique(train.y)) < 2:
        raise ValueError("training corpus must contain both classes")
    n = len(train)
    streams = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_trees)
    trees, inbag = [], []
    for stream in streams:
        rng = np.random.default_rng(stream)
        sample = rng.integers(0, n, size=n)
        trees.append(_grow_tree(train.X, train.y, sample, cfg, rng))
        inbag.append(np.bincount(sample, minlength=n).astype(np.int32))
    return Forest(trees, cfg, inbag)


def oob_error(forest: Forest, train: LabeledCorpus) -> float:
    if forest.inbag is None:
        raise ValueError("forest has no bootstrap records (loaded from file?)")
    n = len(train)
    votes = np.zeros(n, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    for tree, bag in zip(forest.trees, forest.inbag):
        if len(bag) != n:
            raise ValueError("training corpus does not match the forest's bootstrap records")
        oob = np.flatnonzero(bag == 0)
        if len(oob) == 0:
            continue
        votes[oob] += tree.predict(train.X[oob])
        counts[oob] += 1
    scored = counts > 0
    if not scored.any():
        return 0.0
    pred = (2 * votes[scored] > counts[scored]).astype(np.int64)
    return float(np.mean(pred != train.y[scored]))


def oob_coverage(forest: Forest) -> np.ndarray:
    """Fraction of training rows left out of each tree's bootstrap."""
    return np.array([float(np.mean(bag == 0)) for bag in forest.inbag])


@dataclass(frozen=True)
class EvalMetrics:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def fpr(self) -> float:
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0

    @property
    def fnr(self) -> float:
        pos = self.fn + self.tp
        return self.fn / pos if pos else 0.0

    def csv_row(self, method: str) -> str:
        return f"{method},{self.accuracy:.6f},{self.fpr:.6f},{self.fnr:.6f}"


def confusion(y_true, y_pred) -> EvalMetrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return EvalMetrics(
        tp=int(np.sum((y_true == 1) & (y_pred == 1))),
        fp=int(np.sum((y_true == 0) & (y_pred == 1))),
        tn=int(np.sum((y_true == 0) & (y_pred == 0))),
        fn=int(np.sum((y_true == 1) & (y_pred == 0))),
    )


def evaluate(forest: Forest, test: LabeledCorpus) -> EvalMetrics:
    return confusion(test.y, forest.predict(test.X) if len(test) else [])


def split_train_test(corpus: LabeledCorpus, train_fraction: float = 0.7, seed: int = 0):
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must be in (0, 1]")
    n = len(corpus)
    n_train = int(round(n * train_fraction))
    if n_train == n:
        warnings.warn("train_fraction leaves an empty test set", stacklevel=2)
    perm = np.random.default_rng(seed).permutation(n)
    return corpus.subset(np.sort(perm[:n_train])), corpus.subset(np.sort(perm[n_train:]))


def permutation_importance(forest: Forest, test: LabeledCorpus, seed: int = 0) -> dict[str, float]:
    """Accuracy drop when one feature column is shuffled on held-out data."""
    rng = np.random.default_rng(seed)
    base = evaluate(forest, test).accuracy
    drops = {}
    for j, name in enumerate(forest.feature_names):
        X = test.X.copy()
        X[:, j] = rng.permutation(X[:, j])
        drops[name] = base - confusion(test.y, forest.predict(X)).accuracy
    return drops


def cross_validate(corpus: LabeledCorpus, cfg: TrainConfig, folds: int = 5, seed: int = 0) -> np.ndarray:
    """Per-fold test accuracy of k-fold cross-validation."""
    perm = np.random.default_rng(seed).permutation(len(corpus))
    parts = np.array_split(perm, folds)
    scores = []
    for k in range(folds):
        test_idx = np.sort(parts[k])
        train_idx = np.sort(np.concatenate([p for i, p in enumerate(parts) if i != k]))
        forest = train_forest(corpus.subset(train_idx), cfg)
        scores.append(evaluate(forest, corpus.subset(test_idx)).accuracy)
    return np.asarray(scores)

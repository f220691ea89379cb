"""Exchange-address classifier: Gini CART trees and a bagged random forest."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .features import (FEATURE_NAMES, N_FEATURES, InsufficientData, NormalizationParams,
                       extract_features, feature_matrix, fit_normalizer)

log = logging.getLogger(__name__)

MODEL_FORMAT = "btctrace-model"
MODEL_VERSION = 1


class ModelUntrained(Exception):
    pass


class DatasetConflict(ValueError):
    def __init__(self, address: str):
        super().__init__(f"address {address} is both a positive and a negative seed")
        self.address = address


@dataclass
class ForestParams:
    n_trees: int = 600
    max_depth: int = 40
    threshold: float = 0.5
    features_per_split: int | None = int(math.isqrt(N_FEATURES))
    min_samples_leaf: int = 1
    bootstrap: bool = True

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth,
                "threshold": self.threshold, "features_per_split": self.features_per_split,
                "min_samples_leaf": self.min_samples_leaf, "bootstrap": self.bootstrap}


TREE_PARAMS = ForestParams(n_trees=1, features_per_split=None, bootstrap=False)


@dataclass
class DecisionTree:
    feature: list[int] = field(default_factory=list)      # -1 marks a leaf
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)      # positive-class probability
    degenerate: bool = False

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.feature[node] >= 0:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best

    def used_features(self) -> set[int]:
        return {f for f in self.feature if f >= 0}

    def predict_proba_one(self, x) -> float:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return self.value[node]

    def to_dict(self) -> dict:
        return {"feature": self.feature, "threshold": self.threshold, "left": self.left,
                "right": self.right, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls([int(v) for v in d["feature"]], [float(v) for v in d["threshold"]],
                   [int(v) for v in d["left"]], [int(v) for v in d["right"]],
                   [float(v) for v in d["value"]])


def _best_split(xcol: np.ndarray, y: np.ndarray, min_leaf: int):
    """Lowest weighted-Gini split of one feature; returns (score, threshold) or None.

    score is n_left * gini_left + n_right * gini_right.
    """
    order = np.argsort(xcol, kind="stable")
    xs = xcol[order]
    ys = y[order]
    n = len(ys)
    valid = np.nonzero(xs[:-1] < xs[1:])[0]
    if min_leaf > 1:
        valid = valid[(valid + 1 >= min_leaf) & (n - valid - 1 >= min_leaf)]
    if len(valid) == 0:
        return None
    cum = np.cumsum(ys)
    total = cum[-1]
    nl = valid + 1.0
    pl = cum[valid]
    nr = n - nl
    pr = total - pl
    score = 2.0 * pl * (nl - pl) / nl + 2.0 * pr * (nr - pr) / nr
    i = int(np.argmin(score))
    k = valid[i]
    return float(score[i]), float((xs[k] + xs[k + 1]) / 2.0)


def train_tree(X, y, params: ForestParams = TREE_PARAMS, rng=None) -> DecisionTree:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 1:
        raise InsufficientData("cannot train on an empty set")
    rng = rng if rng is not None else np.random.default_rng(0)
    n_feat = X.shape[1]
    k = params.features_per_split or n_feat
    tree = DecisionTree()
    if len(np.unique(y)) < 2:
        tree.degenerate = True

    def new_node(value):
        tree.feature.append(-1)
        tree.threshold.append(0.0)
        tree.left.append(-1)
        tree.right.append(-1)
        tree.value.append(value)
        return len(tree.feature) - 1

    root = new_node(float(y.mean()))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        pos = ys.sum()
        n = len(ys)
        parent = 2.0 * pos * (n - pos) / n
        if depth >= params.max_depth or parent == 0.0 or n < 2 * params.min_samples_leaf:
            continue
        feats = rng.permutation(n_feat) if k < n_feat else np.arange(n_feat)
        best = None
        seen = 0
        for f in feats:
            xcol = X[idx, f]
            if xcol.min() == xcol.max():
                continue
            seen += 1
            res = _best_split(xcol, ys, params.min_samples_leaf)
            if res is not None and (best is None or res[0] < best[0]):
                best = (res[0], res[1], int(f))
            if seen >= k:
                break
        if best is None or not best[0] < parent - 1e-12:
            continue
        _, thr, f = best
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        l_node = new_node(float(y[li].mean()))
        r_node = new_node(float(y[ri].mean()))
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = l_node
        tree.right[node] = r_node
        stack.append((r_node, ri, depth + 1))
        stack.append((l_node, li, depth + 1))
    return tree


class Forest:
    """Bagged trees stored as flat arrays for vectorized prediction."""

    def __init__(self, trees: list[DecisionTree], params: ForestParams,
                 normalizer: NormalizationParams | None = None, seed: int | None = None):
        self.trees = trees
        self.params = params
        self.normalizer = normalizer
        self.seed = seed
        self._flatten()

    @property
    def degenerate(self) -> bool:
        return any(t.degenerate for t in self.trees)

    def _flatten(self) -> None:
        offs, off = [], 0
        feats, thr, left, right, val = [], [], [], [], []
        for t in self.trees:
            offs.append(off)
            feats += t.feature
            thr += t.threshold
            left += [c + off if c >= 0 else -1 for c in t.left]
            right += [c + off if c >= 0 else -1 for c in t.right]
            val += t.value
            off += t.n_nodes
        self._roots = np.array(offs, dtype=np.int64)
        self._feat = np.array(feats, dtype=np.int64)
        self._thr = np.array(thr, dtype=float)
        self._left = np.array(left, dtype=np.int64)
        self._right = np.array(right, dtype=np.int64)
        self._val = np.array(val, dtype=float)
        self._is_leaf = self._feat < 0
        self._safe_feat = np.where(self._is_leaf, 0, self._feat)

    def predict_proba(self, X) -> np.ndarray:
        """Mean leaf probability over trees for each (already normalized) row."""
        if not self.trees:
            raise ModelUntrained("forest has no trees")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        nodes = np.broadcast_to(self._roots, (X.shape[0], len(self._roots))).copy()
        rows = np.arange(X.shape[0])[:, None]
        while True:
            leaf = self._is_leaf[nodes]
            if leaf.all():
                break
            go_left = X[rows, self._safe_feat[nodes]] <= self._thr[nodes]
            nxt = np.where(go_left, self._left[nodes], self._right[nodes])
            nodes = np.where(leaf, nodes, nxt)
        return self._val[nodes].mean(axis=1)

    def used_features(self) -> set[int]:
        return set().union(*(t.used_features() for t in self.trees)) if self.trees else set()

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": "random_forest" if self.params.n_trees > 1 or self.params.bootstrap else "decision_tree",
            "params": self.params.to_dict(),
            "seed": self.seed,
            "feature_names": list(FEATURE_NAMES),
            "normalizer": self.normalizer.to_dict() if self.normalizer else None,
            "trees": [t.to_dict() for t in self.trees],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def train_forest(X, y, params: ForestParams = ForestParams(), rng=None, seed: int = 0) -> Forest:
    """Bootstrap-aggregated trees; each tree gets its own child seed."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2:
        raise InsufficientData("need at least 2 samples")
    if len(np.unique(y)) < 2:
        log.warning("DegenerateData: training labels contain a single class")
    ss = np.random.SeedSequence(seed)
    trees = []
    for child in ss.spawn(params.n_trees):
        trng = np.random.default_rng(child)
        if params.bootstrap:
            idx = trng.integers(0, len(y), size=len(y))
        else:
            idx = np.arange(len(y))
        trees.append(train_tree(X[idx], y[idx], params, trng))
    return Forest(trees, params, seed=seed)


def fit_model(X_raw, y, params: ForestParams = ForestParams(), seed: int = 0) -> Forest:
    """Fit the z-score normalizer on X_raw, then train on the normalized matrix."""
    norm = fit_normalizer(X_raw)
    model = train_forest(norm.transform(X_raw), y, params, seed=seed)
    model.normalizer = norm
    return model


def load_model(path) -> Forest:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: not a version {MODEL_VERSION} model file")
    p = d["params"]
    params = ForestParams(p["n_trees"], p["max_depth"], p["threshold"],
                          p["features_per_split"], p["min_samples_leaf"], p["bootstrap"])
    norm = NormalizationParams.from_dict(d["normalizer"]) if d.get("normalizer") else None
    return Forest([DecisionTree.from_dict(t) for t in d["trees"]], params, norm, d.get("seed"))


def predict(model: Forest | None, vector) -> tuple[float, bool]:
    """Probability and label for one normalized vector (label uses >=)."""
    if model is None or not model.trees:
        raise ModelUntrained("no trained model")
    prob = float(model.predict_proba(vector)[0])
    return prob, prob >= model.params.threshold


def predict_raw(model: Forest, raw_vector) -> tuple[float, bool]:
    if model is None or not model.trees:
        raise ModelUntrained("no trained model")
    vec = model.normalizer.transform(raw_vector) if model.normalizer else raw_vector
    return predict(model, vec)


class ModelClassifier:
    """Adapter used by the explorer: address -> is exchange."""

    def __init__(self, model: Forest, store, clusters):
        self.model = model
        self.store = store
        self.clusters = clusters
        self.calls = 0

    def is_exchange(self, address: str) -> bool:
        self.calls += 1
        return predict_raw(self.model, extract_features(self.store, self.clusters, address))[1]


class StaticClassifier:
    """Fixed answer set; for fixtures and controlled experiments."""

    def __init__(self, positives=()):
        self.positives = set(positives)
        self.calls = 0

    def is_exchange(self, address: str) -> bool:
        self.calls += 1
        return address in self.positives


# -- metrics -------------------------------------------------------------------

def confusion(y_true, y_pred) -> dict:
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    return {"tp": int((t & p).sum()), "fp": int((~t & p).sum()),
            "fn": int((t & ~p).sum()), "tn": int((~t & ~p).sum())}


def prf(cm: dict) -> dict:
    tp, fp, fn = cm["tp"], cm["fp"], cm["fn"]
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def evaluate(model: Forest, X_raw, y) -> dict:
    X = model.normalizer.transform(X_raw) if model.normalizer else np.asarray(X_raw, float)
    prob = model.predict_proba(X)
    cm = confusion(y, prob >= model.params.threshold)
    return {**prf(cm), "confusion": cm}


def roc_points(y_true, prob) -> list[tuple[float, float, float]]:
    y = np.asarray(y_true).astype(bool)
    prob = np.asarray(prob, dtype=float)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    pts = []
    for thr in [math.inf] + sorted(set(prob.tolist()), reverse=True):
        pred = prob >= thr
        tpr = (pred & y).sum() / n_pos if n_pos else 0.0
        fpr = (pred & ~y).sum() / n_neg if n_neg else 0.0
        pts.append((thr, float(tpr), float(fpr)))
    return pts


def export_roc(path, points) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "tpr", "fpr"])
        for thr, tpr, fpr in points:
            w.writerow(["inf" if math.isinf(thr) else repr(thr), repr(tpr), repr(fpr)])


# -- splits and cross-validation ---------------------------------------------------

def stratified_folds(y, k: int, seed: int = 0) -> np.ndarray:
    """Fold index per row; each class is spread round-robin after a seeded shuffle."""
    y = np.asarray(y)
    if k < 2:
        raise InsufficientData("k must be at least 2")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    for cls in np.unique(y):
        idx = np.nonzero(y == cls)[0]
        if len(idx) < k:
            raise InsufficientData(f"class {cls} has fewer than {k} rows")
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % k
    return folds


def stratified_split(y, test_fraction: float = 0.2, seed: int = 0) -> np.ndarray:
    """Boolean mask of test rows; per-class test share is round(fraction * count)."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    test = np.zeros(len(y), dtype=bool)
    for cls in np.unique(y):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        test[idx[:int(round(test_fraction * len(idx)))]] = True
    return test


def cross_validate(X_raw, y, k: int = 5, params: ForestParams = ForestParams(),
                   seed: int = 0) -> dict:
    X_raw = np.asarray(X_raw, dtype=float)
    y = np.asarray(y)
    if len(np.unique(y)) < 2:
        raise InsufficientData("cross-validation needs both classes")
    folds = stratified_folds(y, k, seed)
    per_fold = []
    for f in range(k):
        tr, te = folds != f, folds == f
        model = fit_model(X_raw[tr], y[tr], params, seed=seed + f)
        m = evaluate(model, X_raw[te], y[te])
        per_fold.append({"fold": f, **m})
    mean = {key: float(np.mean([m[key] for m in per_fold])) for key in ("precision", "recall", "f1")}
    return {"folds": per_fold, "mean": mean}


# -- dataset assembly ----------------------------------------------------------

@dataclass
class LabeledDataset:
    addresses: list[str]
    X: np.ndarray
    y: np.ndarray
    provenance: list[str]
    test_mask: np.ndarray | None = None

    def split(self, test_fraction: float = 0.2, seed: int = 0) -> "LabeledDataset":
        self.test_mask = stratified_split(self.y, test_fraction, seed)
        return self

    def train(self):
        return self.X[~self.test_mask], self.y[~self.test_mask]

    def test(self):
        return self.X[self.test_mask], self.y[self.test_mask]


def _expand(clusters, seeds: list[str], taken: set[str], banned: set[str], quota: int,
            rng) -> list[tuple[str, str]]:
    queues = []
    for s in seeds:
        members = [m for m in clusters.members_of(s) if m != s] if clusters else []
        members.sort()
        rng.shuffle(members)
        queues.append((s, [s] + members))
    out: list[tuple[str, str]] = []
    pos = [0] * len(queues)
    progress = True
    while len(out) < quota and progress:
        progress = False
        for qi, (seed, q) in enumerate(queues):
            while pos[qi] < len(q):
                a = q[pos[qi]]
                pos[qi] += 1
                if a in taken or a in banned:
                    continue
                taken.add(a)
                out.append((a, "seed" if a == seed else f"cluster:{seed}"))
                progress = True
                break
            if len(out) >= quota:
                break
    return out


def assemble_dataset(store, clusters, positive_seeds, negative_seeds,
                     target_size: int | None = None, seed: int = 0) -> LabeledDataset:
    """Balanced dataset grown from seeds through their multi-input clusters."""
    pos = list(dict.fromkeys(positive_seeds))
    neg = list(dict.fromkeys(negative_seeds))
    if not pos or not neg:
        raise InsufficientData("both seed lists must be non-empty")
    both = sorted(set(pos) & set(neg))
    if both:
        raise DatasetConflict(both[0])
    rng = np.random.default_rng(seed)

    def capacity(seeds, banned):
        pool = set()
        for s in seeds:
            pool.update(clusters.members_of(s) if clusters else (s,))
        return len(pool - banned)

    per_class = target_size // 2 if target_size else min(capacity(pos, set(neg)),
                                                         capacity(neg, set(pos)))
    taken: set[str] = set()
    p_rows = _expand(clusters, pos, taken, set(neg), per_class, rng)
    n_rows = _expand(clusters, neg, taken, set(pos), per_class, rng)
    if len(p_rows) < per_class or len(n_rows) < per_class or per_class == 0:
        raise InsufficientData(
            f"cannot balance: {len(p_rows)} positive, {len(n_rows)} negative, need {per_class} each")
    rows = p_rows + n_rows
    addrs = [a for a, _ in rows]
    y = np.array([1] * len(p_rows) + [0] * len(n_rows))
    return LabeledDataset(addrs, feature_matrix(store, clusters, addrs), y, [p for _, p in rows])

"""Random forests and gradient-boosted trees, built on a shared exact-greedy CART core.

Features are pre-binned to their sorted unique training values, so split search
at a node is a handful of ``np.bincount`` calls per candidate feature. A split
sends ``x <= threshold`` left; thresholds are midpoints between adjacent
observed training values. Entropy uses the natural log.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

from . import _rng
from .errors import SingleClass, ValidationError

FORMAT_VERSION = 1
MAX_FEATURES = ("sqrt", "log2", "all")
CRITERIA = ("gini", "entropy")


@dataclass(frozen=True)
class TreeHyperparams:
    max_depth: int = 10
    max_features: str = "log2"
    min_samples_leaf: int = 8
    min_samples_split: int = 10
    n_estimators: int = 600
    criterion: str = "entropy"
    bootstrap: bool = True

    def __post_init__(self):
        for name in ("max_depth", "min_samples_leaf", "min_samples_split", "n_estimators"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.min_samples_leaf > self.min_samples_split:
            raise ValidationError("min_samples_leaf must not exceed min_samples_split")
        if self.max_features not in MAX_FEATURES:
            raise ValidationError(f"max_features must be one of {MAX_FEATURES}")
        if self.criterion not in CRITERIA:
            raise ValidationError(f"criterion must be one of {CRITERIA}")


@dataclass(frozen=True)
class BoostHyperparams:
    n_estimators: int = 1000
    max_depth: int = 3
    learning_rate: float = 0.01
    subsample: float = 0.8
    colsample_bytree: float = 0.6
    colsample_bylevel: float = 0.9
    reg_lambda: float = 1.0
    min_samples_leaf: int = 1

    def __post_init__(self):
        if self.n_estimators < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValidationError("n_estimators, max_depth and min_samples_leaf must be positive")
        for name in ("learning_rate", "subsample", "colsample_bytree", "colsample_bylevel"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"{name} must lie in (0, 1]")
        if self.reg_lambda < 0:
            raise ValidationError("reg_lambda must be non-negative")


# ---------------------------------------------------------------- tree core

@dataclass
class Tree:
    """Parallel arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(np.asarray(X, dtype=np.float64))]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value", "n_samples")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], np.int64), np.array(d["threshold"], np.float64),
                   np.array(d["left"], np.int64), np.array(d["right"], np.int64),
                   np.array(d["value"], np.float64), np.array(d["n_samples"], np.int64))


class _Binned:
    """Training matrix mapped to per-feature ranks of its unique values."""

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if not np.isfinite(X).all():
            raise ValidationError("feature matrix contains non-finite values")
        self.uniques = [np.unique(X[:, j]) for j in range(X.shape[1])]
        self.codes = np.empty(X.shape, dtype=np.int32)
        for j, u in enumerate(self.uniques):
            self.codes[:, j] = np.searchsorted(u, X[:, j])
        self.n_bins = np.array([len(u) for u in self.uniques])

    def threshold(self, j: int, lo_bin: int) -> float:
        # midpoint to the next training value overall, not the next one in the node, so
        # routing of any training value depends only on its rank
        u = self.uniques[j]
        return float((u[lo_bin] + u[lo_bin + 1]) / 2.0)


def _impurity(pos: np.ndarray, n: np.ndarray, criterion: str) -> np.ndarray:
    p = np.divide(pos, n, out=np.zeros_like(pos, dtype=np.float64), where=n > 0)
    if criterion == "gini":
        return 2.0 * p * (1.0 - p)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log(p), 0.0) + np.where(p < 1, (1 - p) * np.log(1 - p), 0.0))
    return h


class _Builder:
    """Depth-first CART growth shared by classification and residual trees.

    Callers pass a ``stats`` callback returning the gain of every boundary
    between present bins; they also own leaf values.
    """

    def __init__(self, binned: _Binned, max_depth: int, min_leaf: int, min_split: int):
        self.b = binned
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.min_split = min_split
        self.feature, self.threshold, self.left, self.right, self.value, self.n = [], [], [], [], [], []

    def _new(self, value: float, n: int) -> int:
        for lst, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1),
                       (self.value, value), (self.n, n)):
            lst.append(v)
        return len(self.feature) - 1

    def best_split(self, rows: np.ndarray, features: Sequence[int], stats: Callable, limit: int | None = None):
        """Best (gain, feature, threshold) over ``features`` in order.

        With ``limit`` set, only that many non-constant features are examined
        (constant ones are skipped without counting), as random forests do.
        """
        best = None
        examined = 0
        for j in features:
            if limit is not None and examined >= limit:
                break
            codes = self.b.codes[rows, j]
            nb = int(self.b.n_bins[j])
            cnt = np.bincount(codes, minlength=nb)
            present = np.flatnonzero(cnt)
            if len(present) < 2:
                continue
            examined += 1
            gains = stats(codes, nb, cnt, present)
            if gains is None:
                continue
            k = int(np.argmax(gains))
            g = float(gains[k])
            if not np.isfinite(g):
                continue
            if best is None or g > best[0] + 1e-12:
                best = (g, j, self.b.threshold(j, present[k]))
        return best

    def arrays(self) -> Tree:
        return Tree(np.array(self.feature, np.int64), np.array(self.threshold, np.float64),
                    np.array(self.left, np.int64), np.array(self.right, np.int64),
                    np.array(self.value, np.float64), np.array(self.n, np.int64))


def _leaf_ok(n_left: np.ndarray, n_total: int, min_leaf: int) -> np.ndarray:
    return (n_left >= min_leaf) & (n_total - n_left >= min_leaf)


def grow_classifier(binned: _Binned, y: np.ndarray, rows: np.ndarray, hp: TreeHyperparams,
                    rng: np.random.Generator) -> Tree:
    """One CART classification tree on ``rows`` (duplicates allowed); leaves hold P(y=1)."""
    p = binned.codes.shape[1]
    k = {"sqrt": max(1, int(math.sqrt(p))), "log2": max(1, int(math.log2(p))) if p > 1 else 1, "all": p}[hp.max_features]
    bld = _Builder(binned, hp.max_depth, hp.min_samples_leaf, hp.min_samples_split)
    yf = y.astype(np.float64)

    def stats_for(node_rows):
        n = len(node_rows)
        pos_total = float(yf[node_rows].sum())
        parent = float(_impurity(np.array([pos_total]), np.array([float(n)]), hp.criterion)[0]) * n

        def stats(codes, nb, cnt, present):
            pos = np.bincount(codes, weights=yf[node_rows], minlength=nb)
            nl = np.cumsum(cnt)[present[:-1]].astype(np.float64)
            pl = np.cumsum(pos)[present[:-1]]
            ok = _leaf_ok(nl, n, hp.min_samples_leaf)
            if not ok.any():
                return None
            nr, pr = n - nl, pos_total - pl
            child = _impurity(pl, nl, hp.criterion) * nl + _impurity(pr, nr, hp.criterion) * nr
            return np.where(ok, parent - child, -np.inf)
        return stats, pos_total / n

    stack = [(rows, 0, -1, False)]
    while stack:
        node_rows, depth, parent, is_left = stack.pop()
        stats, prob = stats_for(node_rows)
        me = bld._new(prob, len(node_rows))
        if parent >= 0:
            (bld.left if is_left else bld.right)[parent] = me
        if depth >= hp.max_depth or len(node_rows) < hp.min_samples_split or prob in (0.0, 1.0):
            continue
        order = rng.permutation(p)
        best = bld.best_split(node_rows, order, stats, limit=k)
        if best is None or best[0] < -1e-12:
            continue
        _, j, thr = best
        go_left = binned.uniques[j][binned.codes[node_rows, j]] <= thr
        bld.feature[me], bld.threshold[me] = j, thr
        # push right first so the left subtree is numbered first
        stack.append((node_rows[~go_left], depth + 1, me, False))
        stack.append((node_rows[go_left], depth + 1, me, True))
    return bld.arrays()


def grow_regressor(binned: _Binned, grad: np.ndarray, hess: np.ndarray, rows: np.ndarray,
                   features: np.ndarray, hp: BoostHyperparams, rng: np.random.Generator) -> Tree:
    """Depth-limited residual tree: variance-reduction splits, Newton-step leaves.

    ``grad`` holds negative gradients (y - p). Columns are re-sampled per depth
    level from ``features`` according to ``colsample_bylevel``.
    """
    bld = _Builder(binned, hp.max_depth, hp.min_samples_leaf, 2 * hp.min_samples_leaf)
    level_feats: dict[int, np.ndarray] = {}

    def feats_at(depth):
        if depth not in level_feats:
            m = max(1, int(round(len(features) * hp.colsample_bylevel)))
            level_feats[depth] = np.sort(rng.choice(features, size=m, replace=False)) if m < len(features) else features
        return level_feats[depth]

    stack = [(rows, 0, -1, False)]
    while stack:
        node_rows, depth, parent, is_left = stack.pop()
        g = grad[node_rows]
        G, H, n = float(g.sum()), float(hess[node_rows].sum()), len(node_rows)
        me = bld._new(G / (H + hp.reg_lambda), n)
        if parent >= 0:
            (bld.left if is_left else bld.right)[parent] = me
        if depth >= hp.max_depth or n < 2 * hp.min_samples_leaf or np.ptp(g) == 0:
            continue

        def stats(codes, nb, cnt, present, g=g, G=G, n=n):
            s = np.bincount(codes, weights=g, minlength=nb)
            nl = np.cumsum(cnt)[present[:-1]].astype(np.float64)
            gl = np.cumsum(s)[present[:-1]]
            ok = _leaf_ok(nl, n, hp.min_samples_leaf)
            if not ok.any():
                return None
            gain = gl ** 2 / nl + (G - gl) ** 2 / (n - nl) - G ** 2 / n
            return np.where(ok, gain, -np.inf)

        best = bld.best_split(node_rows, feats_at(depth), stats)
        if best is None or best[0] < -1e-12:
            continue
        _, j, thr = best
        go_left = binned.uniques[j][binned.codes[node_rows, j]] <= thr
        bld.feature[me], bld.threshold[me] = j, thr
        stack.append((node_rows[~go_left], depth + 1, me, False))
        stack.append((node_rows[go_left], depth + 1, me, True))
    return bld.arrays()


# ---------------------------------------------------------------- models

def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int8)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise ValidationError("X must be 2-D with one row per label")
    if len(np.unique(y)) < 2:
        raise SingleClass("both classes must be present")
    return X, y


def _map_ordered(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass
class ForestModel:
    trees: list[Tree]
    feature_names: list[str]
    hyperparams: TreeHyperparams
    seed: int

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        total = np.zeros(X.shape[0])
        for t in self.trees:
            total += t.predict(X)
        return total / len(self.trees)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": "forest", "feature_names": self.feature_names,
                "seed": self.seed, "hyperparams": asdict(self.hyperparams),
                "trees": [t.to_dict() for t in self.trees]}


@dataclass
class BoostedModel:
    trees: list[Tree]
    feature_names: list[str]
    hyperparams: BoostHyperparams
    seed: int
    base_score: float
    train_loss: list[float] = field(default_factory=list)

    def raw_score(self, X, n_stages: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.full(X.shape[0], self.base_score)
        for t in self.trees[:n_stages]:
            out += self.hyperparams.learning_rate * t.predict(X)
        return out

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.raw_score(X))

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "kind": "boosted", "feature_names": self.feature_names,
                "seed": self.seed, "hyperparams": asdict(self.hyperparams), "base_score": self.base_score,
                "trees": [t.to_dict() for t in self.trees]}


def model_to_json(model: ForestModel | BoostedModel) -> str:
    return json.dumps(model.to_dict(), sort_keys=True) + "\n"


def model_from_json(text: str) -> ForestModel | BoostedModel:
    d = json.loads(text)
    if d.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported model format version {d.get('format_version')!r}")
    trees = [Tree.from_dict(t) for t in d["trees"]]
    if d["kind"] == "forest":
        return ForestModel(trees, d["feature_names"], TreeHyperparams(**d["hyperparams"]), d["seed"])
    if d["kind"] == "boosted":
        return BoostedModel(trees, d["feature_names"], BoostHyperparams(**d["hyperparams"]), d["seed"],
                            d["base_score"])
    raise ValidationError(f"unknown model kind {d['kind']!r}")


def fit_forest(X, y, hp: TreeHyperparams = TreeHyperparams(), seed: int = 42,
               feature_names: Sequence[str] | None = None, workers: int = 1) -> ForestModel:
    """Bagged CART classifiers; each tree draws its own seed from ``seed`` and its index."""
    X, y = _check_xy(X, y)
    binned = _Binned(X)
    n = X.shape[0]

    def one(i):
        rng = _rng.numpy_rng(seed, f"tree/{i}")
        rows = rng.integers(0, n, size=n) if hp.bootstrap else np.arange(n)
        return grow_classifier(binned, y, np.sort(rows), hp, rng)

    trees = _map_ordered(one, range(hp.n_estimators), workers)
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]
    return ForestModel(trees, names, hp, seed)


def log_loss(y: np.ndarray, raw: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def fit_boosted(X, y, hp: BoostHyperparams = BoostHyperparams(), seed: int = 42,
                feature_names: Sequence[str] | None = None, track_loss: bool = False) -> BoostedModel:
    """Stagewise logistic boosting from the base-rate log-odds."""
    X, y = _check_xy(X, y)
    binned = _Binned(X)
    n, p = X.shape
    yf = y.astype(np.float64)
    rate = yf.mean()
    base = math.log(rate / (1.0 - rate))
    raw = np.full(n, base)
    rng = _rng.numpy_rng(seed, "boost")
    n_rows = max(1, int(round(n * hp.subsample)))
    n_cols = max(1, int(round(p * hp.colsample_bytree)))
    trees, losses = [], [log_loss(yf, raw)] if track_loss else []
    for _ in range(hp.n_estimators):
        prob = expit(raw)
        grad = yf - prob
        hess = prob * (1.0 - prob)
        rows = np.sort(rng.choice(n, size=n_rows, replace=False)) if n_rows < n else np.arange(n)
        cols = np.sort(rng.choice(p, size=n_cols, replace=False)) if n_cols < p else np.arange(p)
        tree = grow_regressor(binned, grad, hess, rows, cols, hp, rng)
        trees.append(tree)
        raw += hp.learning_rate * tree.predict(X)
        if track_loss:
            losses.append(log_loss(yf, raw))
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(p)]
    return BoostedModel(trees, names, hp, seed, base, losses)


# ---------------------------------------------------------------- grid search

REFERENCE_FOREST_GRID: dict[str, tuple] = {
    "bootstrap": (True,),
    "max_depth": (10, 20, 30, 40, 50, 60, 70, 80, 90, 100),
    "max_features": ("sqrt", "log2"),
    "min_samples_leaf": (1, 2, 4, 8),
    "min_samples_split": (2, 5, 10),
    "n_estimators": (400, 600, 800, 1000, 1200, 1400, 1600, 1800, 2000),
    "criterion": ("gini", "entropy"),
}
REFERENCE_BOOST_GRID: dict[str, tuple] = {
    "subsample": (0.7, 0.8, 0.9),
    "n_estimators": (100, 500, 1000),
    "max_depth": (3, 5, 6, 10, 15, 20),
    "learning_rate": (0.01, 0.1, 0.2, 0.3, 0.4),
    "colsample_bytree": (0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    "colsample_bylevel": (0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
}


def grid_points(grid: dict[str, Sequence]) -> list[dict[str, Any]]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_size(grid: dict[str, Sequence]) -> int:
    return math.prod(len(v) for v in grid.values())


def stratified_folds(y: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Test-row indices of ``k`` stratified folds (each sorted)."""
    rng = _rng.numpy_rng(seed, "folds")
    folds = [[] for _ in range(k)]
    for cls in np.unique(y):
        rows = np.flatnonzero(y == cls)
        rows = rows[rng.permutation(len(rows))]
        for f in range(k):
            folds[f].append(rows[f::k])
    return [np.sort(np.concatenate(f)) for f in folds]


@dataclass
class GridResult:
    best_params: dict[str, Any]
    best_score: float
    trial_count: int
    n_fits: int
    scores: list[float | None]


def grid_search(X, y, grid: dict[str, Sequence], kind: str = "forest", folds: int = 3, seed: int = 42,
                metric: Callable[[np.ndarray, np.ndarray], float] | None = None) -> GridResult:
    """Exhaustive cross-validated search; the first grid point wins ties.

    Combinations that violate the hyperparameter invariants are counted but
    scored ``None`` and never selected.
    """
    from .evaluation import roc_and_auc

    if not grid or grid_size(grid) == 0:
        raise ValidationError("grid must be non-empty")
    if kind not in ("forest", "boosted"):
        raise ValidationError("kind must be 'forest' or 'boosted'")
    X, y = _check_xy(X, y)
    metric = metric or (lambda s, lab: roc_and_auc(s, lab)[1])
    cls = TreeHyperparams if kind == "forest" else BoostHyperparams
    valid = {f.name for f in fields(cls)}
    test_folds = stratified_folds(y, folds, seed)
    points = grid_points(grid)
    scores: list[float | None] = []
    best, best_score = None, -math.inf
    for params in points:
        unknown = set(params) - valid
        if unknown:
            raise ValidationError(f"unknown hyperparameters {sorted(unknown)}")
        try:
            hp = cls(**params)
        except ValidationError:
            scores.append(None)
            continue
        fold_scores = []
        for f, test in enumerate(test_folds):
            train = np.setdiff1d(np.arange(len(y)), test)
            s = _rng.sub_seed(seed, f"fold/{f}")
            if kind == "forest":
                m = fit_forest(X[train], y[train], hp, s)
            else:
                m = fit_boosted(X[train], y[train], hp, s)
            fold_scores.append(metric(m.predict_proba(X[test]), y[test]))
        score = float(np.mean(fold_scores))
        scores.append(score)
        if score > best_score:
            best, best_score = params, score
    if best is None:
        raise ValidationError("no grid point satisfies the hyperparameter constraints")
    return GridResult(best, best_score, len(points), len(points) * folds, scores)

"""Yeo-Johnson power transform, random oversampling and stratified splitting.

Everything here is fitted on training rows only; the fitted objects are then
applied, unchanged, to held-out rows.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .errors import DegenerateColumn, SingleClass, TooSmall, ValidationError

LAMBDA_GRID = np.round(np.arange(-200, 201) * 0.01, 2)
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def yj(x, lam: float):
    """Yeo-Johnson transform of ``x`` (scalar or array)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    xp, xn = x[pos], -x[~pos]
    if lam == 0.0:
        out[pos] = np.log1p(xp)
    else:
        out[pos] = np.expm1(lam * np.log1p(xp)) / lam
    if lam == 2.0:
        out[~pos] = -np.log1p(xn)
    else:
        out[~pos] = -np.expm1((2.0 - lam) * np.log1p(xn)) / (2.0 - lam)
    return out if out.ndim else float(out)


def yj_inverse(y, lam: float):
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    pos = y >= 0
    yp, yn = y[pos], y[~pos]
    if lam == 0.0:
        out[pos] = np.expm1(yp)
    else:
        out[pos] = np.expm1(np.log1p(lam * yp) / lam)
    if lam == 2.0:
        out[~pos] = -np.expm1(-yn)
    else:
        out[~pos] = -np.expm1(np.log1p(-(2.0 - lam) * yn) / (2.0 - lam))
    return out if out.ndim else float(out)


def yj_loglik(x: np.ndarray, lam: float, weights: np.ndarray | None = None) -> float:
    """Gaussian profile log-likelihood of the transformed column (up to a constant).

    ``weights`` lets callers pass unique values with their multiplicities.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64)
    n = w.sum()
    t = yj(x, lam)
    mu = np.dot(w, t) / n
    var = np.dot(w, (t - mu) ** 2) / n
    if var <= 0 or not np.isfinite(var):
        return -np.inf
    return -0.5 * n * math.log(var) + (lam - 1.0) * float(np.dot(w, np.sign(x) * np.log1p(np.abs(x))))


def fit_lambda(column) -> float:
    """Maximum-likelihood Yeo-Johnson lambda.

    Scans [-2, 2] in steps of 0.01, then refines around the best grid point by
    golden-section search until the bracket is narrower than 1e-4.
    """
    x, w = np.unique(np.asarray(column, dtype=np.float64), return_counts=True)
    if len(x) < 2:
        raise DegenerateColumn("power transform needs at least two distinct values")
    f = lambda lam: yj_loglik(x, lam, w)
    ll = np.array([f(float(l)) for l in LAMBDA_GRID])
    best = int(np.argmax(ll))
    a = float(LAMBDA_GRID[max(best - 1, 0)])
    b = float(LAMBDA_GRID[min(best + 1, len(LAMBDA_GRID) - 1)])
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > 1e-4:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    lam = (a + b) / 2.0
    # never return something worse than the grid optimum
    return lam if f(lam) >= ll[best] else float(LAMBDA_GRID[best])


def data_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass
class PowerTransform:
    """Per-column Yeo-Johnson lambdas followed by z-standardisation.

    Columns that are constant on the training rows keep lambda = 1, mean 0 and
    sd 1 (the identity), since no lambda can be estimated for them.
    """

    lambdas: list[float] = field(default_factory=list)
    means: list[float] = field(default_factory=list)
    sds: list[float] = field(default_factory=list)
    standardize: bool = True
    fitted_digest: str | None = None
    fitted_rows: int = 0

    def fit(self, X: np.ndarray) -> "PowerTransform":
        X = np.asarray(X, dtype=np.float64)
        self.lambdas, self.means, self.sds = [], [], []
        for j in range(X.shape[1]):
            col = X[:, j]
            try:
                lam = fit_lambda(col)
            except DegenerateColumn:
                self.lambdas.append(1.0)
                self.means.append(0.0)
                self.sds.append(1.0)
                continue
            t = yj(col, lam)
            sd = float(t.std())
            self.lambdas.append(lam)
            self.means.append(float(t.mean()) if self.standardize else 0.0)
            self.sds.append(sd if self.standardize and sd > 0 else 1.0)
        self.fitted_digest = data_digest(X)
        self.fitted_rows = X.shape[0]
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.fitted_digest is None:
            raise ValidationError("PowerTransform used before fit")
        if X.shape[1] != len(self.lambdas):
            raise ValidationError("column count differs from the fitted transform")
        out = np.empty_like(X)
        for j, lam in enumerate(self.lambdas):
            out[:, j] = (yj(X[:, j], lam) - self.means[j]) / self.sds[j]
        return out

    def to_json(self, column_names: list[str] | None = None) -> str:
        names = column_names or [f"x{j}" for j in range(len(self.lambdas))]
        cols = [{"column": n, "lambda": l, "mean": m, "sd": s}
                for n, l, m, s in zip(names, self.lambdas, self.means, self.sds)]
        return json.dumps({"standardize": self.standardize, "columns": cols}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PowerTransform":
        doc = json.loads(text)
        cols = doc["columns"]
        return cls([c["lambda"] for c in cols], [c["mean"] for c in cols], [c["sd"] for c in cols],
                   doc.get("standardize", True), fitted_digest="loaded", fitted_rows=0)


def _check_two_classes(labels: np.ndarray) -> None:
    if len(np.unique(labels)) < 2:
        raise SingleClass("both classes must be present")


def random_oversample(X: np.ndarray, labels: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Duplicate randomly chosen minority rows until both classes are equally frequent.

    Original rows come first, in their original order; duplicates are appended.
    """
    labels = np.asarray(labels)
    _check_two_classes(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if counts[0] == counts[1]:
        return X, labels
    minority = classes[np.argmin(counts)]
    pool = np.flatnonzero(labels == minority)
    rng = _rng.numpy_rng(seed, "oversample")
    extra = rng.choice(pool, size=int(counts.max() - counts.min()), replace=True)
    return np.concatenate([X, X[extra]]), np.concatenate([labels, labels[extra]])


@dataclass(frozen=True)
class SplitPlan:
    train_fraction: float = 0.9
    seed: int = 42
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must lie in (0, 1)")


def _n_train(n: int, frac: float) -> int:
    k = int(math.floor(n * frac + 0.5))
    if n >= 2:
        k = min(max(k, 1), n - 1)
    return k


def split(labels: np.ndarray, plan: SplitPlan) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (train, test), each sorted ascending.

    Stratified plans split each class separately, keeping at least one row of
    every class with two or more rows on each side.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 10:
        raise TooSmall(f"need at least 10 rows to split, got {n}")
    rng = _rng.numpy_rng(plan.seed, "split")
    if plan.stratified:
        _check_two_classes(labels)
        train, test = [], []
        for cls in np.unique(labels):
            rows = np.flatnonzero(labels == cls)
            rows = rows[rng.permutation(len(rows))]
            k = _n_train(len(rows), plan.train_fraction)
            train.append(rows[:k])
            test.append(rows[k:])
        return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    rows = rng.permutation(n)
    k = _n_train(n, plan.train_fraction)
    return np.sort(rows[:k]), np.sort(rows[k:])

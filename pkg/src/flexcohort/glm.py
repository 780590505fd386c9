"""Logistic regression by IRLS with Wald inference, univariate screens and forward selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from ._format import render
from .errors import ColumnMismatch, Singular, ValidationError

Z95 = 1.959963984540054
ODDS_COLUMNS = ["feature", "or", "ci_low", "ci_high", "p", "aor", "aci_low", "aci_high", "ap"]


@dataclass
class LogisticModel:
    feature_names: list[str]
    beta: np.ndarray  # intercept first
    covariance: np.ndarray
    converged: bool
    n_iterations: int
    log_likelihood: float
    separated: bool = False

    @property
    def intercept(self) -> float:
        return float(self.beta[0])

    @property
    def coef(self) -> np.ndarray:
        return self.beta[1:]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self) -> dict:
        return {"kind": "logistic", "feature_names": list(self.feature_names),
                "beta": self.beta.tolist(), "covariance": self.covariance.tolist(),
                "converged": self.converged, "n_iterations": self.n_iterations,
                "log_likelihood": self.log_likelihood}

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(list(d["feature_names"]), np.array(d["beta"], float), np.array(d["covariance"], float),
                   bool(d["converged"]), int(d["n_iterations"]), float(d["log_likelihood"]))


def _design(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return np.hstack([np.ones((X.shape[0], 1)), X])


def aliased_columns(X, tol: float = 1e-9) -> list[int]:
    """Indices of columns that are constant or linear combinations of earlier columns.

    Columns are scanned left to right against the intercept plus the columns
    kept so far, so the earliest of a set of collinear columns survives.
    """
    A = _design(X)
    kept = A[:, :1]
    out = []
    for j in range(1, A.shape[1]):
        cand = np.hstack([kept, A[:, j:j + 1]])
        sv = np.linalg.svd(cand, compute_uv=False)
        if sv[-1] <= tol * sv[0]:
            out.append(j - 1)
        else:
            kept = cand
    return out


def log_likelihood(beta: np.ndarray, A: np.ndarray, y: np.ndarray) -> float:
    """Bernoulli log-likelihood for design ``A`` (intercept column included)."""
    eta = A @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def gradient(beta: np.ndarray, A: np.ndarray, y: np.ndarray) -> np.ndarray:
    return A.T @ (y - expit(A @ beta))


def _penalized(beta, A, y, ridge):
    return log_likelihood(beta, A, y) - 0.5 * ridge * float(beta[1:] @ beta[1:])


def fit_logistic(X, y, feature_names: Sequence[str] | None = None, *, max_iter: int = 100,
                 tol: float = 1e-8, ridge: float = 1e-8) -> LogisticModel:
    """Maximum-likelihood logistic fit.

    Newton / IRLS steps on the ridge-penalised likelihood, halving the step
    whenever the objective would decrease. The intercept is not penalised.
    Complete separation leaves ``converged`` False rather than raising.
    """
    y = np.asarray(y, dtype=np.float64)
    A = _design(X)
    n, k = A.shape
    if len(y) != n:
        raise ValidationError("X and y have different numbers of rows")
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(k - 1)]
    if len(names) != k - 1:
        raise ValidationError("feature_names length does not match X")
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise Singular("design matrix is rank deficient")

    pen = np.full(k, ridge)
    pen[0] = 0.0
    mean = y.mean()
    beta = np.zeros(k)
    if 0 < mean < 1:
        beta[0] = math.log(mean / (1 - mean))
    obj = _penalized(beta, A, y, ridge)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(A @ beta)
        w = mu * (1 - mu)
        H = (A * w[:, None]).T @ A + np.diag(pen)
        g = A.T @ (y - mu) - pen * beta
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise Singular("information matrix is singular") from None
        t = 1.0
        while True:
            cand = beta + t * step
            new = _penalized(cand, A, y, ridge)
            if new >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        delta = np.max(np.abs(cand - beta))
        beta, obj = cand, new
        if delta < tol:
            converged = True
            break

    mu = expit(A @ beta)
    separated = float(np.max(np.abs(y - mu))) < 1e-6
    if separated:
        converged = False
    w = mu * (1 - mu)
    H = (A * w[:, None]).T @ A + np.diag(pen)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(H)
    cov = (cov + cov.T) / 2
    return LogisticModel(names, beta, cov, converged, it, log_likelihood(beta, A, y), separated)


def predict_proba(model: LogisticModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if feature_names is not None and list(feature_names) != list(model.feature_names):
        raise ColumnMismatch("feature columns differ from the fitted model")
    if X.shape[1] != len(model.feature_names):
        raise ColumnMismatch(f"expected {len(model.feature_names)} columns, got {X.shape[1]}")
    return expit(model.intercept + X @ model.coef)


@dataclass(frozen=True)
class OddsRow:
    feature: str
    odds_ratio: float
    ci_low: float
    ci_high: float
    p_value: float
    error: str | None = None


def wald_row(feature: str, beta: float, se: float) -> OddsRow:
    z = beta / se if se > 0 else (0.0 if beta == 0 else math.copysign(math.inf, beta))
    p = float(2 * stats.norm.sf(abs(z)))
    return OddsRow(feature, math.exp(beta), math.exp(beta - Z95 * se), math.exp(beta + Z95 * se), min(p, 1.0))


def odds_table(model: LogisticModel) -> list[OddsRow]:
    se = model.se
    return [wald_row(name, float(model.beta[j + 1]), float(se[j + 1]))
            for j, name in enumerate(model.feature_names)]


def univariate_screen(X, y, feature_names: Sequence[str]) -> list[OddsRow]:
    """One single-predictor fit per column; failures become rows carrying the error."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValidationError("univariate screen needs at least one feature")
    rows = []
    for j, name in enumerate(feature_names):
        try:
            m = fit_logistic(X[:, [j]], y, [name])
            rows.append(odds_table(m)[0])
        except Singular as exc:
            nan = float("nan")
            rows.append(OddsRow(name, nan, nan, nan, nan, f"Singular: {exc}"))
    return rows


@dataclass
class SelectionStep:
    feature: str
    lr_statistic: float
    p_value: float


@dataclass
class Selection:
    selected: list[str]
    model: LogisticModel
    steps: list[SelectionStep] = field(default_factory=list)


def forward_select(X, y, feature_names: Sequence[str], entry_p: float = 0.05) -> Selection:
    """Greedy forward selection by likelihood-ratio test.

    Each round adds the candidate with the largest LR statistic, provided its
    chi-square(1) p-value is below ``entry_p``. Candidates are scanned in name
    order so equal statistics resolve to the alphabetically first feature.
    Candidates whose addition makes the design singular are skipped.
    """
    X = np.asarray(X, dtype=np.float64)
    names = list(feature_names)
    if not names:
        raise ValidationError("forward selection needs at least one candidate")
    col = {n: j for j, n in enumerate(names)}
    chosen: list[str] = []
    current = fit_logistic(np.empty((X.shape[0], 0)), y, [])
    steps = []
    while True:
        best = None
        for name in sorted(set(names) - set(chosen)):
            trial = chosen + [name]
            try:
                m = fit_logistic(X[:, [col[c] for c in trial]], y, trial)
            except Singular:
                continue
            stat = max(2.0 * (m.log_likelihood - current.log_likelihood), 0.0)
            if best is None or stat > best[0] + 1e-9:
                best = (stat, name, m)
        if best is None:
            break
        stat, name, m = best
        p = float(stats.chi2.sf(stat, 1))
        if not p < entry_p:
            break
        chosen.append(name)
        current = m
        steps.append(SelectionStep(name, stat, p))
    return Selection(chosen, current, steps)


def format_p(p: float) -> str:
    if math.isnan(p):
        return "p = n/a"
    return "p < 0.01" if p < 0.01 else f"p = {p:.2f}"


def format_odds(row: OddsRow) -> str:
    """Display form such as ``1.51 (1.35, 1.69) p < 0.01``."""
    if row.error:
        return row.error
    return f"{row.odds_ratio:.2f} ({row.ci_low:.2f}, {row.ci_high:.2f}) {format_p(row.p_value)}"


def odds_report(univariate: Sequence[OddsRow], adjusted: Sequence[OddsRow], fmt: str = "csv") -> str:
    """Univariate and adjusted odds ratios side by side, one row per feature.

    Features absent from the adjusted model get empty adjusted cells.
    """
    adj = {r.feature: r for r in adjusted}
    rows = []
    for r in univariate:
        a = adj.get(r.feature)
        cells = [r.feature, r.odds_ratio, r.ci_low, r.ci_high, r.p_value]
        cells += [a.odds_ratio, a.ci_low, a.ci_high, a.p_value] if a else ["", "", "", ""]
        rows.append(cells)
    return render(ODDS_COLUMNS, rows, fmt)


__all__ = ["LogisticModel", "OddsRow", "Selection", "fit_logistic", "predict_proba", "odds_table",
           "univariate_screen", "forward_select", "format_odds", "odds_report", "gradient", "log_likelihood"]

"""Elastic net by cyclic coordinate descent, with CV over a lambda path.

Objective minimised at each lambda, on internally standardised columns::

    (1/2n) ||y - b0 - X b||^2 + lam * (alpha ||b||_1 + (1 - alpha)/2 ||b||_2^2)
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .rng import SplitMix64

SD_FLOOR = 1e-12


class ConvergenceError(RuntimeError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass
class ElasticNetConfig:
    alpha: float = 0.5
    path_length: int = 100
    path_ratio: float = 1e-3
    tol: float = 1e-7
    max_sweeps: int = 100_000
    folds: int | None = None  # None: 5, or 3 when n < 200
    feature_cap: int | None = None  # None: number of rows
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.folds is not None and self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.feature_cap is not None and self.feature_cap < 1:
            raise ValueError("feature_cap must be >= 1")
        if self.path_length < 1 or not 0 < self.path_ratio < 1:
            raise ValueError("invalid lambda path settings")

    def resolve_folds(self, n: int) -> int:
        if self.folds is not None:
            return self.folds
        return 3 if n < 200 else 5


@dataclass
class PathFit:
    """Solution at one lambda on the standardised scale."""

    intercept: float
    beta: np.ndarray
    lam: float
    alpha: float
    sweeps: int


@dataclass
class ElasticNetFit:
    intercept: float
    coefficients: np.ndarray
    lambda_: float
    alpha: float
    column_means: np.ndarray
    column_sds: np.ndarray
    dropped_columns: list[str]
    active_set_size: int
    columns: list[str] = field(default_factory=list)

    def to_json(self, cv: "CvResult | None" = None, seed: int | None = None) -> str:
        doc = {
            "intercept": self.intercept,
            "coefficients": [{"name": n, "coefficient": float(c)} for n, c in zip(self.columns, self.coefficients)],
            "lambda": self.lambda_,
            "alpha": self.alpha,
            "seed": seed,
            "dropped_columns": list(self.dropped_columns),
            "active_set_size": self.active_set_size,
            "cv": [] if cv is None else [
                {"lambda": float(l), "mean_mse": float(m)} for l, m in zip(cv.lambdas, cv.mean_cv_mse)
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ElasticNetFit":
        doc = json.loads(text)
        names = [c["name"] for c in doc["coefficients"]]
        coefs = np.array([c["coefficient"] for c in doc["coefficients"]], dtype=float)
        # means/sds are folded into the stored original-scale coefficients
        return cls(doc["intercept"], coefs, doc["lambda"], doc["alpha"], np.zeros(len(names)),
                   np.ones(len(names)), list(doc["dropped_columns"]), doc["active_set_size"], names)


@dataclass
class CvResult:
    lambdas: np.ndarray
    mean_cv_mse: np.ndarray
    fold_mse: np.ndarray  # (folds, L)
    fold_of: np.ndarray  # fold index per row
    oof_path: np.ndarray  # (n, L) out-of-fold predictions
    folds: int
    selected_index: int | None = None

    @property
    def lambda_(self) -> float:
        return float(self.lambdas[self.selected_index])

    @property
    def oof_predictions(self) -> np.ndarray:
        if self.selected_index is None:
            raise ValueError("no lambda selected yet")
        return self.oof_path[:, self.selected_index]


# ---------------------------------------------------------------------------
# primitives


def standardize(X):
    """Center and scale columns to population variance 1.

    Returns ``(Xs, means, sds, dropped)``; ``Xs`` holds only surviving
    columns and ``dropped`` lists indices of columns with sd < 1e-12.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("standardize needs at least 2 rows")
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    keep = sds >= SD_FLOOR
    if not keep.any():
        raise ValueError("all columns have zero variance")
    Xs = (X[:, keep] - means[keep]) / sds[keep]
    return Xs, means, sds, [int(j) for j in np.flatnonzero(~keep)]


def soft_threshold(z: float, g: float) -> float:
    if g < 0:
        raise ValueError("threshold must be non-negative")
    if z > g:
        return z - g
    if z < -g:
        return z + g
    return 0.0


def objective(Xs, y, intercept, beta, lam, alpha) -> float:
    r = np.asarray(y, float) - intercept - Xs @ beta
    n = len(r)
    return float(r @ r / (2 * n) + lam * (alpha * np.abs(beta).sum() + (1 - alpha) / 2 * beta @ beta))


@njit(cache=True, nogil=True)
def _cd_sweeps(X, yc, beta, col_sq, lam, alpha, tol, max_sweeps, kkt_slack):
    n, p = X.shape
    r = yc - X @ beta
    l1 = lam * alpha
    l2 = lam * (1.0 - alpha)
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        for j in range(p):
            bj = beta[j]
            g = 0.0
            for i in range(n):
                g += X[i, j] * r[i]
            z = g / n + col_sq[j] * bj
            if z > l1:
                new = (z - l1) / (col_sq[j] + l2)
            elif z < -l1:
                new = (z + l1) / (col_sq[j] + l2)
            else:
                new = 0.0
            d = new - bj
            if d != 0.0:
                for i in range(n):
                    r[i] -= d * X[i, j]
                beta[j] = new
                if abs(d) > max_delta:
                    max_delta = abs(d)
        if max_delta < tol:
            ok = True
            for j in range(p):
                if beta[j] == 0.0:
                    g = 0.0
                    for i in range(n):
                        g += X[i, j] * r[i]
                    if abs(g / n) > l1 + kkt_slack:
                        ok = False
                        break
            if ok:
                return sweeps, True
    return sweeps, False


def fit_at_lambda(Xs, y, lam, alpha, warm_start=None, tol=1e-7, max_sweeps=100_000) -> PathFit:
    """Cyclic coordinate descent at a single lambda.

    Sweeps until no coefficient moves by ``tol`` and every zero coefficient
    satisfies the KKT bound ``|x_j'r/n| <= lam*alpha + 10*tol``.
    """
    Xs = np.asfortranarray(Xs, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = Xs.shape
    if len(y) != n:
        raise ValueError("X and y row counts differ")
    ybar = float(y.mean())
    beta = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=float)
    col_sq = (Xs * Xs).sum(axis=0) / n
    sweeps, ok = _cd_sweeps(Xs, y - ybar, beta, col_sq, float(lam), float(alpha), float(tol), int(max_sweeps), 10.0 * tol)
    fit = PathFit(ybar, beta, float(lam), float(alpha), int(sweeps))
    if not ok:
        raise ConvergenceError(f"no convergence at lambda={lam:.6g} after {sweeps} sweeps", fit)
    return fit


def lambda_path(Xs, y, alpha, path_length=100, path_ratio=1e-3) -> np.ndarray:
    """Log-spaced descending lambdas from the smallest all-zero lambda."""
    Xs = np.asarray(Xs, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    yc = y - y.mean()
    if np.std(y) < SD_FLOOR:
        raise ValueError("zero-variance response")
    lam_max = float(np.max(np.abs(Xs.T @ yc))) / (n * max(alpha, 0.001))
    if lam_max <= 0:
        raise ValueError("response is orthogonal to every column")
    # a few ulps of headroom so the first fit is exactly null
    lam_max *= 1 + 1e-12
    if path_length == 1:
        return np.array([lam_max])
    return np.exp(np.linspace(math.log(lam_max), math.log(lam_max * path_ratio), path_length))


def fit_path(Xs, y, lambdas, alpha, tol=1e-7, max_sweeps=100_000) -> list[PathFit]:
    fits = []
    warm = None
    for lam in lambdas:
        f = fit_at_lambda(Xs, y, lam, alpha, warm, tol, max_sweeps)
        fits.append(f)
        warm = f.beta
    return fits


def _destandardize(beta_kept, intercept, means, sds, keep):
    coefs = np.zeros(len(means))
    coefs[keep] = beta_kept / sds[keep]
    return coefs, float(intercept - coefs @ means)


# ---------------------------------------------------------------------------
# cross validation


def assign_folds(n: int, k: int, seed: int) -> np.ndarray:
    """Seeded shuffle, then deal rows round-robin into ``k`` folds."""
    perm = SplitMix64(seed).permutation(n)
    fold_of = np.empty(n, dtype=int)
    for i, row in enumerate(perm):
        fold_of[row] = i % k
    return fold_of


def _fold_predictions(X, y, train, test, lambdas, cfg):
    Xs, means, sds, dropped = standardize(X[train])
    keep = np.ones(X.shape[1], dtype=bool)
    keep[dropped] = False
    fits = fit_path(Xs, y[train], lambdas, cfg.alpha, cfg.tol, cfg.max_sweeps)
    preds = np.empty((len(test), len(lambdas)))
    for k, f in enumerate(fits):
        coefs, b0 = _destandardize(f.beta, f.intercept, means, sds, keep)
        preds[:, k] = b0 + X[test] @ coefs
    return preds


def kfold_cv(X, y, cfg: ElasticNetConfig, lambdas=None) -> CvResult:
    """K-fold CV over a shared lambda path; folds are standardised on their training rows only."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    k = cfg.resolve_folds(n)
    if n < k:
        raise ValueError(f"n={n} rows is fewer than {k} folds")
    fold_of = assign_folds(n, k, cfg.seed)
    if np.bincount(fold_of, minlength=k).min() < 2:
        raise ValueError("a fold has fewer than 2 rows")
    if lambdas is None:
        Xs, *_ = standardize(X)
        lambdas = lambda_path(Xs, y, cfg.alpha, cfg.path_length, cfg.path_ratio)
    lambdas = np.asarray(lambdas, dtype=float)

    def run(f):
        train = np.flatnonzero(fold_of != f)
        test = np.flatnonzero(fold_of == f)
        return test, _fold_predictions(X, y, train, test, lambdas, cfg)

    with ThreadPoolExecutor(max_workers=max(1, cfg.jobs)) as pool:
        results = list(pool.map(run, range(k)))

    oof = np.empty((n, len(lambdas)))
    fold_mse = np.empty((k, len(lambdas)))
    for f, (test, preds) in enumerate(results):
        oof[test] = preds
        fold_mse[f] = ((preds - y[test, None]) ** 2).mean(axis=0)
    return CvResult(lambdas, fold_mse.mean(axis=0), fold_mse, fold_of, oof, k)


def select_lambda(cv: CvResult, feature_cap: int, active_sizes) -> int:
    """Index of the CV-optimal lambda among those with at most ``feature_cap`` nonzeros.

    Exact ties go to the larger lambda (earlier on the descending path).
    """
    if feature_cap < 1:
        raise ValueError("feature_cap must be >= 1")
    active_sizes = np.asarray(active_sizes)
    feasible = np.flatnonzero(active_sizes <= feature_cap)
    if feasible.size == 0:
        raise ValueError("no lambda on the path satisfies the feature cap")
    mse = cv.mean_cv_mse[feasible]
    # argmin returns the first minimum, i.e. the largest tied lambda
    return int(feasible[int(np.argmin(mse))])


def fit_elastic_net(X, y, cfg: ElasticNetConfig, columns=None) -> tuple[ElasticNetFit, CvResult]:
    """Full procedure: path on all rows, k-fold CV, capped selection, final fit."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    columns = list(columns) if columns is not None else [f"x{j}" for j in range(p)]
    Xs, means, sds, dropped = standardize(X)
    keep = np.ones(p, dtype=bool)
    keep[dropped] = False
    lambdas = lambda_path(Xs, y, cfg.alpha, cfg.path_length, cfg.path_ratio)
    path = fit_path(Xs, y, lambdas, cfg.alpha, cfg.tol, cfg.max_sweeps)
    active = [int(np.count_nonzero(f.beta)) for f in path]
    cv = kfold_cv(X, y, cfg, lambdas)
    cap = cfg.feature_cap if cfg.feature_cap is not None else n
    cv.selected_index = select_lambda(cv, cap, active)
    best = path[cv.selected_index]
    coefs, b0 = _destandardize(best.beta, best.intercept, means, sds, keep)
    fit = ElasticNetFit(
        intercept=b0,
        coefficients=coefs,
        lambda_=best.lam,
        alpha=cfg.alpha,
        column_means=means,
        column_sds=sds,
        dropped_columns=[columns[j] for j in dropped],
        active_set_size=int(np.count_nonzero(coefs)),
        columns=columns,
    )
    return fit, cv


def predict(fit: ElasticNetFit, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(fit.coefficients):
        raise ValueError(f"column mismatch: model has {len(fit.coefficients)} columns")
    return fit.intercept + X @ fit.coefficients


def train_test_split(ids, fraction: float, seed: int) -> tuple[list, list]:
    """Seeded split with ``round(fraction * n)`` training ids; both parts keep input order."""
    ids = list(ids)
    n = len(ids)
    if n < 2:
        raise ValueError("need at least 2 ids to split")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n_train = int(math.floor(fraction * n + 0.5))
    perm = SplitMix64(seed).permutation(n)
    train_pos = set(perm[:n_train])
    train = [ids[i] for i in range(n) if i in train_pos]
    test = [ids[i] for i in range(n) if i not in train_pos]
    return train, test

"""Generalized covariance measure tests of Y independent of X given Z.

Both regressions (Y on Z and X on Z) are cross-fitted so every residual is
out of sample. The single-feature statistic is the studentized mean of the
residual products; the omnibus statistic is the maximum absolute studentized
mean over several X columns, calibrated by the Gaussian limit of the
standardized residual products.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .classifiers import boost_squared, fit_elastic_net, fit_gbt, predict_proba
from .features import FEATURE_SETS, HMM_FEATURES
from .folds import make_rng, plain_folds, stratified_folds

N_DRAWS = 10_000


class DegenerateError(ValueError):
    pass


# ----------------------------------------------------------------------------
# Learners: fit on (Z_train, target) and predict E[target | Z] for Z_test.


@dataclass
class GbtLearner:
    depth: int = 3
    rate: float = 0.1
    rounds: int = 100

    def fit_predict(self, Z_tr, t_tr, Z_te, binary: bool):
        if binary:
            m = fit_gbt(Z_tr, t_tr, self.depth, self.rate, self.rounds)
            return predict_proba(m, Z_te)
        return boost_squared(Z_tr, t_tr, self.depth, self.rate, self.rounds)(Z_te)


@dataclass
class LinearLearner:
    """Unpenalized logistic regression for binary targets, least squares
    otherwise."""

    def fit_predict(self, Z_tr, t_tr, Z_te, binary: bool):
        if binary:
            m = fit_elastic_net(Z_tr, t_tr, 0.0, 0.0)
            return predict_proba(m, Z_te)
        A = np.column_stack([np.ones(len(t_tr)), Z_tr])
        coef, *_ = np.linalg.lstsq(A, t_tr, rcond=None)
        return np.column_stack([np.ones(len(Z_te)), Z_te]) @ coef


LEARNERS = {"gbt": GbtLearner, "linear": LinearLearner}


@dataclass
class GcmResult:
    statistic: float
    p_value: float
    ci_low: float
    ci_high: float
    n: int
    target_features: list
    conditioning_features: list
    column_statistics: list = field(default_factory=list)
    mean_product: float = math.nan

    @property
    def sign(self) -> int:
        return int(np.sign(self.statistic))


def _as_binary(Y):
    Y = np.asarray(Y, dtype=float)
    if not np.all((Y == 0) | (Y == 1)):
        raise ValueError("Y must be binary 0/1")
    return Y


def _residuals(Y, X, Z, learner, k, seed):
    """Cross-fitted residuals of Y (n,) and every column of X (n, m) on Z."""
    n = Y.size
    if Z.shape[1] == 0:
        return Y - Y.mean(), X - X.mean(axis=0)
    rng = make_rng(seed, 11)
    counts = np.bincount(Y.astype(int), minlength=2)
    folds = stratified_folds(Y, k, rng) if counts.min() >= k else plain_folds(n, k, rng)
    rY = np.empty(n)
    rX = np.empty_like(X)
    for f in range(k):
        tr, te = folds != f, folds == f
        if Y[tr].min() == Y[tr].max():
            rY[te] = Y[te] - Y[tr].mean()
        else:
            rY[te] = Y[te] - learner.fit_predict(Z[tr], Y[tr], Z[te], True)
        for j in range(X.shape[1]):
            rX[te, j] = X[te, j] - learner.fit_predict(Z[tr], X[tr, j], Z[te], False)
    return rY, rX


def _prep(Y, X, Z):
    Y = _as_binary(Y)
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    Z = np.zeros((Y.size, 0)) if Z is None else np.asarray(Z, dtype=float)
    Z = Z[:, None] if Z.ndim == 1 else Z
    if not (X.shape[0] == Z.shape[0] == Y.size):
        raise ValueError("Y, X and Z must have the same number of rows")
    if Y.size < 10:
        raise ValueError("need at least 10 observations")
    return Y, np.ascontiguousarray(X), np.ascontiguousarray(Z)


def gcm_single(Y, X, Z, learner=None, k: int = 5, seed: int = 0,
               target="X", conditioning=()) -> GcmResult:
    """Studentized residual-product test of one feature X.

    T = sqrt(n) mean(R) / sd(R), R_i = (Y_i - h(Z_i)) (X_i - f(Z_i)); the
    unnormalized interval is mean(R) +- 1.96 sd(R) / sqrt(n).
    """
    learner = learner or GbtLearner()
    Y, X, Z = _prep(Y, X, Z)
    if X.shape[1] != 1:
        raise ValueError("gcm_single takes one X column")
    rY, rX = _residuals(Y, X, Z, learner, k, seed)
    R = rY * rX[:, 0]
    n = R.size
    mean = float(R.mean())
    sd = float(R.std())
    if not sd > 0.0:
        raise DegenerateError("residual products have zero variance")
    T = math.sqrt(n) * mean / sd
    p = float(2.0 * norm.sf(abs(T)))
    half = 1.96 * sd / math.sqrt(n)
    return GcmResult(T, p, mean - half, mean + half, n, [target], list(conditioning),
                     [T], mean)


def gcm_omnibus(Y, X, Z, learner=None, k: int = 5, seed: int = 0, targets=None,
                conditioning=(), n_draws: int = N_DRAWS) -> GcmResult:
    """Max-type test over the columns of X.

    The standardized residual products have an asymptotically Gaussian mean
    vector with covariance equal to their correlation matrix; a Gaussian
    multiplier bootstrap on them is exactly a draw from N(0, that matrix), so
    the p-value is estimated from ``n_draws`` such draws.
    """
    learner = learner or GbtLearner()
    Y, X, Z = _prep(Y, X, Z)
    rY, rX = _residuals(Y, X, Z, learner, k, seed)
    R = rY[:, None] * rX
    n, m = R.shape
    mean = R.mean(axis=0)
    sd = R.std(axis=0)
    if np.any(~(sd > 0.0)):
        raise DegenerateError("a residual-product column has zero variance")
    T = np.sqrt(n) * mean / sd
    C = np.corrcoef(R, rowvar=False).reshape(m, m)
    eig = np.linalg.eigvalsh(C)
    if eig[0] < 1e-10:
        raise DegenerateError(f"residual-product matrix is rank deficient (min eigenvalue {eig[0]:.3g})")
    stat = float(np.abs(T).max())
    L = np.linalg.cholesky(C)
    draws = make_rng(seed, 13).standard_normal((n_draws, m)) @ L.T
    exceed = int(np.count_nonzero(np.abs(draws).max(axis=1) >= stat))
    p = (1.0 + exceed) / (1.0 + n_draws)
    names = list(targets) if targets is not None else [f"X{j + 1}" for j in range(m)]
    return GcmResult(stat, p, math.nan, math.nan, n, names, list(conditioning),
                     [float(t) for t in T])


# ----------------------------------------------------------------------------
# Suite over the HMM features


def per_feature_suite(rows, learner=None, base_set: str = "naive", k: int = 5,
                      seed: int = 0, n_draws: int = N_DRAWS) -> list[tuple[str, GcmResult]]:
    """One test per HMM feature (conditioning on the base features and the
    other three HMM features) plus the omnibus over all four given the base
    features. Returns ``[(name, result), ...]`` with the omnibus last."""
    learner = learner or GbtLearner()
    rows = [r for r in rows]
    if any(r.hmm_features is None for r in rows):
        raise ValueError("HMM features missing on some plays")
    if any(r.label is None for r in rows):
        raise ValueError("coverage labels missing on some plays")
    base = FEATURE_SETS[base_set]
    Y = np.array([r.label for r in rows], dtype=float)
    B = np.array([r.vector(base) for r in rows])
    Hm = np.array([r.vector(HMM_FEATURES) for r in rows])
    out = []
    for j, name in enumerate(HMM_FEATURES):
        others = [i for i in range(len(HMM_FEATURES)) if i != j]
        Z = np.column_stack([B, Hm[:, others]])
        cond = base + [HMM_FEATURES[i] for i in others]
        out.append((name, gcm_single(Y, Hm[:, j], Z, learner, k, seed, name, cond)))
    out.append(("omnibus", gcm_omnibus(Y, Hm, B, learner, k, seed, HMM_FEATURES, base, n_draws)))
    return out


def neg_log10(p: float) -> float:
    return -math.log10(max(p, 1e-300))


def write_gcm_table(results, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "statistic", "p", "ci_low", "ci_high", "neg_log10_p"])
        for name, r in results:
            w.writerow([name, repr(float(r.statistic)), repr(float(r.p_value)),
                        "" if math.isnan(r.ci_low) else repr(float(r.ci_low)),
                        "" if math.isnan(r.ci_high) else repr(float(r.ci_high)),
                        repr(neg_log10(r.p_value))])

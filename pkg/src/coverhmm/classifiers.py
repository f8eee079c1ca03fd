"""Probabilistic man (1) / zone (0) classifiers.

Two model families, both written here rather than wrapped:

* elastic-net logistic regression fitted by proximal Newton steps whose
  weighted least-squares subproblems are solved by cyclic coordinate descent
  with soft-thresholding, on standardized features;
* second-order gradient boosting of exact-greedy regression trees on the
  logistic loss.

Hyperparameters are chosen by k-fold cross-validated log-loss over fixed grids.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _trees
from .folds import make_rng, plain_folds, stratified_folds

P_CLIP = 1e-12
HESS_FLOOR = 1e-6
ENET_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)
GBT_DEPTHS = (2, 3, 4)
GBT_RATES = (0.05, 0.1, 0.3)
GBT_ROUNDS = tuple(range(50, 501, 50))
EARLY_STOP = 50


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def logloss(y, p) -> float:
    p = np.clip(np.asarray(p, dtype=float), P_CLIP, 1.0 - P_CLIP)
    y = np.asarray(y, dtype=float)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be (n, p) with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix has missing or non-finite values")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    if y.size < 2 or y.min() == y.max():
        raise ValueError("both classes must be present in the training labels")
    return X, y.astype(float)


def _names(names, p):
    names = [f"x{j}" for j in range(p)] if names is None else list(names)
    if len(names) != p:
        raise ValueError("feature names do not match the number of columns")
    return names


# ----------------------------------------------------------------------------
# Elastic net


@dataclass
class ElasticNetModel:
    intercept: float
    coefs: dict                 # feature name -> coefficient on the original scale
    lam: float
    alpha: float
    means: dict
    scales: dict
    feature_names: list
    n_iter: int = 0
    objective_path: list = field(default_factory=list)

    kind = "enet"

    def decision_function(self, X):
        beta = np.array([self.coefs[n] for n in self.feature_names])
        return self.intercept + np.asarray(X, dtype=float) @ beta

    def to_json(self) -> dict:
        return {"kind": self.kind, "intercept": self.intercept, "coefs": self.coefs,
                "lambda": self.lam, "alpha": self.alpha, "means": self.means,
                "scales": self.scales, "feature_names": self.feature_names,
                "n_iter": self.n_iter, "objective_path": self.objective_path}

    @classmethod
    def from_json(cls, d):
        return cls(d["intercept"], d["coefs"], d["lambda"], d["alpha"], d["means"], d["scales"],
                   d["feature_names"], d.get("n_iter", 0), d.get("objective_path", []))


def _enet_objective(Z, y, b0, beta, lam, alpha):
    eta = b0 + Z @ beta
    loss = float(np.mean(np.logaddexp(0.0, eta) - y * eta))
    return loss + lam * (alpha * float(np.abs(beta).sum()) + 0.5 * (1.0 - alpha) * float(beta @ beta))


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    sd = np.where(const, 1.0, sd)
    Z = (X - mu) / sd
    Z[:, const] = 0.0                      # constant features get coefficient 0
    return np.ascontiguousarray(Z), mu, sd


def _enet_path_fit(Z, y, lam, alpha, b0, beta, tol=1e-7, max_iter=100):
    """Proximal Newton on standardized features from a warm start."""
    l1, l2 = lam * alpha, lam * (1.0 - alpha)
    f = _enet_objective(Z, y, b0, beta, lam, alpha)
    path = [f]
    it = 0
    for it in range(1, max_iter + 1):
        eta = b0 + Z @ beta
        p = sigmoid(eta)
        w = np.maximum(p * (1.0 - p), 1e-5)
        z = eta + (y - p) / w
        nb = beta.copy()
        nb0 = _trees.wls_cd(Z, z, w, b0, nb, l1, l2, 0.1 * tol, 10000)
        d0, d = nb0 - b0, nb - beta
        t = 1.0
        while True:
            f_new = _enet_objective(Z, y, b0 + t * d0, beta + t * d, lam, alpha)
            if f_new <= f or t < 1e-10:
                break
            t *= 0.5
        if f_new > f:
            break
        step = t * max(abs(d0), float(np.abs(d).max(initial=0.0)))
        b0, beta, f = b0 + t * d0, beta + t * d, f_new
        path.append(f)
        if step < tol:
            break
    return b0, beta, path, it


def fit_elastic_net(X, y, lam: float, alpha: float, names=None, start=None) -> ElasticNetModel:
    """Minimize mean logistic loss + lam * (alpha |b|_1 + (1 - alpha)/2 |b|_2^2)
    over standardized features; coefficients are returned on the original
    scale."""
    if lam < 0 or not 0.0 <= alpha <= 1.0:
        raise ValueError("need lam >= 0 and alpha in [0, 1]")
    X, y = _check_xy(X, y)
    names = _names(names, X.shape[1])
    Z, mu, sd = _standardize(X)
    if start is None:
        b0, beta = logit(y.mean()), np.zeros(X.shape[1])
    else:
        b0, beta = start
        beta = np.array(beta, dtype=float)
    b0, beta, path, it = _enet_path_fit(Z, y, lam, alpha, float(b0), beta)
    return _enet_model(b0, beta, mu, sd, lam, alpha, names, it, path)


def _enet_model(b0, beta, mu, sd, lam, alpha, names, it=0, path=()):
    coef = beta / sd
    intercept = float(b0 - coef @ mu)
    return ElasticNetModel(intercept, dict(zip(names, map(float, coef))), float(lam), float(alpha),
                           dict(zip(names, map(float, mu))), dict(zip(names, map(float, sd))),
                           list(names), it, [float(v) for v in path])


def lambda_path(X, y, alpha: float, n_lambda: int = 20, ratio: float | None = None) -> np.ndarray:
    """Decreasing penalty sequence from the smallest lambda giving an all-zero
    fit (computed with alpha floored at 1e-3 for the ridge case)."""
    X, y = _check_xy(X, y)
    Z, _, _ = _standardize(X)
    n, p = Z.shape
    lmax = float(np.abs(Z.T @ (y - y.mean())).max(initial=0.0)) / n / max(alpha, 1e-3)
    lmax = max(lmax, 1e-6)
    ratio = ratio if ratio is not None else (1e-3 if n > p else 1e-2)
    return np.geomspace(lmax, lmax * ratio, n_lambda)


# ----------------------------------------------------------------------------
# Gradient-boosted trees


@dataclass
class GbtModel:
    trees: list                 # list of (feature, threshold, value) arrays in heap layout
    learning_rate: float
    max_depth: int
    n_rounds: int
    base_score: float
    feature_names: list
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    train_loss: list = field(default_factory=list)

    kind = "gbt"

    def decision_function(self, X, n_rounds: int | None = None):
        X = np.ascontiguousarray(X, dtype=float)
        F = np.full(X.shape[0], self.base_score)
        for feat, thr, val in self.trees[: n_rounds]:
            F += self.learning_rate * _trees.tree_predict(X, feat, thr, val)
        return F

    def to_json(self) -> dict:
        return {"kind": self.kind, "learning_rate": self.learning_rate, "max_depth": self.max_depth,
                "n_rounds": self.n_rounds, "base_score": self.base_score,
                "feature_names": self.feature_names, "reg_lambda": self.reg_lambda,
                "min_child_weight": self.min_child_weight, "train_loss": self.train_loss,
                "trees": [{"feature": f.tolist(), "threshold": t.tolist(), "value": v.tolist()}
                          for f, t, v in self.trees]}

    @classmethod
    def from_json(cls, d):
        trees = [(np.array(t["feature"], dtype=np.int64), np.array(t["threshold"], dtype=float),
                  np.array(t["value"], dtype=float)) for t in d["trees"]]
        return cls(trees, d["learning_rate"], d["max_depth"], d["n_rounds"], d["base_score"],
                   d["feature_names"], d.get("reg_lambda", 1.0), d.get("min_child_weight", 1.0),
                   d.get("train_loss", []))


def _boost(X, y, depth, rate, rounds, lam, mcw, X_val=None, y_val=None, patience=None):
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
    base = logit(min(max(y.mean(), P_CLIP), 1.0 - P_CLIP))
    F = np.full(y.size, base)
    Fv = None if X_val is None else np.full(X_val.shape[0], base)
    trees, train_loss, val_loss = [], [], []
    best, best_round = math.inf, 0
    for r in range(rounds):
        p = sigmoid(F)
        g = p - y
        h = np.maximum(p * (1.0 - p), HESS_FLOOR)
        tree = _trees.build_tree(X, order, g, h, depth, lam, mcw)
        trees.append(tree)
        F += rate * _trees.tree_predict(X, *tree)
        train_loss.append(logloss(y, sigmoid(F)))
        if Fv is not None:
            Fv += rate * _trees.tree_predict(X_val, *tree)
            v = logloss(y_val, sigmoid(Fv))
            val_loss.append(v)
            if v < best:
                best, best_round = v, r
            elif patience is not None and r - best_round >= patience:
                break
    return trees, base, train_loss, val_loss


def boost_squared(X, t, depth: int, rate: float, rounds: int, reg_lambda: float = 1.0,
                  min_child_weight: float = 1.0):
    """Boosted regression trees on squared loss (g = F - t, h = 1); returns a
    predictor function. Used as a conditional-mean learner."""
    X = np.ascontiguousarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
    base = float(t.mean())
    F = np.full(t.size, base)
    h = np.ones(t.size)
    trees = []
    for _ in range(int(rounds)):
        tree = _trees.build_tree(X, order, F - t, h, int(depth), float(reg_lambda),
                                 float(min_child_weight))
        trees.append(tree)
        F += rate * _trees.tree_predict(X, *tree)

    def predict(Xn):
        Xn = np.ascontiguousarray(Xn, dtype=float)
        out = np.full(Xn.shape[0], base)
        for tr in trees:
            out += rate * _trees.tree_predict(Xn, *tr)
        return out

    return predict


def fit_gbt(X, y, depth: int, rate: float, rounds: int, names=None, reg_lambda: float = 1.0,
            min_child_weight: float = 1.0) -> GbtModel:
    """Second-order boosting on the logistic loss: each round fits a tree to
    g = p - y, h = max(p(1 - p), 1e-6) with gain
    0.5 [G_L^2/(H_L+lam) + G_R^2/(H_R+lam) - G^2/(H+lam)] and leaf -G/(H+lam)."""
    if not 1 <= depth <= 12 or rounds < 0 or not 0.0 <= rate <= 1.0:
        raise ValueError("need 1 <= depth <= 12, rounds >= 0 and rate in [0, 1]")
    X, y = _check_xy(X, y)
    names = _names(names, X.shape[1])
    trees, base, tl, _ = _boost(X, y, int(depth), float(rate), int(rounds), float(reg_lambda),
                                float(min_child_weight))
    return GbtModel(trees, float(rate), int(depth), int(rounds), base, names,
                    float(reg_lambda), float(min_child_weight), tl)


# ----------------------------------------------------------------------------
# Prediction and persistence


def _align(model, X, names):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    if names is None:
        if X.shape[1] != len(model.feature_names):
            raise ValueError(f"expected {len(model.feature_names)} columns, got {X.shape[1]}")
        return X
    names = list(names)
    missing = [n for n in model.feature_names if n not in names]
    extra = [n for n in names if n not in model.feature_names]
    if missing or extra:
        raise ValueError(f"feature schema mismatch: missing {missing}, unexpected {extra}")
    idx = [names.index(n) for n in model.feature_names]
    return X[:, idx]


def predict_proba(model, X, names=None) -> np.ndarray:
    """Pr(man) for each row, clipped to [1e-12, 1 - 1e-12]."""
    X = _align(model, X, names)
    return np.clip(sigmoid(model.decision_function(X)), P_CLIP, 1.0 - P_CLIP)


def model_to_json(model, **metadata) -> dict:
    d = model.to_json()
    d["metadata"] = metadata
    return d


def model_from_json(d):
    kinds = {"enet": ElasticNetModel, "gbt": GbtModel}
    if d.get("kind") not in kinds:
        raise ValueError(f"unknown model kind {d.get('kind')!r}")
    return kinds[d["kind"]].from_json(d)


def save_model(model, path, **metadata):
    with open(path, "w") as fh:
        json.dump(model_to_json(model, **metadata), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_json(json.load(fh))


# ----------------------------------------------------------------------------
# Tuning


@dataclass
class TuneResult:
    params: dict
    score: float
    table: list                  # (params, mean validation logloss) for every grid point


def default_grid(model_class: str, X=None, y=None) -> dict:
    if model_class == "gbt":
        return {"depth": GBT_DEPTHS, "rate": GBT_RATES, "rounds": GBT_ROUNDS}
    if model_class == "enet":
        return {"alpha": ENET_ALPHAS, "n_lambda": 20}
    raise ValueError(f"unknown model class {model_class!r}")


def _fold_ids(y, k, seed):
    rng = make_rng(seed, 7)
    if k >= y.size:
        return np.arange(y.size)[rng.permutation(y.size)]
    counts = np.bincount(y.astype(np.int64), minlength=2)
    if counts.min() >= k:
        return stratified_folds(y, k, rng)
    return plain_folds(y.size, k, rng)


def _tune_gbt(X, y, folds, k, grid):
    depths = sorted(grid["depth"])
    rates = sorted(grid["rate"])
    rounds = sorted(grid["rounds"])
    if not depths or not rates or not rounds:
        raise ValueError("empty tuning grid")
    top = rounds[-1]
    patience = EARLY_STOP if len(rounds) > 1 else None
    scores = {}
    for d in depths:
        for r in rates:
            curves = np.full((k, top), np.inf)
            for f in range(k):
                tr, va = folds != f, folds == f
                if y[tr].min() == y[tr].max():
                    raise ValueError("a tuning fold has a single class in training")
                _, _, _, vl = _boost(X[tr], y[tr], d, r, top, 1.0, 1.0, X[va], y[va], patience)
                curves[f, : len(vl)] = vl
            for m in rounds:
                scores[(d, r, m)] = float(curves[:, m - 1].mean())
    # smaller models first so exact ties keep the simplest
    order = sorted(scores, key=lambda t: (t[0], t[2], t[1]))
    best = min(order, key=lambda t: scores[t])
    table = [({"depth": t[0], "rate": t[1], "rounds": t[2]}, scores[t]) for t in order]
    return TuneResult({"depth": best[0], "rate": best[1], "rounds": best[2]}, scores[best], table)


def _tune_enet(X, y, folds, k, grid):
    alphas = sorted(grid["alpha"])
    if not alphas:
        raise ValueError("empty tuning grid")
    paths = {a: (np.sort(np.asarray(grid["lambdas"], dtype=float))[::-1] if "lambdas" in grid
                 else lambda_path(X, y, a, grid.get("n_lambda", 20))) for a in alphas}
    scores = {}
    for a in alphas:
        if paths[a].size == 0:
            raise ValueError("empty tuning grid")
        losses = np.zeros((k, paths[a].size))
        for f in range(k):
            tr, va = folds != f, folds == f
            Xt, yt = _check_xy(X[tr], y[tr])
            Z, mu, sd = _standardize(Xt)
            b0, beta = logit(yt.mean()), np.zeros(X.shape[1])
            for i, lam in enumerate(paths[a]):          # warm starts down the path
                b0, beta, _, _ = _enet_path_fit(Z, yt, lam, a, b0, beta)
                eta = b0 + ((X[va] - mu) / sd) @ beta
                losses[f, i] = logloss(y[va], sigmoid(eta))
        for i, lam in enumerate(paths[a]):
            scores[(float(lam), a)] = float(losses[:, i].mean())
    order = sorted(scores, key=lambda t: (-t[0], t[1]))
    best = min(order, key=lambda t: scores[t])
    table = [({"lambda": t[0], "alpha": t[1]}, scores[t]) for t in order]
    return TuneResult({"lambda": best[0], "alpha": best[1]}, scores[best], table)


def tune(X, y, model_class: str, grid: dict | None = None, k: int = 5, seed: int = 0) -> TuneResult:
    """Grid search by k-fold cross-validated log-loss. Folds are stratified by
    label when every fold can hold both classes."""
    X, y = _check_xy(X, y)
    if k < 2:
        raise ValueError("k must be >= 2")
    grid = grid if grid is not None else default_grid(model_class)
    folds = _fold_ids(y, k, seed)
    k = int(folds.max()) + 1
    if model_class == "gbt":
        return _tune_gbt(X, y, folds, k, grid)
    if model_class == "enet":
        return _tune_enet(X, y, folds, k, grid)
    raise ValueError(f"unknown model class {model_class!r}")


def fit_tuned(X, y, model_class: str, names=None, grid=None, k: int = 5, seed: int = 0):
    """Tune on (X, y) and refit the chosen grid point on all of it."""
    res = tune(X, y, model_class, grid, k, seed)
    if model_class == "gbt":
        p = res.params
        model = fit_gbt(X, y, p["depth"], p["rate"], p["rounds"], names)
    else:
        model = fit_elastic_net(X, y, res.params["lambda"], res.params["alpha"], names)
    return model, res

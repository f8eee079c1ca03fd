"""Marginal maximum likelihood for the random-effects HMM.

The random effects ``u`` (role), ``v`` (defense) and ``w`` (play) are
integrated out with a Laplace approximation; the outer parameters
``(beta0, beta1, sigma, sigma_u, sigma_v, sigma_w)`` are optimized with a
bounded quasi-Newton method on the approximate marginal log-likelihood.

Internally the parameters live on a working scale where every standard
deviation is replaced by its logarithm.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .hmm import (N_STATES, DefenderSeries, SeriesBatch, TransitionSpec, EmissionSpec,
                  forward_backward_batch, forward_batch, make_batch, softmax_rows)

log = logging.getLogger(__name__)

FACTORS = ("role", "team", "play")
PARAM_NAMES = ("beta0", "beta1", "sigma", "sigma_u", "sigma_v", "sigma_w")
_SD_INDEX = {"role": 3, "team": 4, "play": 5}
_LOG_2PI = math.log(2.0 * math.pi)
_LOGSD_BOUNDS = (math.log(1e-4), math.log(20.0))


class LaplaceError(RuntimeError):
    pass


def to_working(theta) -> np.ndarray:
    th = np.asarray(theta, dtype=float).copy()
    if np.any(th[2:] <= 0):
        raise ValueError(f"standard deviations must be positive, got {th[2:]}")
    th[2:] = np.log(th[2:])
    return th


def to_natural(theta_w) -> np.ndarray:
    th = np.asarray(theta_w, dtype=float).copy()
    th[2:] = np.exp(th[2:])
    return th


@dataclass
class FitConfig:
    lag: int = 4
    alpha: float = 1.0
    boundary: str = "clamp"
    outer_tol: float = 1e-10
    inner_tol: float = 1e-8
    max_outer_iters: int = 200
    max_inner_iters: int = 100
    init_theta: tuple = (-4.0, 0.0, 1.0, 0.3, 0.3, 0.3)

    def __post_init__(self):
        if self.outer_tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        self.init_theta = tuple(float(x) for x in self.init_theta)


# ----------------------------------------------------------------------------
# Data terms. A data term exposes integer level codes for each grouping factor
# and the log-likelihood of every unit as a function of its linear offset
# ``a = beta0 + sum of its random effects``.


class HmmData:
    """Defender series wrapped for the Laplace machinery."""

    def __init__(self, series: Sequence[DefenderSeries] | SeriesBatch, lag: int = 4,
                 alpha: float = 1.0, boundary: str = "clamp"):
        self.batch = series if isinstance(series, SeriesBatch) else \
            make_batch(series, lag, alpha, boundary)
        self.codes = self.batch.level
        self.labels = self.batch.levels

    @property
    def n_units(self) -> int:
        return self.batch.B

    def loglik(self, theta_w, a, derivs=False):
        """Per-unit log-likelihood; with ``derivs`` also d/d(a, beta1, log sigma)
        and d2/da2."""
        return forward_batch(self.batch, a, theta_w[1], math.exp(theta_w[2]), derivs)


class GaussianInterceptData:
    """Linear-Gaussian random-intercept model ``y_i = beta0 + w_g(i) + e_i``.

    The Laplace approximation is exact for this model, which makes it a
    reference problem for the marginal-likelihood code.
    """

    def __init__(self, y, groups):
        self.y = np.asarray(y, dtype=float)
        codes, labels = np.unique(np.asarray(groups), return_inverse=True)
        self.codes = {"play": labels.astype(np.int64)}
        self.labels = {"play": list(codes)}

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    def loglik(self, theta_w, a, derivs=False):
        s2 = math.exp(2.0 * theta_w[2])
        r = self.y - a
        ll = -0.5 * _LOG_2PI - theta_w[2] - 0.5 * r * r / s2
        if not derivs:
            return ll
        grad = np.column_stack([r / s2, np.zeros_like(r), r * r / s2 - 1.0])
        return ll, grad, np.full_like(r, -1.0 / s2)


# ----------------------------------------------------------------------------
# Joint negative log-likelihood


def _active_factors(data, active=None):
    if active is None:
        active = [f for f in FACTORS if f in data.codes]
    return [f for f in active if f in data.codes]


def _offsets(theta_w, data, effects):
    a = np.full(data.n_units, float(theta_w[0]))
    for f, vec in effects.items():
        a += vec[data.codes[f]]
    return a


def joint_negloglik(theta_w, effects: dict, data, grad: bool = False):
    """Negative joint log-likelihood of data and random effects.

    ``effects`` maps factor name to its effect vector; factors absent from it
    are held at zero and contribute no prior term. With ``grad=True`` returns
    ``(value, d_theta (6,), d_effects dict)``.
    """
    theta_w = np.asarray(theta_w, dtype=float)
    a = _offsets(theta_w, data, effects)
    if grad:
        ll, g, _ = data.loglik(theta_w, a, derivs=True)
    else:
        ll = data.loglik(theta_w, a)
    val = -float(ll.sum())
    d_theta = np.zeros(6)
    d_eff = {}
    if grad:
        d_theta[:3] = -g.sum(axis=0)
    for f, vec in effects.items():
        ls = theta_w[_SD_INDEX[f]]
        s2 = math.exp(2.0 * ls)
        val += 0.5 * float(vec @ vec) / s2 + vec.size * (ls + 0.5 * _LOG_2PI)
        if grad:
            d_theta[_SD_INDEX[f]] = vec.size - float(vec @ vec) / s2
            d_eff[f] = vec / s2 - np.bincount(data.codes[f], weights=g[:, 0], minlength=vec.size)
    if grad:
        return val, d_theta, d_eff
    return val


# ----------------------------------------------------------------------------
# Laplace approximation


class _Hessian:
    """Negative Hessian of the joint log-likelihood in the random effects.

    Each factor's own block is diagonal (a unit belongs to a single level), so
    the largest factor is kept as a diagonal block and eliminated through its
    Schur complement; the remaining factors form a small dense block.
    """

    def __init__(self, data, factors, sizes, curv, prec):
        self.factors = factors
        order = sorted(factors, key=lambda f: -sizes[f])
        self.sparse = order[0] if order else None
        self.dense = order[1:]
        self.sizes = sizes
        self.off = {}
        pos = 0
        for f in self.dense:
            self.off[f] = pos
            pos += sizes[f]
        nc = pos
        if self.sparse is None:
            self.hw = np.zeros(0)
            self.Hcw = np.zeros((0, 0))
            self.Hcc = np.zeros((0, 0))
            return
        cw = data.codes[self.sparse]
        self.hw = np.bincount(cw, weights=curv, minlength=sizes[self.sparse]) + prec[self.sparse]
        self.Hcc = np.zeros((nc, nc))
        self.Hcw = np.zeros((nc, sizes[self.sparse]))
        for f in self.dense:
            cf = data.codes[f] + self.off[f]
            np.add.at(self.Hcw, (cf, cw), curv)
            for g in self.dense:
                np.add.at(self.Hcc, (cf, data.codes[g] + self.off[g]), curv)
            idx = np.arange(sizes[f]) + self.off[f]
            self.Hcc[idx, idx] += prec[f]

    def _pack(self, d):
        c = np.concatenate([d[f] for f in self.dense]) if self.dense else np.zeros(0)
        return c, d[self.sparse] if self.sparse else np.zeros(0)

    def _unpack(self, c, w):
        out = {f: c[self.off[f]: self.off[f] + self.sizes[f]] for f in self.dense}
        if self.sparse:
            out[self.sparse] = w
        return out

    def factorize(self, shift=0.0):
        """Cholesky of the Schur complement; returns False if not PD."""
        hw = self.hw + shift
        if np.any(hw <= 0):
            return False
        self._hw = hw
        S = self.Hcc + shift * np.eye(self.Hcc.shape[0]) - (self.Hcw / hw) @ self.Hcw.T
        try:
            self._chol = linalg.cho_factor(S, lower=True) if S.size else None
        except linalg.LinAlgError:
            return False
        return True

    def solve(self, d):
        gc, gw = self._pack(d)
        rhs = gc - self.Hcw @ (gw / self._hw)
        xc = linalg.cho_solve(self._chol, rhs) if self._chol is not None else rhs
        xw = (gw - self.Hcw.T @ xc) / self._hw
        return self._unpack(xc, xw)

    def logdet(self):
        ld = float(np.log(self._hw).sum())
        if self._chol is not None:
            ld += 2.0 * float(np.log(np.diag(self._chol[0])).sum())
        return ld

    def min_eigenvalue(self):
        n = self.Hcc.shape[0] + self.hw.size
        if n > 3000:
            return float(min(self.hw.min(initial=np.inf),
                             np.linalg.eigvalsh(self.Hcc).min(initial=np.inf)))
        H = np.zeros((n, n))
        nc = self.Hcc.shape[0]
        H[:nc, :nc] = self.Hcc
        H[:nc, nc:] = self.Hcw
        H[nc:, :nc] = self.Hcw.T
        H[nc:, nc:] = np.diag(self.hw)
        return float(np.linalg.eigvalsh(H)[0])


def _inner_terms(theta_w, effects, data, factors):
    a = _offsets(theta_w, data, effects)
    ll, g, d2 = data.loglik(theta_w, a, derivs=True)
    grad = {}
    prec = {}
    for f in factors:
        s2 = math.exp(2.0 * theta_w[_SD_INDEX[f]])
        prec[f] = 1.0 / s2
        grad[f] = effects[f] / s2 - np.bincount(data.codes[f], weights=g[:, 0],
                                                minlength=effects[f].size)
    return ll, grad, -d2, prec


def _n_levels(data, f):
    return len(data.labels[f]) if hasattr(data, "labels") else int(data.codes[f].max()) + 1


def laplace_marginal(theta_w, data, cfg: FitConfig | None = None, factors=None,
                     start: dict | None = None):
    """Laplace-approximate marginal log-likelihood at working-scale ``theta_w``.

    Returns ``(value, mode)`` with ``mode`` a dict of random-effect vectors at
    the joint mode. ``factors`` restricts which grouping factors carry random
    effects (default: all factors present in ``data``).
    """
    cfg = cfg or FitConfig()
    theta_w = np.asarray(theta_w, dtype=float)
    factors = _active_factors(data, factors)
    sizes = {f: _n_levels(data, f) for f in factors}
    q = sum(sizes.values())
    effects = {f: np.zeros(sizes[f]) if start is None or f not in start
               else np.array(start[f], dtype=float) for f in factors}
    if q == 0:
        return -joint_negloglik(theta_w, {}, data), {}

    J = joint_negloglik(theta_w, effects, data)
    converged = False
    for _ in range(cfg.max_inner_iters):
        _, grad, curv, prec = _inner_terms(theta_w, effects, data, factors)
        gmax = max(float(np.abs(g).max()) for g in grad.values())
        if gmax < cfg.inner_tol:
            converged = True
            break
        H = _Hessian(data, factors, sizes, curv, prec)
        shift = 0.0
        while not H.factorize(shift):
            shift = max(1e-8, 10.0 * shift)
            if shift > 1e12:
                raise LaplaceError("could not regularize the inner Hessian")
        step = H.solve(grad)
        dec = sum(float(grad[f] @ step[f]) for f in factors)
        if shift == 0.0 and 0.5 * dec < 1e-10 * max(1.0, abs(J)):
            # inside the quadratic region: one full step lands on the mode
            effects = {f: effects[f] - step[f] for f in factors}
            converged = True
            break
        t = 1.0
        for _ in range(40):
            trial = {f: effects[f] - t * step[f] for f in factors}
            Jt = joint_negloglik(theta_w, trial, data)
            if Jt <= J:
                break
            t *= 0.5
        else:
            raise LaplaceError("step halving failed in the inner Newton iteration")
        effects, J = trial, Jt
    if not converged:
        raise LaplaceError(f"inner optimization did not converge (|grad|={gmax:.3g})")
    J = joint_negloglik(theta_w, effects, data)
    _, _, curv, prec = _inner_terms(theta_w, effects, data, factors)
    H = _Hessian(data, factors, sizes, curv, prec)
    if not H.factorize():
        raise LaplaceError(
            f"Hessian not positive definite at the mode (smallest eigenvalue "
            f"{H.min_eigenvalue():.4g})")
    value = -J + 0.5 * q * _LOG_2PI - 0.5 * H.logdet()
    return value, effects


# ----------------------------------------------------------------------------
# Outer optimization


@dataclass
class FitResult:
    theta_hat: np.ndarray
    u_hat: dict
    v_hat: dict
    w_hat: dict
    loglik: float
    converged: bool
    aic: float
    n_params: int
    n_iter: int
    lag: int
    fixed: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def emission(self) -> EmissionSpec:
        return EmissionSpec(float(self.theta_hat[2]), self.lag)

    def transition(self) -> TransitionSpec:
        return TransitionSpec(float(self.theta_hat[0]), float(self.theta_hat[1]),
                              dict(self.u_hat), dict(self.v_hat), dict(self.w_hat))

    def to_json(self) -> dict:
        eff = lambda d: [{"level": _jsonable(k), "value": float(v)} for k, v in d.items()]
        return {
            "theta": dict(zip(PARAM_NAMES, map(float, self.theta_hat))),
            "random_effects": {"role": eff(self.u_hat), "team": eff(self.v_hat),
                               "play": eff(self.w_hat)},
            "loglik": self.loglik, "aic": self.aic, "n_params": self.n_params,
            "converged": self.converged, "n_iter": self.n_iter, "lag": self.lag,
            "fixed": self.fixed, "config": self.config,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FitResult":
        eff = lambda lst: {_from_jsonable(e["level"]): e["value"] for e in lst}
        re = d["random_effects"]
        return cls(np.array([d["theta"][k] for k in PARAM_NAMES]), eff(re["role"]),
                   eff(re["team"]), eff(re["play"]), d["loglik"], d["converged"], d["aic"],
                   d["n_params"], d["n_iter"], d["lag"], d.get("fixed", []), d.get("config", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "FitResult":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _jsonable(k):
    return list(k) if isinstance(k, tuple) else k


def _from_jsonable(k):
    return tuple(k) if isinstance(k, list) else k


class _Objective:
    """Negative Laplace marginal log-likelihood over the free parameters, with
    a central-difference gradient and warm-started inner modes."""

    def __init__(self, data, cfg, free, base, factors):
        self.data, self.cfg, self.free, self.base, self.factors = data, cfg, free, base, factors
        self.mode = None
        self.n_evals = 0
        self.best = (math.inf, None, None)      # (value, x, inner mode) of the best point seen

    def theta(self, x):
        th = self.base.copy()
        th[self.free] = x
        return th

    def value(self, x, start=None):
        self.n_evals += 1
        v, mode = laplace_marginal(self.theta(x), self.data, self.cfg, self.factors,
                                   start if start is not None else self.mode)
        return -v, mode

    def __call__(self, x):
        try:
            f, mode = self.value(x)
        except (LaplaceError, FloatingPointError) as exc:
            f, mode = math.inf, None
            log.debug("objective failed at %s: %s", x, exc)
        if not math.isfinite(f):
            # steer the line search back towards the last good point
            return self.fail_value, np.zeros_like(x)
        self.mode = mode
        if f < self.best[0]:
            self.best = (f, x.copy(), mode)
        g = np.empty_like(x)
        for i in range(x.size):
            h = 1e-6 * (1.0 + abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fp, fm = self._safe(xp, mode), self._safe(xm, mode)
            if fp is not None and fm is not None:
                g[i] = (fp - fm) / (2.0 * h)
            elif fp is not None:          # one-sided fallback next to a failing region
                g[i] = (fp - f) / h
            elif fm is not None:
                g[i] = (f - fm) / h
            else:
                return self.fail_value, np.zeros_like(x)
        return f, g

    def _safe(self, x, mode):
        try:
            v = self.value(x, mode)[0]
        except (LaplaceError, FloatingPointError):
            return None
        return v if math.isfinite(v) else None


def fit(series: Sequence[DefenderSeries] | HmmData, cfg: FitConfig | None = None) -> FitResult:
    """Fit the random-effects HMM by maximizing the Laplace marginal likelihood."""
    cfg = cfg or FitConfig()
    data = series if isinstance(series, HmmData) else HmmData(series, cfg.lag, cfg.alpha, cfg.boundary)
    n_plays = len(data.labels["play"])
    if n_plays < 2:
        raise ValueError("at least two plays are required")
    factors, fixed = [], []
    for f in FACTORS:
        if len(data.labels[f]) < 2:
            warnings.warn(f"grouping factor {f!r} has a single level; its variance is fixed at 0")
            fixed.append(PARAM_NAMES[_SD_INDEX[f]])
        else:
            factors.append(f)
    base = to_working(cfg.init_theta)
    free = [0, 1, 2] + [_SD_INDEX[f] for f in factors]
    obj = _Objective(data, cfg, free, base, factors)
    bounds = [(None, None), (None, None), (math.log(1e-3), math.log(50.0))] + \
        [_LOGSD_BOUNDS] * len(factors)
    x0 = base[free]
    f0, _ = obj.value(x0)
    obj.fail_value = abs(f0) * 10.0 + 1e6
    res = optimize.minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": cfg.max_outer_iters, "ftol": cfg.outer_tol,
                                     "gtol": 1e-7 * max(1.0, abs(f0))})
    # restart the inner problem from the mode found at the optimum itself; the
    # random-effect posterior need not be log-concave, so a mode carried over
    # from another point can lead Newton to a different stationary point
    x_best = res.x if obj.best[1] is None or res.fun <= obj.best[0] else obj.best[1]
    start = obj.best[2] if obj.best[1] is not None and np.array_equal(x_best, obj.best[1]) else obj.mode
    theta_w = obj.theta(x_best)
    value, mode = laplace_marginal(theta_w, data, cfg, factors, start)
    theta = to_natural(theta_w)
    for f in FACTORS:
        if f not in factors:
            theta[_SD_INDEX[f]] = 0.0
    named = {f: dict(zip(data.labels[f], map(float, mode[f]))) if f in mode
             else {lab: 0.0 for lab in data.labels[f]} for f in FACTORS}
    k = len(free)
    if not res.success:
        log.warning("outer optimization did not converge: %s", res.message)
    return FitResult(theta, named["role"], named["team"], named["play"], float(value),
                     bool(res.success), 2.0 * k - 2.0 * float(value), k, int(res.nit),
                     cfg.lag, fixed, asdict(cfg))


# ----------------------------------------------------------------------------
# Homogeneous model for lag selection: one free logit per off-diagonal cell.


_OFF_IDX = np.nonzero(1.0 - np.eye(N_STATES))


def _homogeneous_terms(x, batch: SeriesBatch):
    eta = np.zeros((N_STATES, N_STATES))
    eta[_OFF_IDX] = x[:-1]
    G = softmax_rows(eta)
    sigma = math.exp(x[-1])
    ll, _, xi_sum, d_ls = forward_backward_batch(batch, 0.0, 0.0, sigma, G)
    d_eta = xi_sum - xi_sum.sum(axis=1, keepdims=True) * G
    return float(ll.sum()), np.append(d_eta[_OFF_IDX], d_ls)


def fit_homogeneous(series: Sequence[DefenderSeries], lag: int, cfg: FitConfig | None = None):
    """Homogeneous HMM (20 free off-diagonal logits + sigma). Returns
    ``(loglik, tpm, sigma, converged)``."""
    cfg = cfg or FitConfig()
    batch = make_batch(series, lag, cfg.alpha, cfg.boundary)
    x0 = np.append(np.full(N_STATES * (N_STATES - 1), cfg.init_theta[0]),
                   math.log(cfg.init_theta[2]))

    def negll(x):
        ll, g = _homogeneous_terms(x, batch)
        return -ll, -g

    res = optimize.minimize(negll, x0, jac=True, method="L-BFGS-B",
                            bounds=[(-30, 30)] * (x0.size - 1) + [(math.log(1e-3), math.log(50.0))],
                            options={"maxiter": 1000, "ftol": cfg.outer_tol, "gtol": 1e-6})
    eta = np.zeros((N_STATES, N_STATES))
    eta[_OFF_IDX] = res.x[:-1]
    return -float(res.fun), softmax_rows(eta), math.exp(res.x[-1]), bool(res.success)


def select_lag(series: Sequence[DefenderSeries], lags, cfg: FitConfig | None = None):
    """Fit the homogeneous model per lag; return ``(best_lag, {lag: aic})``."""
    lags = sorted(set(int(l) for l in lags))
    if not lags:
        raise ValueError("empty lag set")
    k = N_STATES * (N_STATES - 1) + 1
    table = {}
    for lag in lags:
        ll, _, _, _ = fit_homogeneous(series, lag, cfg)
        table[lag] = 2.0 * k - 2.0 * ll
    best = min(lags, key=lambda l: (table[l], l))
    return best, table

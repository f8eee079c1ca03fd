"""Non-homogeneous 5-state HMM for defender guarding assignments.

States index the five offensive skill players. A defender's y-coordinate at
frame ``t`` is Gaussian around the lagged y-coordinate of the guarded player,
and switches between targets follow a multinomial-logit transition model whose
off-diagonal logits depend on the lagged distance between the two targets plus
role, defense and play random effects.

All frame and state indices are 0-based in this module.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from . import _kernels

N_STATES = 5
_LOG_2PI = np.log(2.0 * np.pi)
_OFFDIAG = 1.0 - np.eye(N_STATES)


@dataclass(frozen=True)
class EmissionSpec:
    sigma: float
    lag: int = 4

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"emission sigma must be positive, got {self.sigma}")
        if self.lag < 0:
            raise ValueError(f"lag must be >= 0, got {self.lag}")


@dataclass(frozen=True)
class TransitionSpec:
    """Fixed effects plus predicted random effects of the transition model.

    Effects missing from ``u``/``v``/``w`` are treated as zero.
    """

    beta0: float
    beta1: float
    u: Mapping[str, float] = field(default_factory=dict)
    v: Mapping[str, float] = field(default_factory=dict)
    w: Mapping[Hashable, float] = field(default_factory=dict)

    def offset(self, role, team, play_key) -> float:
        return (self.beta0 + self.u.get(role, 0.0) + self.v.get(team, 0.0)
                + self.w.get(play_key, 0.0))


@dataclass
class DefenderSeries:
    """One defender's motion-phase y trajectory plus the five offensive ones."""

    play_key: Hashable
    defender_index: int
    role: str
    team: str
    y: np.ndarray
    offense_y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.offense_y = np.asarray(self.offense_y, dtype=float)
        if self.offense_y.shape != (N_STATES, self.y.shape[0]):
            raise ValueError(
                f"offense_y must be {N_STATES} x T with T={self.y.shape[0]}, "
                f"got {self.offense_y.shape}")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.offense_y))):
            raise ValueError(f"non-finite coordinates in series {self.play_key}/{self.defender_index}")

    @property
    def T(self) -> int:
        return self.y.shape[0]


def lagged_means(offense_y: np.ndarray, lag: int, boundary: str = "clamp") -> np.ndarray:
    """Return the 5 x T' matrix of state means ``y_{t-lag}(off_j)``.

    ``boundary="clamp"`` keeps all T frames and uses frame 0 for t < lag.
    ``boundary="drop"`` discards the first ``lag`` frames (T' = T - lag).
    """
    offense_y = np.asarray(offense_y, dtype=float)
    T = offense_y.shape[1]
    if boundary == "clamp":
        idx = np.maximum(np.arange(T) - lag, 0)
        return offense_y[:, idx]
    if boundary == "drop":
        return offense_y[:, : max(T - lag, 0)]
    raise ValueError(f"unknown boundary mode {boundary!r}")


def _observed(series: DefenderSeries, lag: int, boundary: str) -> np.ndarray:
    return series.y[lag:] if boundary == "drop" else series.y


def emission_density(y_t: float, t: int, j: int, series: DefenderSeries,
                     spec: EmissionSpec) -> float:
    """Normal density of ``y_t`` under state ``j`` at frame ``t``."""
    mu = series.offense_y[j, max(t - spec.lag, 0)]
    z = (y_t - mu) / spec.sigma
    return float(np.exp(-0.5 * z * z) / (spec.sigma * np.sqrt(2.0 * np.pi)))


def softmax_rows(eta: np.ndarray) -> np.ndarray:
    eta = eta - eta.max(axis=-1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=-1, keepdims=True)


def transition_matrix(t: int, series: DefenderSeries, spec: TransitionSpec,
                      lag: int) -> np.ndarray:
    """Row-stochastic t.p.m. governing the move into frame ``t``."""
    mu = series.offense_y[:, max(t - lag, 0)]
    dist = np.abs(mu[:, None] - mu[None, :])
    a = spec.offset(series.role, series.team, series.play_key)
    eta = (a + spec.beta1 * dist) * _OFFDIAG
    return softmax_rows(eta)


def initial_distribution(series: DefenderSeries, alpha: float = 1.0) -> np.ndarray:
    """Softmax over negative first-frame distances to the five receivers."""
    d = np.abs(series.y[0] - series.offense_y[:, 0])
    return softmax_rows(-alpha * d)


# ----------------------------------------------------------------------------
# Batched machinery. Series of unequal length are right-padded; padded steps
# use an identity t.p.m. and unit emissions so they leave the recursion alone.


@dataclass
class SeriesBatch:
    """Padded arrays for B defender series.

    ``mu`` and ``dist`` hold the lagged offensive means and pairwise distances
    at every (kept) frame; ``level`` maps grouping-factor names to per-series
    integer codes, with the level labels in ``levels``.
    """

    y: np.ndarray          # (B, T)
    mu: np.ndarray         # (B, T, 5)
    dist: np.ndarray       # (B, T, 5, 5)
    delta: np.ndarray      # (B, 5)
    lengths: np.ndarray    # (B,)
    level: dict
    levels: dict
    keys: list

    @property
    def B(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.T)[None, :] < self.lengths[:, None]

    def exp_dist(self, b: float):
        """``exp(b * dist)``, cached for the most recent ``b``; None when it
        would overflow (the kernels then exponentiate directly)."""
        b = float(b)
        cached = self.__dict__.get("_exp_cache")
        if cached is not None and cached[0] == b:
            return cached[1]
        if b * float(self.dist.max(initial=0.0)) > 600.0:
            return None
        E = np.exp(b * self.dist)
        self.__dict__["_exp_cache"] = (b, E)
        return E


def _codes(values: Sequence) -> tuple[np.ndarray, list]:
    labels = sorted(set(values), key=lambda x: (str(type(x)), x))
    index = {lab: i for i, lab in enumerate(labels)}
    return np.array([index[v] for v in values], dtype=np.int64), labels


def make_batch(series: Sequence[DefenderSeries], lag: int, alpha: float = 1.0,
               boundary: str = "clamp") -> SeriesBatch:
    if len(series) == 0:
        raise ValueError("no series given")
    ys, mus = [], []
    deltas = np.empty((len(series), N_STATES))
    for b, s in enumerate(series):
        ys.append(_observed(s, lag, boundary))
        mus.append(lagged_means(s.offense_y, lag, boundary).T)
        deltas[b] = initial_distribution(s, alpha) if boundary == "clamp" else \
            softmax_rows(-alpha * np.abs(ys[-1][0] - mus[-1][0]))
    lengths = np.array([len(v) for v in ys], dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("series shorter than the lag under boundary='drop'")
    T = int(lengths.max())
    y = np.zeros((len(series), T))
    mu = np.zeros((len(series), T, N_STATES))
    for b, (yy, mm) in enumerate(zip(ys, mus)):
        y[b, : len(yy)] = yy
        mu[b, : len(yy)] = mm
        mu[b, len(yy):] = mm[-1]
        y[b, len(yy):] = yy[-1]
    dist = np.abs(mu[..., :, None] - mu[..., None, :])
    level, levels = {}, {}
    for name, vals in (("role", [s.role for s in series]),
                       ("team", [s.team for s in series]),
                       ("play", [s.play_key for s in series])):
        level[name], levels[name] = _codes(vals)
    keys = [(s.play_key, s.defender_index) for s in series]
    return SeriesBatch(y, mu, dist, deltas, lengths, level, levels, keys)


def _log_emissions(batch: SeriesBatch, sigma: float):
    z = (batch.y[..., None] - batch.mu) / sigma
    logp = -0.5 * _LOG_2PI - np.log(sigma) - 0.5 * z * z
    return logp, z


def _tpms(batch: SeriesBatch, a: np.ndarray, b: float) -> np.ndarray:
    eta = (np.asarray(a, dtype=float)[:, None, None, None] + b * batch.dist) * _OFFDIAG
    return softmax_rows(eta)


def forward_batch(batch: SeriesBatch, a: np.ndarray, b: float, sigma: float,
                  derivs: bool = False):
    """Scaled forward recursion for every series in ``batch``.

    ``a`` is the per-series off-diagonal intercept (beta0 plus random effects),
    ``b`` the distance coefficient. Returns the log-likelihood per series; with
    ``derivs=True`` also the gradient with respect to ``(a, b, log sigma)``
    (shape (B, 3)) and the second derivative with respect to ``a`` (shape (B,)),
    propagated in forward mode alongside the recursion.
    """
    a = np.ascontiguousarray(np.broadcast_to(np.asarray(a, dtype=float), (batch.B,)))
    E = batch.exp_dist(b)
    ll, grad, d2a = _kernels.forward_derivs(batch.y, batch.mu, batch.dist,
                                            batch.dist if E is None else E, E is not None,
                                            batch.delta,
                                            batch.lengths, a, float(b), float(sigma),
                                            bool(derivs))
    if not derivs:
        return ll
    return ll, grad, d2a


def forward_backward_batch(batch: SeriesBatch, a: np.ndarray, b: float,
                           sigma: float, gamma: np.ndarray | None = None):
    """Smoothed state probabilities for every series.

    Returns ``(loglik, post, xi_sum, dlog_sigma)``: per-series
    log-likelihoods, posteriors of shape (B, T, 5) (zero on padding), the
    expected transition counts summed over all series and frames, and the
    total derivative of the log-likelihood with respect to log sigma.
    ``gamma`` replaces the covariate t.p.m. by one fixed matrix.
    """
    a = np.ascontiguousarray(np.broadcast_to(np.asarray(a, dtype=float), (batch.B,)))
    fixed = np.eye(N_STATES) if gamma is None else np.ascontiguousarray(gamma, dtype=float)
    return _kernels.forward_backward(batch.y, batch.mu, batch.dist, batch.delta,
                                     batch.lengths, a, float(b), float(sigma),
                                     fixed, gamma is not None)


def viterbi_batch(batch: SeriesBatch, a: np.ndarray, b: float, sigma: float) -> np.ndarray:
    """Most likely state paths, ties broken towards the lowest state index."""
    logp, _ = _log_emissions(batch, sigma)
    with np.errstate(divide="ignore"):
        logG = np.log(_tpms(batch, a, b))
        score = np.log(batch.delta) + logp[:, 0]
    B, T = batch.B, batch.T
    back = np.zeros((B, T, N_STATES), dtype=np.int64)
    for t in range(1, T):
        on = batch.mask[:, t]
        cand = score[:, :, None] + logG[:, t]
        # padded steps carry the path through unchanged
        back[:, t] = np.where(on[:, None], np.argmax(cand, axis=1), np.arange(N_STATES))
        score = np.where(on[:, None], np.max(cand, axis=1) + logp[:, t], score)
    paths = np.zeros((B, T), dtype=np.int64)
    paths[:, -1] = np.argmax(score, axis=1)
    for t in range(T - 1, 0, -1):
        paths[:, t - 1] = np.take_along_axis(back[:, t], paths[:, t, None], axis=1)[:, 0]
    return [paths[i, : batch.lengths[i]] for i in range(B)]


# ----------------------------------------------------------------------------
# Single-series convenience API


def _single(series, emis, trans, alpha, boundary):
    batch = make_batch([series], emis.lag, alpha, boundary)
    a = np.array([trans.offset(series.role, series.team, series.play_key)])
    return batch, a


def forward_loglik(series: DefenderSeries, emis: EmissionSpec, trans: TransitionSpec,
                   alpha: float = 1.0, boundary: str = "clamp") -> float:
    batch, a = _single(series, emis, trans, alpha, boundary)
    return float(forward_batch(batch, a, trans.beta1, emis.sigma)[0])


def local_decode(series: DefenderSeries, emis: EmissionSpec, trans: TransitionSpec,
                 alpha: float = 1.0, boundary: str = "clamp") -> np.ndarray:
    """Posterior matrix of shape (5, T): Pr(S_t = j | y_1..y_T)."""
    batch, a = _single(series, emis, trans, alpha, boundary)
    _, post, _, _ = forward_backward_batch(batch, a, trans.beta1, emis.sigma)
    return post[0, : batch.lengths[0]].T


def viterbi(series: DefenderSeries, emis: EmissionSpec, trans: TransitionSpec,
            alpha: float = 1.0, boundary: str = "clamp") -> np.ndarray:
    batch, a = _single(series, emis, trans, alpha, boundary)
    return viterbi_batch(batch, a, trans.beta1, emis.sigma)[0]

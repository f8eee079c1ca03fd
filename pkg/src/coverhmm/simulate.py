"""Synthetic motion plays with known guarding assignments.

Plays are generated in standardized coordinates (offense moving towards
x = 0) from the same generative model the HMM assumes: a latent chain per
defender drawn from the covariate transition model, and defender y equal to
the lagged y of the guarded receiver plus Gaussian noise. Each play is then
written out in raw tracking format, with extra linemen, a quarterback, a
rushing outside linebacker and a deep safety so that filtering is exercised.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hmm import N_STATES, softmax_rows
from .ingest import (FIELD_LENGTH, FIELD_WIDTH, PlayContext, PlaySeries, RawFrame,
                     build_plays, write_plays, write_tracking)

ROLES = ("CB", "ILB", "MLB", "OLB", "SS", "FS")
_OFFDIAG = 1.0 - np.eye(N_STATES)


@dataclass
class SimConfig:
    n_plays: int = 200
    frames: tuple = (30, 60)          # motion-window length range (inclusive)
    pre_frames: int = 5
    true_theta: tuple = (-4.0, -1.0, 0.5, 0.3, 0.3, 0.3)
    true_lag: int = 4
    man_fraction: float = 0.25
    seed: int = 0
    noise_sd: float | None = None     # overrides true_theta[2] when set
    n_teams: int = 8
    roles: tuple = ROLES
    motion_range: tuple = (5.0, 20.0)
    label_signal: float = 1.5         # coverage dependence on the play effect
    depth_signal: float = 0.0         # man-coverage defenders align this much closer
    reaction_signal: float = 0.0      # extra retreat (yd) of man-coverage defenders during motion
    include_extras: bool = True

    def __post_init__(self):
        self.frames = tuple(int(f) for f in self.frames)
        self.true_theta = tuple(float(t) for t in self.true_theta)
        if not 0.0 <= self.man_fraction <= 1.0:
            raise ValueError("man_fraction must lie in [0, 1]")
        if self.frames[0] < self.true_lag + 10 or self.frames[1] < self.frames[0]:
            raise ValueError("frame range must satisfy lag + 10 <= min <= max")
        if self.n_plays < 1 or self.n_teams < 2:
            raise ValueError("need at least one play and two teams")
        if self.reaction_signal < 0:
            raise ValueError("reaction_signal must be >= 0")
        if self.pre_frames < 1:
            raise ValueError("pre_frames must be >= 1")
        if min(self.true_theta[2:]) <= 0 or (self.noise_sd is not None and self.noise_sd < 0):
            raise ValueError("standard deviations must be positive")

    @property
    def emission_sd(self) -> float:
        return self.true_theta[2] if self.noise_sd is None else self.noise_sd


@dataclass
class SimPlay:
    series: PlaySeries
    true_states: np.ndarray     # (5 defenders, window length), receivers in series order
    label: str
    w: float


@dataclass
class SimData:
    config: SimConfig
    plays: list
    frames: list
    contexts: dict
    u: dict
    v: dict

    @property
    def series(self) -> list[PlaySeries]:
        return [p.series for p in self.plays]

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tracking(self.frames, out / "tracking.csv")
        write_plays(self.contexts, out / "plays.csv")
        truth = {
            "config": asdict(self.config), "u": self.u, "v": self.v,
            "plays": [{"play_key": list(p.series.play_key), "label": p.label, "w": p.w,
                       "true_states": p.true_states.tolist()} for p in self.plays],
        }
        with open(out / "truth.json", "w") as fh:
            json.dump(truth, fh)


def _ease(n, dist):
    s = np.linspace(0.0, 1.0, n)
    return dist * (1.0 - np.cos(np.pi * s)) / 2.0


def _receivers(rng):
    while True:
        y = np.sort(rng.uniform(8.0, FIELD_WIDTH - 8.0, N_STATES))[::-1]
        if np.min(-np.diff(y)) >= 3.0:
            return y


def _simulate_play(cfg: SimConfig, rng, u, v, teams, idx, react_rng=None):
    b0, b1, _, _, _, sw = cfg.true_theta
    sd = cfg.emission_sd
    lag = cfg.true_lag
    L = int(rng.integers(cfg.frames[0], cfg.frames[1] + 1))
    P = cfg.pre_frames
    T = P + L
    off_team, def_team = rng.choice(teams, size=2, replace=False)
    w = float(rng.normal(0.0, sw))
    logit = math.log(max(cfg.man_fraction, 1e-12) / max(1.0 - cfg.man_fraction, 1e-12))
    p_man = 1.0 / (1.0 + math.exp(-(logit - cfg.label_signal * w / sw)))
    label = "man" if rng.uniform() < p_man else "zone"

    los = float(rng.uniform(50.0, 95.0))
    ball_y = float(rng.uniform(22.0, 31.0))
    # receivers in descending y at motion start; window coordinates only
    y0 = _receivers(rng)
    off_roles = list(rng.permutation(["WR", "WR", "WR", "TE", "RB"]))
    off_x0 = np.array([los + (5.0 if r == "RB" else 1.0 + rng.uniform(0, 0.5)) for r in off_roles])
    win_y = np.repeat(y0[:, None], L, axis=1)
    mover = int(rng.integers(N_STATES))
    dist = float(rng.uniform(*cfg.motion_range))
    towards = -1.0 if y0[mover] > FIELD_WIDTH / 2 else 1.0
    dist = min(dist, (y0[mover] - 2.0) if towards < 0 else (FIELD_WIDTH - 2.0 - y0[mover]))
    win_y[mover] = y0[mover] + towards * _ease(L, dist)

    # latent chains over the window
    roles = list(rng.choice(cfg.roles, size=N_STATES))
    states = np.empty((N_STATES, L), dtype=np.int64)
    states[:, 0] = rng.permutation(N_STATES)
    lagged = win_y[:, np.maximum(np.arange(L) - lag, 0)]
    for k in range(N_STATES):
        a = b0 + u[roles[k]] + v[def_team] + w
        for t in range(1, L):
            mu = lagged[:, t]
            eta = (a + b1 * np.abs(mu[:, None] - mu[None, :])) * _OFFDIAG
            G = softmax_rows(eta)
            states[k, t] = rng.choice(N_STATES, p=G[states[k, t - 1]])
    def_y = lagged[states, np.arange(L)[None, :]] + rng.normal(0.0, sd, (N_STATES, L))
    def_y = np.clip(def_y, 0.0, FIELD_WIDTH)
    order = np.argsort(def_y[:, 0], kind="stable")
    states, def_y = states[order], def_y[order]
    roles = [roles[i] for i in order]
    base_depth = rng.uniform(2.0, 8.0, N_STATES)
    shift = -cfg.depth_signal if label == "man" else cfg.depth_signal
    depth = np.clip(base_depth + shift, 2.0, 12.0)
    def_x = los - depth

    pad = lambda arr: np.concatenate([np.repeat(arr[:, :1], P, axis=1), arr], axis=1)
    o_y, d_y = pad(win_y), pad(def_y)
    o_x = np.repeat(off_x0[:, None], T, axis=1)
    d_x = np.repeat(def_x[:, None], T, axis=1)
    if cfg.reaction_signal > 0:
        # defenders drift back over the window; man defenders by reaction_signal more
        back = react_rng.exponential(1.0, N_STATES) + (cfg.reaction_signal if label == "man" else 0.0)
        d_x[:, P:] -= back[:, None] * (_ease(L, 1.0)[None, :])

    players = []   # (id, team, role, xs, ys)
    pid = 100000 + idx * 100
    for k in range(N_STATES):
        players.append((str(pid + k), off_team, off_roles[k], o_x[k], o_y[k]))
        players.append((str(pid + 10 + k), def_team, roles[k], d_x[k], d_y[k]))
    if cfg.include_extras:
        const = lambda val: np.full(T, float(val))
        players.append((str(pid + 20), off_team, "QB", const(los + 5.0), const(ball_y)))
        for j, r in enumerate(["T", "G", "C", "G", "T"]):
            players.append((str(pid + 21 + j), off_team, r, const(los + 1.0), const(ball_y + 1.5 * (j - 2))))
        for j, r in enumerate(["DE", "DT", "NT", "DE"]):
            players.append((str(pid + 30 + j), def_team, r, const(los - 1.0), const(ball_y + 2.0 * (j - 1.5))))
        players.append((str(pid + 40), def_team, "OLB", const(los - 0.8), const(ball_y + 6.0)))
        players.append((str(pid + 41), def_team, "FS", const(los - 45.0), const(FIELD_WIDTH / 2)))

    direction = "right" if rng.uniform() < 0.5 else "left"
    tx = (lambda a: FIELD_LENGTH - a) if direction == "right" else (lambda a: a)
    ty = (lambda a: FIELD_WIDTH - a) if direction == "right" else (lambda a: a)
    game, play = f"G{idx // 50 + 1:03d}", f"P{idx + 1:05d}"
    t_start = P + 1
    t_snap = T
    frames = []
    for f in range(1, T + 1):
        ev = "man_in_motion" if f == t_start else "ball_snap" if f == t_snap else None
        for pid_, team, role, xs, ys in players:
            frames.append(RawFrame(game, play, pid_, f, float(tx(xs[f - 1])), float(ty(ys[f - 1])),
                                   team, role, ev, direction))
        frames.append(RawFrame(game, play, None, f, float(tx(los)), float(ty(ball_y)), "football",
                               "", ev, direction))
    ctx = PlayContext(int(rng.integers(1, 5)), int(rng.integers(1, 5)), float(rng.integers(1, 16)),
                      float(round(los - 10.0, 2)), int(rng.integers(0, 35)), int(rng.integers(0, 35)),
                      float(rng.integers(0, 1801)), label, str(off_team), str(def_team))
    return frames, ctx, states, label, w, [str(pid + 10 + i) for i in range(N_STATES)]


def simulate(cfg: SimConfig) -> SimData:
    """Generate a reproducible synthetic dataset (Philox streams per play)."""
    root = np.random.SeedSequence(cfg.seed)
    shared_ss, *play_ss = root.spawn(cfg.n_plays + 1)
    shared = np.random.Generator(np.random.Philox(shared_ss))
    teams = [f"T{i + 1:02d}" for i in range(cfg.n_teams)]
    _, _, _, su, sv, _ = cfg.true_theta
    u = {r: float(shared.normal(0.0, su)) for r in ROLES}
    v = {t: float(shared.normal(0.0, sv)) for t in teams}
    frames, contexts, truth = [], {}, {}
    for i, ss in enumerate(play_ss):
        rng = np.random.Generator(np.random.Philox(ss))
        react = np.random.Generator(np.random.Philox(ss.spawn(1)[0]))
        fr, ctx, states, label, w, def_ids = _simulate_play(cfg, rng, u, v, teams, i, react)
        key = (fr[0].game_id, fr[0].play_id)
        frames.extend(fr)
        contexts[key] = ctx
        truth[key] = (states, label, w, def_ids)
    series, dropped = build_plays(frames, contexts)
    if dropped:
        raise RuntimeError(f"simulated plays failed filtering: {dropped[:3]}")
    plays = []
    for s in series:
        states, label, w, ids = truth[s.play_key]
        if list(s.defense_ids) != ids:
            raise RuntimeError(f"defender ordering mismatch in {s.play_key}")
        plays.append(SimPlay(s, states, label, w))
    return SimData(cfg, plays, frames, contexts, u, v)


def expected_switch_rate(play: PlaySeries, theta, lag: int, u: dict, v: dict, w: float,
                         states: np.ndarray) -> float:
    """Expected number of switches given the realized previous states."""
    total = 0.0
    win = play.offense_y[:, play.window_slice]
    L = win.shape[1]
    lagged = win[:, np.maximum(np.arange(L) - lag, 0)]
    for k in range(N_STATES):
        a = theta[0] + u[play.defender_roles[k]] + v[play.context.defense] + w
        for t in range(1, L):
            mu = lagged[:, t]
            G = softmax_rows((a + theta[1] * np.abs(mu[:, None] - mu[None, :])) * _OFFDIAG)
            total += 1.0 - G[states[k, t - 1], states[k, t - 1]]
    return total

"""Local decoding of fitted plays and the HMM-derived play features."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .features import HMM_FEATURES
from .fit import FitResult
from .hmm import N_STATES, forward_backward_batch, make_batch

LOG5 = math.log(N_STATES)
TABLE_ROWS = ["Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max."]
TABLE_COLUMNS = [("total_switches", "Total switches"),
                 ("n_switching_defenders", "# switching defenders"),
                 ("mean_entropy", "avg. entropy"),
                 ("per_play_re", "RE/play")]


@dataclass
class HmmFeatures:
    total_switches: int
    n_switching_defenders: int
    mean_entropy: float
    per_play_re: float

    def as_columns(self) -> dict:
        return {"per_play_RE": float(self.per_play_re), "sum_switches": float(self.total_switches),
                "n_player_changes": float(self.n_switching_defenders),
                "avg_entropy": float(self.mean_entropy)}


@dataclass
class DecodedPlay:
    """Posteriors ``(5 defenders, 5 states, T)`` and argmax paths ``(5, T)``
    (0-based state indices; state k is offensive player k + 1)."""

    play_key: tuple
    posteriors: np.ndarray
    sequences: np.ndarray
    frame_ids: np.ndarray


def argmax_sequence(post: np.ndarray) -> np.ndarray:
    """Per-frame most probable state of a ``(5, T)`` posterior; ties go to the
    lowest index."""
    return np.argmax(np.asarray(post), axis=0)


def switch_stats(sequences) -> tuple[int, int]:
    """Total switches over all defenders and the number of defenders that
    switch at least once."""
    seqs = [np.asarray(s) for s in sequences]
    if len({len(s) for s in seqs}) > 1:
        raise ValueError("sequences must have equal length")
    per = [int(np.count_nonzero(s[1:] != s[:-1])) for s in seqs]
    return sum(per), sum(1 for c in per if c > 0)


def mean_entropy(sequences) -> float:
    """Average over defenders of the entropy (nats) of each defender's
    empirical distribution of decoded states."""
    seqs = [np.asarray(s) for s in sequences]
    total = 0.0
    for s in seqs:
        p = np.bincount(s, minlength=N_STATES) / s.size
        p = p[p > 0]
        total -= float(np.sum(p * np.log(p)))
    return total / len(seqs)


def soft_entropy(posteriors: np.ndarray) -> float:
    """Diagnostic only: entropy of the time-averaged posterior, averaged over
    defenders. Not used as a model feature."""
    p = np.asarray(posteriors).mean(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)
    return float(h.mean())


def decode_plays(plays, fit: FitResult) -> list[DecodedPlay]:
    """Forward-backward posteriors for every defender of every play under
    ``fit``. Levels unseen by the fit get random effect 0 (the prior mean)."""
    plays = list(plays)
    cfg = fit.config or {}
    alpha = cfg.get("alpha", 1.0)
    boundary = cfg.get("boundary", "clamp")
    series = [s for p in plays for s in p.defender_series()]
    batch = make_batch(series, fit.lag, alpha, boundary)
    b0, b1, sigma = (float(x) for x in fit.theta_hat[:3])
    a = np.array([b0 + fit.u_hat.get(s.role, 0.0) + fit.v_hat.get(s.team, 0.0)
                  + fit.w_hat.get(s.play_key, 0.0) for s in series])
    _, post, _, _ = forward_backward_batch(batch, a, b1, sigma)
    out = []
    for i, p in enumerate(plays):
        n = int(batch.lengths[5 * i])
        P = np.transpose(post[5 * i: 5 * i + 5, :n], (0, 2, 1)).copy()
        frames = np.arange(p.motion_window[0], p.motion_window[1] + 1)[-n:]
        out.append(DecodedPlay(p.play_key, P, np.argmax(P, axis=1), frames))
    return out


def play_features(decoded: DecodedPlay, per_play_re: float) -> HmmFeatures:
    total, n_sw = switch_stats(decoded.sequences)
    return HmmFeatures(total, n_sw, mean_entropy(decoded.sequences), float(per_play_re))


def attach_hmm_features(rows, fit: FitResult, decodes) -> list:
    """Return copies of ``rows`` with the four HMM features filled in."""
    by_key = {d.play_key: d for d in decodes}
    out = []
    for r in rows:
        if r.play_key not in fit.w_hat:
            raise KeyError(f"play {r.play_key} has no predicted random effect in the fit")
        if r.play_key not in by_key:
            raise KeyError(f"play {r.play_key} was not decoded")
        feats = play_features(by_key[r.play_key], fit.w_hat[r.play_key])
        out.append(replace(r, hmm_features=feats.as_columns()))
    return out


# ----------------------------------------------------------------------------
# Outputs


def summary_table(features) -> dict:
    """Min / quartiles / mean / max of the four HMM features."""
    features = list(features)
    if not features:
        raise ValueError("no plays to summarize")
    table = {}
    for attr, label in TABLE_COLUMNS:
        v = np.array([getattr(f, attr) for f in features], dtype=float)
        q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
        table[label] = dict(zip(TABLE_ROWS, [q[0], q[1], q[2], float(v.mean()), q[3], q[4]]))
    return table


def format_summary_table(table: dict) -> str:
    cols = [label for _, label in TABLE_COLUMNS]
    lines = ["statistic | " + " | ".join(cols)]
    for row in TABLE_ROWS:
        vals = [f"{table[c][row]:.2f}" for c in cols]
        lines.append(f"{row} | " + " | ".join(vals))
    return "\n".join(lines) + "\n"


def _comments(fh, header_lines):
    for line in header_lines:
        fh.write(f"# {line}\n")


def write_posteriors(decodes, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        _comments(fh, header_lines)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gameId", "playId", "defender_index", "frame"]
                   + [f"p{k}" for k in range(1, N_STATES + 1)] + ["argmax"])
        for d in decodes:
            for j in range(d.posteriors.shape[0]):
                for t, frame in enumerate(d.frame_ids):
                    w.writerow([d.play_key[0], d.play_key[1], j + 1, int(frame)]
                               + [repr(float(x)) for x in d.posteriors[j, :, t]]
                               + [int(d.sequences[j, t]) + 1])


def write_hmm_features(features: dict, path, header_lines=()):
    """``features`` maps play_key -> HmmFeatures."""
    with open(path, "w", newline="") as fh:
        _comments(fh, header_lines)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gameId", "playId"] + HMM_FEATURES)
        for key, f in features.items():
            cols = f.as_columns()
            w.writerow([key[0], key[1]] + [repr(cols[c]) for c in HMM_FEATURES])


def read_hmm_features(path) -> dict:
    """play_key -> column dict, inverse of :func:`write_hmm_features`."""
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        if header != ["gameId", "playId"] + HMM_FEATURES:
            raise ValueError(f"{path}: not an HMM feature table")
        return {(r[0], r[1]): dict(zip(HMM_FEATURES, map(float, r[2:]))) for r in reader if r}


def write_summary_table(features, path, header_lines=()):
    with open(path, "w") as fh:
        _comments(fh, header_lines)
        fh.write(format_summary_table(summary_table(features)))

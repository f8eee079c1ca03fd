"""Pre-motion and naive post-motion play features.

All coordinates come from a standardized :class:`~coverhmm.ingest.PlaySeries`
(offense moving towards x = 0). Pre-motion features are taken at the frame
immediately before motion starts; post-motion features summarize the motion
window.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .ingest import PlayContext, PlaySeries

HULL_FEATURES = ["chull_area_o", "chull_area_d", "chull_x_o", "chull_x_d", "chull_y_o", "chull_y_d"]
REL_FEATURES = ([f"x_rel_player_off{k}" for k in range(1, 6)]
                + [f"x_rel_player_def{k}" for k in range(1, 6)]
                + [f"y_rel_player_off{k}" for k in range(1, 6)]
                + [f"y_rel_player_def{k}" for k in range(1, 6)])
CONTEXT_FEATURES = list(PlayContext.FEATURES)
PRE_FEATURES = HULL_FEATURES + REL_FEATURES + CONTEXT_FEATURES
POST_FEATURES = ["max_x_o", "max_x_d", "max_y_o", "max_y_d", "tot_dist_o", "tot_dist_d"]
HMM_FEATURES = ["per_play_RE", "sum_switches", "n_player_changes", "avg_entropy"]

FEATURE_SETS = {
    "pre": PRE_FEATURES,
    "naive": PRE_FEATURES + POST_FEATURES,
    "hmm": PRE_FEATURES + POST_FEATURES + HMM_FEATURES,
}


@dataclass
class FeatureRow:
    play_key: tuple
    label: int | None                      # 1 = man, 0 = zone
    pre_motion: dict
    post_motion_naive: dict
    hmm_features: dict | None = None
    offense: str = ""
    defense: str = ""

    def values(self) -> dict:
        out = dict(self.pre_motion)
        out.update(self.post_motion_naive)
        if self.hmm_features is not None:
            out.update(self.hmm_features)
        return out

    def vector(self, names) -> np.ndarray:
        vals = self.values()
        missing = [n for n in names if n not in vals]
        if missing:
            raise KeyError(f"play {self.play_key} lacks features {missing}")
        return np.array([vals[n] for n in names], dtype=float)


def convex_hull_stats(points) -> tuple[float, float, float]:
    """Area and x/y spans of the convex hull of 2-D points.

    Fewer than three points, or a degenerate (collinear) set, give area 0;
    spans are always the coordinate ranges, which coincide with the ranges
    over hull vertices.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        return 0.0, 0.0, 0.0
    span_x = float(np.ptp(pts[:, 0]))
    span_y = float(np.ptp(pts[:, 1]))
    area = 0.0
    if pts.shape[0] >= 3 and span_x > 0 and span_y > 0:
        try:
            area = float(ConvexHull(pts).volume)  # 2-D "volume" is the area
        except QhullError:
            area = 0.0
    return area, span_x, span_y


def pre_motion_features(series: PlaySeries) -> dict:
    """Hull, ball-relative position and context features before motion."""
    if not series.standardized:
        raise ValueError(f"play {series.play_key} is not standardized")
    pos = series.pre_motion_pos
    ox, oy, dx, dy = series.relative_xy(pos)
    out = {}
    for side, xs, ys in (("o", ox, oy), ("d", dx, dy)):
        area, sx, sy = convex_hull_stats(np.column_stack([xs, ys]))
        out[f"chull_area_{side}"], out[f"chull_x_{side}"], out[f"chull_y_{side}"] = area, sx, sy
    for k in range(5):
        out[f"x_rel_player_off{k + 1}"] = float(ox[k])
        out[f"x_rel_player_def{k + 1}"] = float(dx[k])
        out[f"y_rel_player_off{k + 1}"] = float(oy[k])
        out[f"y_rel_player_def{k + 1}"] = float(dy[k])
    for name, attr in PlayContext.FEATURES.items():
        val = getattr(series.context, attr, None)
        if val is None or (isinstance(val, float) and not math.isfinite(val)):
            raise ValueError(f"play {series.play_key}: context field {name!r} is missing")
        out[name] = float(val)
    return {k: out[k] for k in PRE_FEATURES}


def _side_motion(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float, float]:
    if xs.shape[1] < 2:
        return 0.0, 0.0, 0.0
    max_x = float(np.max(np.ptp(xs, axis=1)))
    max_y = float(np.max(np.ptp(ys, axis=1)))
    tot = float(np.hypot(np.diff(xs, axis=1), np.diff(ys, axis=1)).sum())
    return max_x, max_y, tot


def post_motion_features(series: PlaySeries) -> dict:
    """Largest per-player x and y range and total path length per side over
    the motion window."""
    sl = series.window_slice
    mxo, myo, to = _side_motion(series.offense_x[:, sl], series.offense_y[:, sl])
    mxd, myd, td = _side_motion(series.defense_x[:, sl], series.defense_y[:, sl])
    return {"max_x_o": mxo, "max_x_d": mxd, "max_y_o": myo, "max_y_d": myd,
            "tot_dist_o": to, "tot_dist_d": td}


def label_code(label: str | None) -> int | None:
    return None if label is None else 1 if label == "man" else 0


def feature_row(series: PlaySeries) -> FeatureRow:
    return FeatureRow(series.play_key, label_code(series.context.coverage_label),
                      pre_motion_features(series), post_motion_features(series),
                      offense=series.context.offense, defense=series.context.defense)


def feature_rows(plays) -> list[FeatureRow]:
    return [feature_row(s) for s in plays]


# ----------------------------------------------------------------------------
# Delimited export. Key and team columns lead, the label column closes the row.

_LEAD = ["gameId", "playId", "offense", "defense"]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_feature_matrix(rows, path, names=None, header_lines=()):
    rows = list(rows)
    if names is None:
        names = FEATURE_SETS["hmm"] if rows and all(r.hmm_features is not None for r in rows) \
            else FEATURE_SETS["naive"]
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_LEAD + list(names) + ["label"])
        for r in rows:
            w.writerow([r.play_key[0], r.play_key[1], r.offense, r.defense]
                       + [_fmt(v) for v in r.vector(names)]
                       + ["" if r.label is None else r.label])


def read_feature_matrix(path) -> list[FeatureRow]:
    """Inverse of :func:`write_feature_matrix`; ``#`` comment lines are skipped."""
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader)
        if header[: len(_LEAD)] != _LEAD or header[-1] != "label":
            raise ValueError(f"{path}: not a feature matrix (unexpected header)")
        names = header[len(_LEAD): -1]
        rows = []
        for line in reader:
            if not line:
                continue
            vals = dict(zip(names, map(float, line[len(_LEAD): -1])))
            pre = {k: vals[k] for k in PRE_FEATURES if k in vals}
            post = {k: vals[k] for k in POST_FEATURES if k in vals}
            hmm = {k: vals[k] for k in HMM_FEATURES if k in vals} or None
            rows.append(FeatureRow((line[0], line[1]), int(line[-1]) if line[-1] != "" else None,
                                   pre, post, hmm, line[2], line[3]))
    return rows


def design_matrix(rows, feature_set: str):
    """``(X, y, names)`` for one of the three nested feature sets."""
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}; use one of {sorted(FEATURE_SETS)}")
    names = FEATURE_SETS[feature_set]
    X = np.array([r.vector(names) for r in rows], dtype=float)
    y = np.array([-1 if r.label is None else r.label for r in rows], dtype=np.int64)
    return X, y, list(names)

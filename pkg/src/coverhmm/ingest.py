"""Parsing and filtering of tracking / play-by-play files.

Input files follow the Big Data Bowl column conventions. A play is reduced to
the five offensive skill players and the five coverage defenders closest to
them, truncated at the snap, and standardized so that the offense always moves
towards x = 0.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


FIELD_LENGTH = 120.0
FIELD_WIDTH = 53.3

TRACKING_COLUMNS = ["gameId", "playId", "nflId", "frameId", "x", "y", "club",
                    "position", "event", "playDirection"]
PLAY_COLUMNS = ["gameId", "playId", "quarter", "down", "yardsToGo",
                "absoluteYardlineNumber", "preSnapHomeScore", "preSnapVisitorScore",
                "secondsLeftInHalf", "coverage", "possessionTeam", "defensiveTeam"]

SKILL_ROLES = {"WR", "TE", "RB", "FB", "HB"}
DLINE_ROLES = {"NT", "DT", "DE", "DL"}
MOTION_EVENTS = ("man_in_motion",)
SNAP_EVENTS = ("ball_snap", "snap_direct")
BUNCH_RADIUS = 1.5
RUSHER_WINDOW = 1.5


class ParseError(ValueError):
    pass


class RangeError(ParseError):
    pass


@dataclass(frozen=True)
class RawFrame:
    game_id: str
    play_id: str
    player_id: str | None
    frame_index: int
    x: float
    y: float
    team: str
    role: str
    event: str | None
    play_direction: str


@dataclass(frozen=True)
class PlayContext:
    quarter: int
    down: int
    yards_to_go: float
    absolute_yardline: float
    pre_snap_home_score: int
    pre_snap_visitor_score: int
    seconds_left_in_half: float
    coverage_label: str | None
    offense: str
    defense: str

    # feature name -> attribute, in catalog order
    FEATURES = {
        "quarter": "quarter", "down": "down", "yardsToGo": "yards_to_go",
        "absoluteYardlineNumber": "absolute_yardline",
        "preSnapHomeScore": "pre_snap_home_score",
        "preSnapVisitorScore": "pre_snap_visitor_score",
        "secondsLeftInHalf": "seconds_left_in_half",
    }


@dataclass(frozen=True)
class Excluded:
    play_key: tuple
    reason: str
    detail: str = ""


@dataclass
class PlaySeries:
    """One play's filtered 5-vs-5 trajectories from the first frame to the snap.

    Coordinate matrices are 5 x T; column ``k`` is frame ``frame_ids[k]``.
    ``motion_window`` holds the (1-based, inclusive) frame ids of motion start
    and the snap.
    """

    play_key: tuple
    context: PlayContext
    offense_x: np.ndarray
    offense_y: np.ndarray
    defense_x: np.ndarray
    defense_y: np.ndarray
    ball_x: np.ndarray
    ball_y: np.ndarray
    offense_ids: list
    defense_ids: list
    offense_roles: list
    defender_roles: list
    frame_ids: np.ndarray
    motion_window: tuple
    play_direction: str
    standardized: bool = False

    @property
    def T(self) -> int:
        return len(self.frame_ids)

    def frame_pos(self, frame_id: int) -> int:
        return int(frame_id - self.frame_ids[0])

    @property
    def window_slice(self) -> slice:
        return slice(self.frame_pos(self.motion_window[0]), self.frame_pos(self.motion_window[1]) + 1)

    @property
    def pre_motion_pos(self) -> int:
        return max(self.frame_pos(self.motion_window[0]) - 1, 0)

    def relative_xy(self, pos: int):
        """Offense and defense coordinates at column ``pos`` relative to the ball."""
        bx, by = self.ball_x[pos], self.ball_y[pos]
        return (self.offense_x[:, pos] - bx, self.offense_y[:, pos] - by,
                self.defense_x[:, pos] - bx, self.defense_y[:, pos] - by)

    def defender_series(self):
        """The five motion-window series consumed by the HMM."""
        from .hmm import DefenderSeries
        sl = self.window_slice
        off = self.offense_y[:, sl]
        return [DefenderSeries(self.play_key, k + 1, self.defender_roles[k], self.context.defense,
                               self.defense_y[k, sl], off) for k in range(5)]

    def to_json(self) -> dict:
        ctx = dict(self.context.__dict__)
        return {
            "play_key": list(self.play_key), "context": ctx,
            "offense_x": self.offense_x.tolist(), "offense_y": self.offense_y.tolist(),
            "defense_x": self.defense_x.tolist(), "defense_y": self.defense_y.tolist(),
            "ball_x": self.ball_x.tolist(), "ball_y": self.ball_y.tolist(),
            "offense_ids": self.offense_ids, "defense_ids": self.defense_ids,
            "offense_roles": self.offense_roles, "defender_roles": self.defender_roles,
            "frame_ids": self.frame_ids.tolist(), "motion_window": list(self.motion_window),
            "play_direction": self.play_direction, "standardized": self.standardized,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PlaySeries":
        arr = lambda k: np.array(d[k], dtype=float)
        return cls(tuple(d["play_key"]), PlayContext(**d["context"]), arr("offense_x"),
                   arr("offense_y"), arr("defense_x"), arr("defense_y"), arr("ball_x"),
                   arr("ball_y"), list(d["offense_ids"]), list(d["defense_ids"]),
                   list(d["offense_roles"]), list(d["defender_roles"]),
                   np.array(d["frame_ids"], dtype=np.int64), tuple(d["motion_window"]),
                   d["play_direction"], bool(d["standardized"]))

    def equals(self, other: "PlaySeries") -> bool:
        return json.dumps(self.to_json(), sort_keys=True) == json.dumps(other.to_json(), sort_keys=True)


# ----------------------------------------------------------------------------
# Parsing


def _reader(path):
    fh = open(path, newline="")
    rows = csv.reader(fh)
    header = next(rows, None)
    return fh, header, rows


def _float(value, name, lineno):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ParseError(f"line {lineno}: {name}={value!r} is not a number") from None
    if not math.isfinite(v):
        raise ParseError(f"line {lineno}: {name} is not finite")
    return v


def parse_tracking(path) -> list[RawFrame]:
    fh, header, rows = _reader(path)
    with fh:
        if header is None:
            warnings.warn(f"tracking file {path} is empty")
            return []
        missing = set(TRACKING_COLUMNS) - set(header)
        if missing:
            raise ParseError(f"line 1: missing columns {sorted(missing)}")
        col = {c: header.index(c) for c in TRACKING_COLUMNS}
        out = []
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            get = lambda c: row[col[c]].strip()
            x = _float(get("x"), "x", lineno)
            y = _float(get("y"), "y", lineno)
            if not 0.0 <= x <= FIELD_LENGTH:
                raise RangeError(f"line {lineno}: x={x} outside [0, {FIELD_LENGTH}]")
            if not 0.0 <= y <= FIELD_WIDTH:
                raise RangeError(f"line {lineno}: y={y} outside [0, {FIELD_WIDTH}]")
            direction = get("playDirection")
            if direction not in ("left", "right"):
                raise ParseError(f"line {lineno}: unknown playDirection {direction!r}")
            try:
                frame = int(get("frameId"))
            except ValueError:
                raise ParseError(f"line {lineno}: frameId={get('frameId')!r} is not an integer") from None
            if frame < 1:
                raise ParseError(f"line {lineno}: frameId must be >= 1")
            pid = get("nflId")
            out.append(RawFrame(get("gameId"), get("playId"), pid if pid not in ("", "NA") else None,
                                frame, x, y, get("club"), get("position"), get("event") or None,
                                direction))
    if not out:
        warnings.warn(f"tracking file {path} has no data rows")
    return out


def parse_plays(path) -> dict[tuple, PlayContext]:
    fh, header, rows = _reader(path)
    out = {}
    with fh:
        if header is None:
            warnings.warn(f"play file {path} is empty")
            return out
        missing = set(PLAY_COLUMNS) - set(header)
        if missing:
            raise ParseError(f"line 1: missing columns {sorted(missing)}")
        col = {c: header.index(c) for c in PLAY_COLUMNS}
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            get = lambda c: row[col[c]].strip()
            cov = get("coverage").lower() or None
            if cov not in (None, "man", "zone"):
                raise ParseError(f"line {lineno}: coverage must be man/zone, got {cov!r}")
            try:
                ctx = PlayContext(
                    int(get("quarter")), int(get("down")), _float(get("yardsToGo"), "yardsToGo", lineno),
                    _float(get("absoluteYardlineNumber"), "absoluteYardlineNumber", lineno),
                    int(get("preSnapHomeScore")), int(get("preSnapVisitorScore")),
                    _float(get("secondsLeftInHalf"), "secondsLeftInHalf", lineno), cov,
                    get("possessionTeam"), get("defensiveTeam"))
            except ValueError as e:
                raise ParseError(f"line {lineno}: {e}") from None
            out[(get("gameId"), get("playId"))] = ctx
    return out


def _fmt(v):
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def write_tracking(frames: Iterable[RawFrame], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACKING_COLUMNS)
        for f in frames:
            w.writerow([f.game_id, f.play_id, _fmt(f.player_id) or "NA", f.frame_index, _fmt(f.x),
                        _fmt(f.y), f.team, f.role, _fmt(f.event), f.play_direction])


def write_plays(contexts: dict, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAY_COLUMNS)
        for (g, p), c in contexts.items():
            w.writerow([g, p, c.quarter, c.down, _fmt(c.yards_to_go), _fmt(c.absolute_yardline),
                        c.pre_snap_home_score, c.pre_snap_visitor_score,
                        _fmt(c.seconds_left_in_half), c.coverage_label or "", c.offense, c.defense])


# ----------------------------------------------------------------------------
# Filtering


def _first_event(frames, names):
    hits = [f.frame_index for f in frames if f.event in names]
    return min(hits) if hits else None


def _greedy_nearest(def_xy, off_xy, def_ids, off_ids, k=5):
    """Greedy one-to-one matching by ascending distance; returns kept defender rows."""
    pairs = []
    for i, (dx, dy) in enumerate(def_xy):
        for j, (ox, oy) in enumerate(off_xy):
            pairs.append((math.hypot(dx - ox, dy - oy), str(def_ids[i]), str(off_ids[j]), i, j))
    pairs.sort()
    used_d, used_o, kept = set(), set(), []
    for _, _, _, i, j in pairs:
        if i in used_d or j in used_o:
            continue
        used_d.add(i)
        used_o.add(j)
        kept.append(i)
        if len(kept) == k:
            break
    return sorted(kept)


def filter_players(frames: Sequence[RawFrame], context: PlayContext) -> PlaySeries | Excluded:
    """Reduce one play to five skill players and five coverage defenders."""
    if not frames:
        raise ValueError("no frames given")
    key = (frames[0].game_id, frames[0].play_id)
    t_start = _first_event(frames, MOTION_EVENTS)
    if t_start is None:
        return Excluded(key, "NoMotion")
    t_snap = _first_event(frames, SNAP_EVENTS)
    if t_snap is None:
        return Excluded(key, "NoSnap")
    if t_snap <= t_start:
        return Excluded(key, "NoMotion", "motion starts at or after the snap")
    if context.coverage_label is None:
        return Excluded(key, "NoLabel")

    by_player = defaultdict(list)
    ball = []
    for f in frames:
        if f.frame_index > t_snap:
            continue
        if f.player_id is None or f.team == "football":
            ball.append(f)
        else:
            by_player[f.player_id].append(f)
    frame_ids = np.arange(1, t_snap + 1)
    first = min(f.frame_index for f in frames)
    frame_ids = frame_ids[frame_ids >= first]

    def track(rows):
        rows = sorted(rows, key=lambda r: r.frame_index)
        idx = [r.frame_index for r in rows]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ParseError(f"play {key}: frame_index not strictly increasing")
        if idx != frame_ids.tolist():
            return None
        return np.array([r.x for r in rows]), np.array([r.y for r in rows])

    ball_track = track(ball)
    if ball_track is None:
        return Excluded(key, "MissingFrames", "football")
    role = {p: rows[0].role for p, rows in by_player.items()}
    team = {p: rows[0].team for p, rows in by_player.items()}
    offense = [p for p in by_player if team[p] == context.offense]
    defense = [p for p in by_player if team[p] == context.defense]
    if sum(role[p] == "QB" for p in offense) >= 2:
        return Excluded(key, "TwoQB")
    skill = sorted((p for p in offense if role[p] in SKILL_ROLES), key=str)
    if len(skill) != 5:
        return Excluded(key, "SkillCount", f"{len(skill)} offensive skill players")

    tracks = {}
    for p in skill + defense:
        tr = track(by_player[p])
        if tr is None:
            if p in skill:
                return Excluded(key, "MissingFrames", str(p))
            continue
        tracks[p] = tr
    pos_start = int(t_start - frame_ids[0])
    pos_pre = max(pos_start - 1, 0)

    sk_xy = [(tracks[p][0][pos_start], tracks[p][1][pos_start]) for p in skill]
    close = [[math.hypot(a[0] - b[0], a[1] - b[1]) <= BUNCH_RADIUS for b in sk_xy] for a in sk_xy]
    for i in range(5):
        for j in range(i + 1, 5):
            for k in range(j + 1, 5):
                if close[i][j] and close[i][k] and close[j][k]:
                    return Excluded(key, "Bunch")

    los = ball_track[0][pos_pre]
    eligible = []
    for p in sorted(defense, key=str):
        if p not in tracks or role[p] in DLINE_ROLES:
            continue
        if role[p] == "OLB" and abs(tracks[p][0][pos_pre] - los) <= RUSHER_WINDOW:
            continue
        eligible.append(p)
    if len(eligible) < 5:
        return Excluded(key, "FewDefenders", f"{len(eligible)} eligible defenders")
    if len(eligible) > 5:
        dxy = [(tracks[p][0][pos_start], tracks[p][1][pos_start]) for p in eligible]
        keep = _greedy_nearest(dxy, sk_xy, eligible, skill)
        eligible = [eligible[i] for i in keep]

    series = PlaySeries(
        key, context,
        np.array([tracks[p][0] for p in skill]), np.array([tracks[p][1] for p in skill]),
        np.array([tracks[p][0] for p in eligible]), np.array([tracks[p][1] for p in eligible]),
        ball_track[0], ball_track[1], list(skill), list(eligible),
        [role[p] for p in skill], [role[p] for p in eligible], frame_ids,
        (int(t_start), int(t_snap)), frames[0].play_direction)
    return _order(series)


def _order(s: PlaySeries) -> PlaySeries:
    pos = s.frame_pos(s.motion_window[0])
    o = sorted(range(5), key=lambda i: (-s.offense_y[i, pos], str(s.offense_ids[i])))
    d = sorted(range(5), key=lambda i: (s.defense_y[i, pos], str(s.defense_ids[i])))
    s.offense_x, s.offense_y = s.offense_x[o], s.offense_y[o]
    s.defense_x, s.defense_y = s.defense_x[d], s.defense_y[d]
    s.offense_ids = [s.offense_ids[i] for i in o]
    s.offense_roles = [s.offense_roles[i] for i in o]
    s.defense_ids = [s.defense_ids[i] for i in d]
    s.defender_roles = [s.defender_roles[i] for i in d]
    return s


def standardize(series: PlaySeries) -> PlaySeries:
    """Orient the play so the offense moves towards x = 0 (x is then the
    distance to the relevant end line), then re-apply player ordering."""
    if series.standardized:
        return series
    s = PlaySeries(**series.__dict__)
    if s.play_direction == "right":
        flip_x = lambda a: FIELD_LENGTH - a
        flip_y = lambda a: FIELD_WIDTH - a
        s.offense_x, s.defense_x, s.ball_x = flip_x(s.offense_x), flip_x(s.defense_x), flip_x(s.ball_x)
        s.offense_y, s.defense_y, s.ball_y = flip_y(s.offense_y), flip_y(s.defense_y), flip_y(s.ball_y)
    s.play_direction = "left"
    s.standardized = True
    return _order(s)


def group_frames(frames: Iterable[RawFrame]) -> dict[tuple, list[RawFrame]]:
    out = defaultdict(list)
    for f in frames:
        out[(f.game_id, f.play_id)].append(f)
    return dict(out)


def build_plays(frames: Sequence[RawFrame], contexts: dict) -> tuple[list[PlaySeries], list[Excluded]]:
    """Filter and standardize every play; output is sorted by play key."""
    kept, dropped = [], []
    for key, rows in sorted(group_frames(frames).items()):
        ctx = contexts.get(key)
        if ctx is None:
            dropped.append(Excluded(key, "NoContext"))
            continue
        res = filter_players(rows, ctx)
        if isinstance(res, Excluded):
            dropped.append(res)
        else:
            kept.append(standardize(res))
    return kept, dropped


def ingest(tracking_path, plays_path):
    return build_plays(parse_tracking(tracking_path), parse_plays(plays_path))


def write_series(plays: Iterable[PlaySeries], path, header_lines=()):
    """One JSON record per play; optional ``#`` comment lines first."""
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        for p in plays:
            fh.write(json.dumps(p.to_json()) + "\n")


def read_series(path) -> list[PlaySeries]:
    with open(path) as fh:
        return [PlaySeries.from_json(json.loads(line)) for line in fh
                if line.strip() and not line.startswith("#")]

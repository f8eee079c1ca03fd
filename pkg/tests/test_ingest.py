import numpy as np
import pytest

from coverhmm.ingest import (
    Excluded,
    ParseError,
    PlayContext,
    RangeError,
    RawFrame,
    build_plays,
    filter_players,
    ingest,
    parse_tracking,
    read_series,
    standardize,
    write_series,
)
from coverhmm.simulate import SimConfig, simulate

HEADER = "gameId,playId,nflId,frameId,x,y,club,position,event,playDirection\n"


def ctx(label="man"):
    return PlayContext(1, 2, 7.0, 45.0, 3, 0, 900.0, label, "KC", "BUF")


def make_play(direction="left", n_frames=4, extra_def=(), qbs=1, skill=None, los=40.0):
    """Five skill players spread across the field, five coverage defenders
    shadowing them, plus any ``extra_def`` = [(id, role, x, y)]."""
    skill = skill if skill is not None else [(f"O{k}", "WR", los + 1.0, 10.0 + 8.0 * k) for k in range(5)]
    players = list(skill)
    players += [(f"Q{k}", "QB", los + 5.0, 26.0 + k) for k in range(qbs)]
    players += [(f"D{k}", "CB", los - 5.0, 10.5 + 8.0 * k) for k in range(5)]
    teams = {p[0]: "KC" if p[0][0] in "OQ" else "BUF" for p in players}
    players += list(extra_def)
    for p in extra_def:
        teams[p[0]] = "BUF"
    frames = []
    for f in range(1, n_frames + 1):
        ev = "man_in_motion" if f == 2 else "ball_snap" if f == n_frames else None
        for pid, role, x, y in players:
            frames.append(RawFrame("G1", "P1", pid, f, x, y, teams[pid], role, ev, direction))
        frames.append(RawFrame("G1", "P1", None, f, los, 26.0, "football", "", ev, direction))
    return frames


def mirror(frames):
    flip = {"left": "right", "right": "left"}
    return [RawFrame(f.game_id, f.play_id, f.player_id, f.frame_index, 120.0 - f.x,
                     round(53.3 - f.y, 10), f.team, f.role, f.event, flip[f.play_direction])
            for f in frames]


def test_parse_row_maps_fields(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text(HEADER + "G1,P1,N7,1,35.2,26.1,KC,WR,,left\n")
    (fr,) = parse_tracking(p)
    assert (fr.frame_index, fr.x, fr.y, fr.player_id, fr.event) == (1, 35.2, 26.1, "N7", None)


def test_parse_out_of_range_x(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text(HEADER + "G1,P1,N7,1,130,26.1,KC,WR,,left\n")
    with pytest.raises(RangeError, match="line 2"):
        parse_tracking(p)


@pytest.mark.parametrize("row", ["G1,P1,N7,1,,26.1,KC,WR,,left",
                                 "G1,P1,N7,1,35,26.1,KC,WR,,up",
                                 "G1,P1,N7,x,35,26.1,KC,WR,,left",
                                 "G1,P1,N7,1,35,26.1,KC"])
def test_parse_malformed_rows(tmp_path, row):
    p = tmp_path / "t.csv"
    p.write_text(HEADER + row + "\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_tracking(p)


def test_parse_empty_file_warns(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("")
    with pytest.warns(UserWarning):
        assert parse_tracking(p) == []


def test_seven_back_defenders_keep_five_closest():
    extra = [("S1", "FS", 0.0, 26.0), ("S2", "SS", 5.0, 30.0)]   # deep safeties
    res = filter_players(make_play(extra_def=extra), ctx())
    assert not isinstance(res, Excluded)
    assert sorted(res.defense_ids) == [f"D{k}" for k in range(5)]


def test_identity_retention():
    res = filter_players(make_play(), ctx())
    assert sorted(res.defense_ids) == [f"D{k}" for k in range(5)]
    assert sorted(res.offense_ids) == [f"O{k}" for k in range(5)]


def test_linemen_and_rushing_olb_removed():
    extra = [("L1", "DE", 39.0, 20.0), ("L2", "NT", 39.0, 26.0), ("R1", "OLB", 39.0, 33.0),
             ("M1", "OLB", 34.0, 40.0)]
    res = filter_players(make_play(extra_def=extra), ctx())
    assert "L1" not in res.defense_ids and "L2" not in res.defense_ids and "R1" not in res.defense_ids


def test_two_qb_excluded():
    res = filter_players(make_play(qbs=2), ctx())
    assert isinstance(res, Excluded) and res.reason == "TwoQB"


def test_bunch_excluded():
    skill = [(f"O{k}", "WR", 41.0, 10.0 + 0.5 * k) for k in range(3)] + \
            [(f"O{k}", "WR", 41.0, 30.0 + 8.0 * k) for k in range(3, 5)]
    res = filter_players(make_play(skill=skill), ctx())
    assert isinstance(res, Excluded) and res.reason == "Bunch"


def test_missing_motion_and_label_excluded():
    frames = [RawFrame(f.game_id, f.play_id, f.player_id, f.frame_index, f.x, f.y, f.team, f.role,
                       None if f.event == "man_in_motion" else f.event, f.play_direction)
              for f in make_play()]
    assert filter_players(frames, ctx()).reason == "NoMotion"
    assert filter_players(make_play(), ctx(None)).reason == "NoLabel"


def test_few_defenders_excluded():
    frames = [f for f in make_play() if f.player_id != "D0"]
    assert filter_players(frames, ctx()).reason == "FewDefenders"


def test_ordering_rules():
    res = filter_players(make_play(), ctx())
    pos = res.frame_pos(res.motion_window[0])
    assert np.all(np.diff(res.offense_y[:, pos]) <= 0)
    assert np.all(np.diff(res.defense_y[:, pos]) >= 0)


def test_standardize_mirror_and_idempotence():
    left = standardize(filter_players(make_play("left"), ctx()))
    right = standardize(filter_players(mirror(make_play("left")), ctx()))
    for attr in ("offense_x", "offense_y", "defense_x", "defense_y", "ball_x", "ball_y"):
        np.testing.assert_allclose(getattr(left, attr), getattr(right, attr), atol=1e-9)
    assert left.defense_ids == right.defense_ids
    again = standardize(left)
    assert again.equals(left)


def test_right_play_x_is_mirrored_distance():
    frames = [RawFrame(f.game_id, f.play_id, f.player_id, f.frame_index, 100.0 if f.player_id == "O0" else f.x,
                       f.y, f.team, f.role, f.event, "right") for f in make_play()]
    s = standardize(filter_players(frames, ctx()))
    k = s.offense_ids.index("O0")
    assert s.offense_x[k, 0] == pytest.approx(20.0)


def test_relative_coordinates_zero_at_ball():
    frames = make_play()
    frames = [RawFrame(f.game_id, f.play_id, f.player_id, f.frame_index,
                       40.0 if f.player_id == "D2" else f.x, 26.0 if f.player_id == "D2" else f.y,
                       f.team, f.role, f.event, f.play_direction) for f in frames]
    s = standardize(filter_players(frames, ctx()))
    _, _, dx, dy = s.relative_xy(0)
    k = s.defense_ids.index("D2")
    assert (dx[k], dy[k]) == (0.0, 0.0)


def test_filtering_deterministic_and_sorted():
    frames = make_play()
    a, _ = build_plays(frames, {("G1", "P1"): ctx()})
    b, _ = build_plays(list(reversed(frames)), {("G1", "P1"): ctx()})
    assert a[0].equals(b[0])


def test_sim_round_trip(tmp_path):
    data = simulate(SimConfig(n_plays=6, seed=3))
    data.write(tmp_path)
    kept, dropped = ingest(tmp_path / "tracking.csv", tmp_path / "plays.csv")
    assert dropped == []
    assert len(kept) == len(data.plays)
    for got, want in zip(kept, data.series):
        assert got.equals(want)
    write_series(kept, tmp_path / "series.jsonl")
    back = read_series(tmp_path / "series.jsonl")
    assert all(x.equals(y) for x, y in zip(back, kept))

"""Cross-fitted out-of-sample evaluation and the leave-one-offense-out
motion-benefit analysis."""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .classifiers import P_CLIP, fit_tuned, logloss, predict_proba
from .features import design_matrix
from .folds import RNG_ALGORITHM, make_rng, stratified_folds

METRICS = ("accuracy", "auc", "logloss")
MAX_REDRAWS = 20


# ----------------------------------------------------------------------------
# Metrics


def accuracy(y, p) -> float:
    """Share of plays classified correctly when predicting man for p >= 0.5."""
    y = np.asarray(y)
    return float(np.mean((np.asarray(p) >= 0.5) == (y == 1)))


def auc(y, p) -> float:
    """Rank (Mann-Whitney) estimate of the AUC with tied scores counted 1/2."""
    y = np.asarray(y)
    n1 = int(np.count_nonzero(y == 1))
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    r = rankdata(np.asarray(p, dtype=float))
    return float((r[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def metrics(y, p) -> dict:
    return {"accuracy": accuracy(y, p), "auc": auc(y, p), "logloss": logloss(y, p)}


# ----------------------------------------------------------------------------
# Cross-fitting


@dataclass
class EvalRun:
    seed: int
    model_class: str
    feature_set: str
    fold_assignment: dict        # play_key -> fold 1..k
    oos_probs: dict              # play_key -> out-of-sample P(man)
    metrics: dict
    params: list = field(default_factory=list)    # tuned hyperparameters per fold
    rng_algorithm: str = RNG_ALGORITHM


def _sub_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1)[0])


def outer_folds(y, k: int, seed: int) -> np.ndarray:
    """Stratified fold ids; redrawn (up to a limit) if some training split
    would lack a class."""
    for attempt in range(MAX_REDRAWS):
        folds = stratified_folds(y, k, make_rng(seed, 0, attempt))
        if all(np.unique(y[folds != f]).size == 2 for f in range(k)):
            return folds
    raise ValueError("cannot draw folds with both classes in every training split")


def _labelled(rows, feature_set):
    X, y, names = design_matrix(rows, feature_set)
    if np.any(y < 0):
        missing = [r.play_key for r in rows if r.label is None][:3]
        raise ValueError(f"coverage labels missing (e.g. {missing})")
    if np.unique(y).size < 2:
        raise ValueError("both coverage classes are needed for evaluation")
    return X, y, names


def cross_fit(rows, model_class: str, feature_set: str, seed: int, k: int = 5,
              inner_k: int = 5, grid: dict | None = None) -> EvalRun:
    """Out-of-sample P(man) for every play from k outer folds, with the
    hyperparameters tuned by inner ``inner_k``-fold cross-validation on each
    training split."""
    rows = list(rows)
    X, y, names = _labelled(rows, feature_set)
    folds = outer_folds(y, k, seed)
    p = np.empty(y.size)
    params = []
    for f in range(k):
        tr, te = folds != f, folds == f
        model, res = fit_tuned(X[tr], y[tr], model_class, names, grid, inner_k, _sub_seed(seed, f))
        p[te] = predict_proba(model, X[te], names)
        params.append(res.params)
    keys = [r.play_key for r in rows]
    return EvalRun(seed, model_class, feature_set,
                   {kk: int(f) + 1 for kk, f in zip(keys, folds)},
                   {kk: float(v) for kk, v in zip(keys, p)},
                   metrics(y, p), params)


def _job(args):
    rows, mc, fs, seed, k, inner_k, grid = args
    return cross_fit(rows, mc, fs, seed, k, inner_k, grid)


def repeated_eval(rows, repeats: int = 50, seeds=None, model_classes=("enet", "gbt"),
                  feature_sets=("pre", "naive", "hmm"), k: int = 5, inner_k: int = 5,
                  grid: dict | None = None, n_jobs: int = 1, base_seed: int = 0):
    """``repeats`` cross-fitting runs per (model class, feature set).

    Run ``r`` uses the same seed (hence the same outer folds) for every
    configuration. Returns ``(runs, table)`` where ``runs`` maps
    (model, feature_set) to the list of EvalRuns and ``table`` holds
    long-format tuples (metric, model, feature_set, run, value).
    """
    rows = list(rows)
    if seeds is None:
        seeds = [_sub_seed(base_seed, 101, r) for r in range(repeats)]
    seeds = [int(s) for s in seeds]
    if len(seeds) != repeats:
        raise ValueError("need one seed per repeat")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    for fs in feature_sets:
        _labelled(rows, fs)          # fail fast on missing labels or features
    jobs = [(mc, fs, r) for mc in model_classes for fs in feature_sets for r in range(repeats)]
    args = [(rows, mc, fs, seeds[r], k, inner_k, grid) for mc, fs, r in jobs]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_job, args))
    else:
        results = [_job(a) for a in args]
    runs = {}
    for (mc, fs, r), res in zip(jobs, results):
        runs.setdefault((mc, fs), []).append(res)
    table = [(m, mc, fs, r + 1, runs[(mc, fs)][r].metrics[m])
             for m in METRICS for mc in model_classes for fs in feature_sets for r in range(repeats)]
    return runs, table


def write_metric_table(table, path, header_lines=()):
    """Long-format metrics; a ``neg_logloss`` row accompanies every logloss
    row for plots on a higher-is-better axis."""
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "model", "feature_set", "run", "value"])
        for m, mc, fs, r, v in table:
            w.writerow([m, mc, fs, r, repr(float(v))])
            if m == "logloss":
                w.writerow(["neg_logloss", mc, fs, r, repr(-float(v))])


def write_predictions(runs, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "feature_set", "run", "seed", "gameId", "playId", "fold", "p_man"])
        for (mc, fs), lst in runs.items():
            for i, run in enumerate(lst):
                for key, pv in run.oos_probs.items():
                    w.writerow([mc, fs, i + 1, run.seed, key[0], key[1],
                                run.fold_assignment[key], repr(pv)])


def median_metric(runs_list, metric: str) -> float:
    return float(np.median([r.metrics[metric] for r in runs_list]))


# ----------------------------------------------------------------------------
# Leave-one-offense-out benefit of the HMM features


@dataclass
class TeamBenefit:
    team: str
    per_play_delta: dict         # play_key -> p_correct(hmm) - p_correct(pre)
    n_motion_plays: int
    n_improved: int
    pct_improved: float
    p_pre: dict = field(default_factory=dict)
    p_hmm: dict = field(default_factory=dict)

    @property
    def median_delta(self) -> float:
        return float(np.median(list(self.per_play_delta.values())))


def p_correct(p, y):
    p = np.clip(np.asarray(p, dtype=float), P_CLIP, 1.0 - P_CLIP)
    return np.where(np.asarray(y) == 1, p, 1.0 - p)


def team_benefit(rows, seed: int, teams=None, inner_k: int = 5, grid: dict | None = None,
                 base_set: str = "pre", hmm_set: str = "hmm"):
    """For each offense: train boosted models on every other offense's plays
    (base features and base + HMM features, each tuned by inner CV), predict
    the held-out offense and compare the probability assigned to the true
    coverage.

    Returns ``(benefits, notes)``; teams without plays are skipped with a note.
    """
    rows = list(rows)
    _labelled(rows, hmm_set)
    teams = sorted({r.offense for r in rows}) if teams is None else list(teams)
    out, notes = [], []
    for i, team in enumerate(teams):
        te = [r for r in rows if r.offense == team]
        tr = [r for r in rows if r.offense != team]
        if not te:
            notes.append(f"team {team}: no motion plays, skipped")
            continue
        y_tr = np.array([r.label for r in tr])
        if np.unique(y_tr).size < 2:
            notes.append(f"team {team}: training plays have a single class, skipped")
            continue
        y_te = np.array([r.label for r in te])
        probs = {}
        for fs in (base_set, hmm_set):
            Xtr, ytr, names = design_matrix(tr, fs)
            Xte, _, _ = design_matrix(te, fs)
            model, _ = fit_tuned(Xtr, ytr, "gbt", names, grid, inner_k, _sub_seed(seed, 201, i))
            probs[fs] = predict_proba(model, Xte, names)
        delta = p_correct(probs[hmm_set], y_te) - p_correct(probs[base_set], y_te)
        keys = [r.play_key for r in te]
        n_imp = int(np.count_nonzero(delta > 0))
        out.append(TeamBenefit(team, dict(zip(keys, map(float, delta))), len(te), n_imp,
                               n_imp / len(te),
                               dict(zip(keys, map(float, probs[base_set]))),
                               dict(zip(keys, map(float, probs[hmm_set])))))
    return out, notes


def write_team_tables(benefits, out_dir, header_lines=()):
    """``team_deltas.csv`` (one row per play) and ``team_summary.csv`` ordered
    by median delta, largest first."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def _open(name):
        fh = open(out / name, "w", newline="")
        for line in header_lines:
            fh.write(f"# {line}\n")
        return fh, csv.writer(fh, lineterminator="\n")

    fh, w = _open("team_deltas.csv")
    with fh:
        w.writerow(["team", "gameId", "playId", "p_pre", "p_hmm", "delta"])
        for b in benefits:
            for key, d in b.per_play_delta.items():
                w.writerow([b.team, key[0], key[1], repr(b.p_pre[key]), repr(b.p_hmm[key]), repr(d)])
    fh, w = _open("team_summary.csv")
    with fh:
        w.writerow(["team", "n_motion_plays", "n_improved", "pct_improved", "median_delta"])
        for b in sorted(benefits, key=lambda b: (-b.median_delta, b.team)):
            w.writerow([b.team, b.n_motion_plays, b.n_improved, repr(b.pct_improved),
                        repr(b.median_delta)])

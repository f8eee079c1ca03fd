"""Command-line entry point: one subcommand per pipeline stage plus
``run-all``, which chains them in a work directory and skips stages whose
inputs, options and outputs are unchanged."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__

DEFAULT_LAG = 4
DEFAULT_LAGS = "1-5"
PIPELINE_STAGES = ("ingest", "fit-hmm", "decode", "extract-features", "evaluate", "train",
                   "gcm", "team-analysis")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


# ----------------------------------------------------------------------------
# Provenance


def config_hash(options: dict) -> str:
    blob = json.dumps(options, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance(stage: str, options: dict, seed: int) -> dict:
    from .folds import RNG_ALGORITHM

    return {"tool": f"coverhmm {__version__}", "stage": stage, "config_hash": config_hash(options),
            "seed": int(seed), "rng": RNG_ALGORITHM}


def header_lines(prov: dict) -> list[str]:
    return [f"{k}={v}" for k, v in prov.items()]


def write_json(obj, path, prov):
    obj = dict(obj)
    obj["provenance"] = prov
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _parse_lags(text: str) -> list[int]:
    out = []
    for part in str(text).split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    return sorted(set(out))


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


# ----------------------------------------------------------------------------
# Stage implementations (each returns the list of files it wrote)


def stage_ingest(tracking, plays, out, seed):
    from .ingest import ingest, write_series

    opts = {"stage": "ingest"}
    prov = provenance("ingest", opts, seed)
    kept, dropped = ingest(tracking, plays)
    if not kept:
        raise ValueError("no plays survived filtering")
    out = _parent(out)
    write_series(kept, out, header_lines(prov))
    excl = out.with_name(out.stem + "_excluded.csv")
    with open(excl, "w") as fh:
        fh.writelines(f"# {h}\n" for h in header_lines(prov))
        fh.write("gameId,playId,reason\n")
        for e in dropped:
            fh.write(f"{e.play_key[0]},{e.play_key[1]},{e.reason}\n")
    return [out, excl]


def _sim_config(cfg: dict, seed, n_plays=None):
    from .simulate import SimConfig

    section = dict(cfg.get("simulate", cfg))
    names = {f.name for f in fields(SimConfig)}
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"unknown simulation settings {sorted(unknown)}")
    if seed is not None:
        section["seed"] = seed
    if n_plays is not None:
        section["n_plays"] = n_plays
    return SimConfig(**section)


def stage_simulate(sim_cfg, out_dir):
    from .simulate import simulate

    data = simulate(sim_cfg)
    out = _out_dir(out_dir)
    data.write(out)
    opts = asdict(sim_cfg)
    with open(out / "provenance.json", "w") as fh:
        json.dump(provenance("simulate", opts, sim_cfg.seed) | {"config": opts}, fh, indent=1,
                  sort_keys=True, default=list)
        fh.write("\n")
    return [out / "tracking.csv", out / "plays.csv", out / "truth.json", out / "provenance.json"]


def _defender_series(series_path):
    from .ingest import read_series

    plays = read_series(series_path)
    if not plays:
        raise ValueError(f"{series_path}: no plays")
    return plays, [s for p in plays for s in p.defender_series()]


def stage_fit(series_path, out, lag, alpha, seed):
    from .fit import FitConfig, fit

    _, series = _defender_series(series_path)
    cfg = FitConfig(lag=lag, alpha=alpha)
    res = fit(series, cfg)
    opts = {"stage": "fit-hmm", "fit": asdict(cfg)}
    write_json(res.to_json(), _parent(out), provenance("fit-hmm", opts, seed))
    return [Path(out)]


def stage_select_lag(series_path, out, lags, alpha, seed):
    from .fit import FitConfig, select_lag

    _, series = _defender_series(series_path)
    best, table = select_lag(series, lags, FitConfig(alpha=alpha))
    opts = {"stage": "select-lag", "lags": list(lags), "alpha": alpha}
    body = {"best_lag": best, "aic": {str(k): v for k, v in table.items()}}
    write_json(body, _parent(out), provenance("select-lag", opts, seed))
    return [Path(out)]


def _load_fit(path):
    from .fit import FitResult

    with open(path) as fh:
        d = json.load(fh)
    d.pop("provenance", None)
    return FitResult.from_json(d)


def stage_decode(series_path, fit_path, out_dir, seed):
    from .decoding import (decode_plays, play_features, write_hmm_features, write_posteriors,
                           write_summary_table)

    plays, _ = _defender_series(series_path)
    fit = _load_fit(fit_path)
    decodes = decode_plays(plays, fit)
    missing = [d.play_key for d in decodes if d.play_key not in fit.w_hat]
    if missing:
        raise KeyError(f"plays {missing[:3]} have no predicted random effect in the fit")
    feats = {d.play_key: play_features(d, fit.w_hat[d.play_key]) for d in decodes}
    opts = {"stage": "decode", "fit": file_hash(fit_path)}
    hl = header_lines(provenance("decode", opts, seed))
    out = _out_dir(out_dir)
    write_posteriors(decodes, out / "posteriors.csv", hl)
    write_hmm_features(feats, out / "hmm_features.csv", hl)
    write_summary_table(feats.values(), out / "summary_table.txt", hl)
    return [out / "posteriors.csv", out / "hmm_features.csv", out / "summary_table.txt"]


def stage_extract(series_path, hmm_path, out, seed):
    from dataclasses import replace

    from .decoding import read_hmm_features
    from .features import feature_rows, write_feature_matrix

    plays, _ = _defender_series(series_path)
    rows = feature_rows(plays)
    if hmm_path is not None:
        hmm = read_hmm_features(hmm_path)
        missing = [r.play_key for r in rows if r.play_key not in hmm]
        if missing:
            raise KeyError(f"plays {missing[:3]} lack HMM features")
        rows = [replace(r, hmm_features=hmm[r.play_key]) for r in rows]
    opts = {"stage": "extract-features", "hmm": hmm_path is not None}
    write_feature_matrix(rows, _parent(out), header_lines=header_lines(
        provenance("extract-features", opts, seed)))
    return [Path(out)]


def _rows(features_path):
    from .features import read_feature_matrix

    rows = read_feature_matrix(features_path)
    if not rows:
        raise ValueError(f"{features_path}: no plays")
    return rows


def stage_train(features_path, model_class, feature_set, out, seed):
    from .classifiers import fit_tuned, model_to_json
    from .evaluate import _labelled

    X, y, names = _labelled(_rows(features_path), feature_set)
    model, res = fit_tuned(X, y, model_class, names, seed=seed)
    opts = {"stage": "train", "model": model_class, "feature_set": feature_set}
    body = model_to_json(model, tuned=res.params, cv_logloss=res.score)
    write_json(body, _parent(out), provenance("train", opts, seed))
    return [Path(out)]


def stage_evaluate(features_path, out_dir, repeats, models, feature_sets, seed, threads):
    from .evaluate import repeated_eval, write_metric_table, write_predictions

    rows = _rows(features_path)
    runs, table = repeated_eval(rows, repeats, model_classes=models, feature_sets=feature_sets,
                                n_jobs=threads, base_seed=seed)
    opts = {"stage": "evaluate", "repeats": repeats, "models": list(models),
            "feature_sets": list(feature_sets)}
    hl = header_lines(provenance("evaluate", opts, seed))
    out = _out_dir(out_dir)
    write_metric_table(table, out / "metrics.csv", hl)
    write_predictions(runs, out / "predictions.csv", hl)
    return [out / "metrics.csv", out / "predictions.csv"]


def stage_gcm(features_path, out, learner, base_set, seed):
    from .gcm import LEARNERS, per_feature_suite, write_gcm_table

    res = per_feature_suite(_rows(features_path), LEARNERS[learner](), base_set, seed=seed)
    opts = {"stage": "gcm", "learner": learner, "base": base_set, "targets": "hmm"}
    write_gcm_table(res, _parent(out), header_lines(provenance("gcm", opts, seed)))
    return [Path(out)]


def stage_team(features_path, out_dir, seed):
    from .evaluate import team_benefit, write_team_tables

    benefits, notes = team_benefit(_rows(features_path), seed)
    for n in notes:
        print(n, file=sys.stderr)
    opts = {"stage": "team-analysis"}
    out = _out_dir(out_dir)
    write_team_tables(benefits, out, header_lines(provenance("team-analysis", opts, seed)))
    return [out / "team_deltas.csv", out / "team_summary.csv"]


# ----------------------------------------------------------------------------
# run-all


def _stage_plan(cfg: dict, work: Path, seed: int, threads: int):
    """(name, input files, options, runner) for each enabled stage."""
    paths = cfg.get("paths", {})
    lag = int(cfg.get("lag", DEFAULT_LAG))
    alpha = float(cfg.get("alpha_init", 1.0))
    ev = cfg.get("evaluate", {})
    repeats = int(ev.get("repeats", 50))
    models = tuple(ev.get("models", ("enet", "gbt")))
    sets = tuple(ev.get("feature_sets", ("pre", "naive", "hmm")))
    g = cfg.get("gcm", {})
    learner, base = g.get("learner", "gbt"), g.get("base", "naive")
    tr = cfg.get("train", {})
    model_class, train_set = tr.get("model", "gbt"), tr.get("feature_set", "hmm")
    series, fitp = work / "series.jsonl", work / "fit.json"
    dec, feats = work / "decode", work / "features.csv"

    if "simulate" in cfg and "tracking" not in paths:
        sim = _sim_config(cfg, cfg.get("seeds", {}).get("simulate", seed))
        tracking, plays = work / "sim" / "tracking.csv", work / "sim" / "plays.csv"
        plan = [("simulate", [], asdict(sim), lambda: stage_simulate(sim, work / "sim"))]
    else:
        tracking, plays = paths.get("tracking"), paths.get("plays")
        if tracking is None or plays is None:
            raise ValueError("config needs paths.tracking and paths.plays (or a simulate section)")
        for p in (tracking, plays):
            if not Path(p).exists():
                raise FileNotFoundError(p)
        plan = []
    plan += [
        ("ingest", [tracking, plays], {}, lambda: stage_ingest(tracking, plays, series, seed)),
        ("fit-hmm", [series], {"lag": lag, "alpha": alpha},
         lambda: stage_fit(series, fitp, lag, alpha, seed)),
        ("decode", [series, fitp], {}, lambda: stage_decode(series, fitp, dec, seed)),
        ("extract-features", [series, dec / "hmm_features.csv"], {},
         lambda: stage_extract(series, dec / "hmm_features.csv", feats, seed)),
        ("evaluate", [feats], {"repeats": repeats, "models": models, "feature_sets": sets},
         lambda: stage_evaluate(feats, work / "evaluate", repeats, models, sets, seed, threads)),
        ("train", [feats], {"model": model_class, "feature_set": train_set},
         lambda: stage_train(feats, model_class, train_set, work / "model.json", seed)),
        ("gcm", [feats], {"learner": learner, "base": base},
         lambda: stage_gcm(feats, work / "gcm.csv", learner, base, seed)),
        ("team-analysis", [feats], {}, lambda: stage_team(feats, work / "team", seed)),
    ]
    enabled = cfg.get("stages")
    if enabled is not None:
        bad = set(enabled) - set(PIPELINE_STAGES) - {"simulate"}
        if bad:
            raise ValueError(f"unknown stages {sorted(bad)}")
        plan = [s for s in plan if s[0] in enabled or s[0] == "simulate"]
    return plan


def _rel(path, work: Path) -> str:
    path = Path(path).resolve()
    try:
        return str(path.relative_to(work.resolve()))
    except ValueError:
        return str(path)


def run_all(cfg: dict, workdir, seed: int, threads: int, log=print) -> int:
    work = _out_dir(workdir)
    manifest_path = work / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    for name, inputs, opts, runner in _stage_plan(cfg, work, seed, threads):
        # inputs by content and outputs relative to the workdir, so a moved workdir resumes
        key = {"options": opts, "seed": seed,
               "inputs": [file_hash(p) if Path(p).exists() else None for p in inputs]}
        digest = config_hash(key)
        prev = manifest.get(name)
        if (prev and prev["key"] == digest
                and all((work / p).exists() and file_hash(work / p) == h
                        for p, h in prev["outputs"].items())):
            log(f"[{name}] up to date, skipped")
            continue
        missing = [str(p) for p in inputs if not Path(p).exists()]
        try:
            if missing:
                raise FileNotFoundError(f"missing inputs {missing}")
            outputs = runner()
        except Exception as exc:          # report the stage and keep earlier artifacts
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        manifest[name] = {"key": digest,
                          "outputs": {_rel(p, work): file_hash(p) for p in outputs}}
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        log(f"[{name}] done")
    return 0


# ----------------------------------------------------------------------------
# argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="root random seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker processes for parallel stages (default: available cores)")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON config file (pipeline settings; for simulate, SimConfig fields "
                             "or a 'simulate' section)")

    ap = argparse.ArgumentParser(prog="coverhmm", parents=[common],
                                 description="Man/zone coverage prediction from pre-snap motion.")
    ap.add_argument("--version", action="version", version=f"coverhmm {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    p = add("ingest", "parse, filter and standardize raw tracking and play files")
    p.add_argument("--tracking", required=True)
    p.add_argument("--plays", required=True)
    p.add_argument("--out", required=True, help="output series file (.jsonl)")

    p = add("simulate", "generate a synthetic dataset in raw tracking format")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-plays", type=int, default=None)

    p = add("fit-hmm", "fit the random-effects HMM by Laplace marginal likelihood")
    p.add_argument("--series", "--data", dest="series", required=True)
    p.add_argument("--lag", type=int, default=None, help=f"lag in frames (default {DEFAULT_LAG})")
    p.add_argument("--alpha", type=float, default=None, help="initial-distribution scale (default 1)")
    p.add_argument("--out", required=True, help="output fit file (.json)")

    p = add("select-lag", "choose the lag by AIC of the homogeneous HMM")
    p.add_argument("--series", required=True)
    p.add_argument("--lags", default=DEFAULT_LAGS, help="e.g. 1-5 or 1,2,4")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--out", required=True)

    p = add("decode", "posterior guarding probabilities and HMM features")
    p.add_argument("--series", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("extract-features", "feature matrix of pre-motion, post-motion and HMM features")
    p.add_argument("--series", required=True)
    p.add_argument("--hmm-features", default=None, help="hmm_features.csv from decode")
    p.add_argument("--out", required=True)

    p = add("train", "tune and fit one classifier on all plays")
    p.add_argument("--features", required=True)
    p.add_argument("--model", choices=["enet", "gbt"], default="gbt")
    p.add_argument("--feature-set", choices=["pre", "naive", "hmm"], default="hmm")
    p.add_argument("--out", required=True)

    p = add("evaluate", "repeated cross-fitted evaluation")
    p.add_argument("--features", required=True)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--models", default="enet,gbt")
    p.add_argument("--feature-sets", default="pre,naive,hmm")
    p.add_argument("--out", required=True, help="output directory")

    p = add("gcm", "conditional-independence tests of the HMM features")
    p.add_argument("--features", required=True)
    p.add_argument("--targets", choices=["hmm"], default="hmm")
    p.add_argument("--learner", choices=["gbt", "linear"], default="gbt")
    p.add_argument("--base", choices=["pre", "naive"], default="naive")
    p.add_argument("--out", required=True)

    p = add("team-analysis", "leave-one-offense-out benefit of the HMM features")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("run-all", "run every stage in a work directory, resuming completed ones")
    p.add_argument("--workdir", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    seed = getattr(args, "seed", 0)
    threads = getattr(args, "threads", None) or os.cpu_count() or 1
    stage = args.command
    try:
        cfg = load_config(getattr(args, "config", None))
        c = args.command
        if c == "ingest":
            stage_ingest(args.tracking, args.plays, args.out, seed)
        elif c == "simulate":
            stage_simulate(_sim_config(cfg, getattr(args, "seed", None), args.n_plays), args.out)
        elif c == "fit-hmm":
            lag = args.lag if args.lag is not None else int(cfg.get("lag", DEFAULT_LAG))
            alpha = args.alpha if args.alpha is not None else float(cfg.get("alpha_init", 1.0))
            stage_fit(args.series, args.out, lag, alpha, seed)
        elif c == "select-lag":
            alpha = args.alpha if args.alpha is not None else float(cfg.get("alpha_init", 1.0))
            stage_select_lag(args.series, args.out, _parse_lags(args.lags), alpha, seed)
        elif c == "decode":
            stage_decode(args.series, args.fit, args.out, seed)
        elif c == "extract-features":
            stage_extract(args.series, args.hmm_features, args.out, seed)
        elif c == "train":
            stage_train(args.features, args.model, args.feature_set, args.out, seed)
        elif c == "evaluate":
            stage_evaluate(args.features, args.out, args.repeats,
                           tuple(args.models.split(",")), tuple(args.feature_sets.split(",")),
                           seed, threads)
        elif c == "gcm":
            stage_gcm(args.features, args.out, args.learner, args.base, seed)
        elif c == "team-analysis":
            stage_team(args.features, args.out, seed)
        elif c == "run-all":
            return run_all(cfg, args.workdir, seed, threads)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: stage {stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    warnings.simplefilter("default")
    sys.exit(main())

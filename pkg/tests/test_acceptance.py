"""Acceptance suite: one test per criterion, each recording a pass/fail line
that is printed in the terminal summary."""
import math
import time

import numpy as np
import pytest
from scipy.stats import kstest

from coverhmm.classifiers import fit_elastic_net, fit_gbt, logloss, sigmoid
from coverhmm.cli import main
from coverhmm.decoding import (TABLE_ROWS, attach_hmm_features, decode_plays, format_summary_table,
                               mean_entropy, play_features, summary_table, switch_stats)
from coverhmm.evaluate import auc, metrics, repeated_eval
from coverhmm.features import feature_rows
from coverhmm.fit import FitConfig, GaussianInterceptData, fit, laplace_marginal, select_lag, to_working
from coverhmm.gcm import LinearLearner, gcm_omnibus, gcm_single
from coverhmm.hmm import EmissionSpec, TransitionSpec, forward_loglik, local_decode
from coverhmm.ingest import ingest
from coverhmm.simulate import SimConfig, simulate

from oracles import auc_pairs, brute_force_hmm, gcm_null_data, newton_logistic
from test_classifiers import logistic_data
from test_decoding import truth_fit
from test_fit import fd_check, gaussian_marginal
from test_hmm import random_series

THETA_STAR = (-4.0, -1.0, 0.5, 0.3, 0.3, 0.3)
RECOVERY_SEED = 0          # fixed before any recovery run was inspected
TRUE_LAG = 3
# Planted-signal design, one signal tier per feature set: defender depth before
# motion (pre), extra retreat of man defenders during motion (naive), and the
# play effect driving both switching and the coverage label (hmm only).
PLANTED = dict(n_plays=500, seed=2024, true_theta=(-3.0, -1.0, 0.5, 0.3, 0.3, 1.5),
               label_signal=3.0, depth_signal=0.25, reaction_signal=1.0)


def _flat_defenders(data):
    return [s for p in data.series for s in p.defender_series()]


def test_c01_forward_oracle(criterion):
    t0 = time.time()
    worst_ll = worst_post = 0.0
    for seed in range(120):
        rng = np.random.default_rng(10_000 + seed)
        T = int(rng.integers(1, 7))
        s = random_series(rng, T)
        a, b = rng.normal(-2, 1.5), rng.normal(-0.3, 0.4)
        sig, lag = rng.uniform(0.3, 3), int(rng.integers(0, 3))
        ll, post, _ = brute_force_hmm(s.y, s.offense_y, a, b, sig, lag)
        emis, trans = EmissionSpec(sig, lag), TransitionSpec(a, b)
        worst_ll = max(worst_ll, abs(forward_loglik(s, emis, trans) - ll))
        worst_post = max(worst_post, float(np.abs(local_decode(s, emis, trans) - post).max()))
    dt = time.time() - t0
    ok = worst_ll < 1e-8 and worst_post < 1e-8 and dt < 10
    criterion(1, ok, f"120 instances, max |dll|={worst_ll:.2e}, max |dpost|={worst_post:.2e}, {dt:.1f}s")
    assert ok


def test_c02_laplace_exact(criterion):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        n, g = int(rng.integers(10, 60)), int(rng.integers(2, 9))
        groups = rng.integers(0, g, size=n)
        groups[:g] = np.arange(g)
        mu, se, sw = rng.normal(0, 2), rng.uniform(0.2, 2.5), rng.uniform(0.1, 2.5)
        y = mu + rng.normal(0, sw, g)[groups] + rng.normal(0, se, n)
        val, _ = laplace_marginal(to_working([mu, 0.0, se, 1.0, 1.0, sw]), GaussianInterceptData(y, groups))
        worst = max(worst, abs(val - gaussian_marginal(y, groups, mu, se, sw)))
    ok = worst < 1e-8
    criterion(2, ok, f"20 draws, max |error|={worst:.2e}")
    assert ok


def test_c03_gradient_check(criterion):
    worst = 0.0
    for seed in range(100, 120):
        g, num = fd_check(seed)
        worst = max(worst, float((np.abs(g - num) / np.maximum(1.0, np.abs(num))).max()))
    ok = worst < 1e-5
    criterion(3, ok, f"20 instances, max relative error={worst:.2e}")
    assert ok


@pytest.mark.slow
def test_c04_simulation_recovery(criterion):
    t0 = time.time()
    data = simulate(SimConfig(n_plays=200, seed=RECOVERY_SEED, true_theta=THETA_STAR,
                              true_lag=TRUE_LAG))
    res = fit(_flat_defenders(data), FitConfig(lag=TRUE_LAG))
    rel = np.abs(res.theta_hat[:3] - np.array(THETA_STAR[:3])) / np.abs(THETA_STAR[:3])
    hits = 0
    for rep in range(10):
        d = simulate(SimConfig(n_plays=200, seed=7000 + rep, true_theta=THETA_STAR, true_lag=TRUE_LAG))
        best, _ = select_lag(_flat_defenders(d), range(1, 6))
        hits += best == TRUE_LAG
    dt = time.time() - t0
    ok = bool(np.all(rel < 0.15)) and hits >= 9 and dt < 900
    est = ", ".join(f"{v:.3f}" for v in res.theta_hat[:3])
    criterion(4, ok, f"(b0, b1, sigma)=({est}), rel err max {rel.max():.3f}; lag {TRUE_LAG} "
                     f"selected {hits}/10; {dt:.0f}s")
    assert ok


def _decode_accuracy(noise, seed):
    data = simulate(SimConfig(n_plays=50, seed=seed, noise_sd=noise))
    dec = decode_plays(data.series, truth_fit(data))
    return float(np.concatenate([(d.sequences == p.true_states).ravel()
                                 for d, p in zip(dec, data.plays)]).mean())


def test_c05_decoding_accuracy(criterion):
    low, high = _decode_accuracy(0.05, 31), _decode_accuracy(0.5, 32)
    ok = low >= 0.99 and high >= 0.90
    criterion(5, ok, f"accuracy {low:.4f} at noise 0.05, {high:.4f} at noise 0.5")
    assert ok


def test_c06_feature_formulas(criterion):
    split = [np.array([0] * 10 + [3] * 10)] + [np.full(20, k) for k in (1, 2, 4, 0)]
    e_err = abs(mean_entropy(split) - math.log(2) / 5)
    rng = np.random.default_rng(6)
    count_ok = True
    for _ in range(20):
        seqs, want_total, want_n = [], 0, 0
        for _ in range(5):
            runs = int(rng.integers(1, 5))
            states, lens = [int(rng.integers(5))], rng.integers(1, 6, size=runs)
            for _ in range(runs - 1):
                states.append(int((states[-1] + rng.integers(1, 5)) % 5))
            seq = np.repeat(states, lens)
            seqs.append(seq[:12] if seq.size >= 12 else np.concatenate([seq, np.full(12 - seq.size, seq[-1])]))
        for s in seqs:
            c = sum(1 for i in range(1, len(s)) if s[i] != s[i - 1])
            want_total += c
            want_n += c > 0
        count_ok &= switch_stats(seqs) == (want_total, want_n)
    iff_ok = True
    for _ in range(1000):
        T = int(rng.integers(2, 30))
        seqs = [np.full(T, rng.integers(5)) if rng.random() < 0.5 else rng.integers(0, 5, T)
                for _ in range(5)]
        zero_ent = mean_entropy(seqs) == 0.0
        iff_ok &= zero_ent == (switch_stats(seqs)[0] == 0)
    ok = e_err < 1e-12 and count_ok and iff_ok
    criterion(6, ok, f"entropy error {e_err:.1e}; hand counts {'match' if count_ok else 'differ'}; "
                     f"entropy=0 iff no switches on 1000 plays: {iff_ok}")
    assert ok


def test_c07_classifier_oracles(criterion):
    worst = 0.0
    for seed in range(5):
        X, y = logistic_data(seed)
        m = fit_elastic_net(X, y, 0.0, 0.5)
        got = np.array([m.intercept] + [m.coefs[f"x{j}"] for j in range(X.shape[1])])
        worst = max(worst, float(np.abs(got - newton_logistic(X, y)).max()))
    rng = np.random.default_rng(0)
    x = (rng.uniform(size=400) < 0.4).astype(float)
    y = (rng.uniform(size=400) < np.where(x == 1, 0.7, 0.2)).astype(int)
    stump = fit_gbt(x[:, None], y, depth=1, rate=1.0, rounds=1)
    p0 = y.mean()
    expect = [math.log(p0 / (1 - p0)) - np.sum(p0 - y[x == v]) / ((x == v).sum() * p0 * (1 - p0) + 1.0)
              for v in (0.0, 1.0)]
    stump_err = float(np.abs(stump.decision_function(np.array([[0.0], [1.0]])) - expect).max())
    mono = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X, y = logistic_data(seed, n=int(rng.integers(50, 400)), p=int(rng.integers(1, 8)))
        m = fit_gbt(X, y, int(rng.integers(1, 5)), float(rng.choice([0.05, 0.1, 0.3])), 60)
        losses = [logloss(y, sigmoid(m.base_score))] + m.train_loss
        mono &= bool(np.all(np.diff(losses) <= 1e-12))
    ok = worst < 1e-5 and stump_err < 1e-12 and mono
    criterion(7, ok, f"enet vs Newton {worst:.1e}; stump {stump_err:.1e}; "
                     f"non-increasing loss on 10 datasets: {mono}")
    assert ok


@pytest.mark.slow
def test_c08_gcm_calibration(criterion):
    t0 = time.time()
    lin = LinearLearner()
    ps, po = [], []
    for s in range(1000):
        Y, X, Z = gcm_null_data(s, n=500)
        ps.append(gcm_single(Y, X[:, 0], Z, lin, seed=s).p_value)
        po.append(gcm_omnibus(Y, X, Z, lin, seed=s).p_value)
    rate = float(np.mean(np.array(ps) < 0.05))
    ks = kstest(po, "uniform").statistic
    dt = time.time() - t0
    ok = 0.03 <= rate <= 0.07 and ks < 0.05 and dt < 1800
    criterion(8, ok, f"single-test rejection rate {rate:.3f}; omnibus KS {ks:.4f}; {dt:.0f}s")
    assert ok


@pytest.mark.slow
def test_c09_pipeline_ordering(criterion):
    data = simulate(SimConfig(**PLANTED))
    res = fit(_flat_defenders(data), FitConfig(lag=data.config.true_lag))
    rows = attach_hmm_features(feature_rows(data.series), res, decode_plays(data.series, res))
    runs, _ = repeated_eval(rows, repeats=10, model_classes=("gbt",), base_seed=PLANTED["seed"])
    ll = {fs: [r.metrics["logloss"] for r in runs[("gbt", fs)]] for fs in ("pre", "naive", "hmm")}
    wins = sum(h < n < p for p, n, h in zip(ll["pre"], ll["naive"], ll["hmm"]))
    med = {fs: float(np.median(v)) for fs, v in ll.items()}
    ok = wins >= 8
    criterion(9, ok, f"hmm < naive < pre in {wins}/10 repeats; median logloss pre {med['pre']:.4f}, "
                     f"naive {med['naive']:.4f}, hmm {med['hmm']:.4f}")
    assert ok


def test_c10_metrics(criterion):
    worst = 0.0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 201))
        y = (rng.random(n) < 0.35).astype(int)
        y[:2] = [0, 1]
        p = np.round(rng.random(n), int(rng.integers(1, 4)))
        worst = max(worst, abs(auc(y, p) - auc_pairs(y, p)))
    y = (np.random.default_rng(99).random(250) < 0.25).astype(int)
    prev = y.mean()
    m = metrics(y, np.full(y.size, prev))
    ent = -(prev * math.log(prev) + (1 - prev) * math.log(1 - prev))
    ok = worst < 1e-12 and m["auc"] == 0.5 and abs(m["logloss"] - ent) < 1e-12
    criterion(10, ok, f"rank vs pairwise AUC {worst:.1e}; constant AUC {m['auc']}; "
                      f"logloss - entropy {abs(m['logloss'] - ent):.1e}")
    assert ok


def test_c11_cli_reproducible(criterion, tmp_path):
    sim = tmp_path / "sim"
    assert main(["--seed", "4", "simulate", "--n-plays", "60", "--out", str(sim)]) == 0
    series = tmp_path / "series.jsonl"
    assert main(["ingest", "--tracking", str(sim / "tracking.csv"), "--plays", str(sim / "plays.csv"),
                 "--out", str(series)]) == 0
    feats = tmp_path / "features.csv"
    assert main(["extract-features", "--series", str(series), "--out", str(feats)]) == 0
    same = True
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["--seed", "11", "evaluate", "--features", str(feats), "--repeats", "2",
                     "--feature-sets", "pre,naive", "--out", str(out)]) == 0
    for f in ("metrics.csv", "predictions.csv"):
        same &= (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    criterion(11, same, "evaluate run twice with seed 11: metric and prediction tables "
                        + ("byte-identical" if same else "differ"))
    assert same


def test_c12_format_fidelity(criterion, tmp_path):
    data = simulate(SimConfig(n_plays=40, seed=12))
    data.write(tmp_path)
    kept, dropped = ingest(tmp_path / "tracking.csv", tmp_path / "plays.csv")
    lossless = not dropped and len(kept) == 40 and all(a.equals(b) for a, b in zip(kept, data.series))
    fit_ = truth_fit(data)
    feats = [play_features(d, fit_.w_hat[d.play_key]) for d in decode_plays(data.series, fit_)]
    text = format_summary_table(summary_table(feats)).splitlines()
    layout = (text[0] == "statistic | Total switches | # switching defenders | avg. entropy | RE/play"
              and [t.split(" | ")[0] for t in text[1:]] == TABLE_ROWS
              and all(len(t.split(" | ")) == 5 for t in text))
    ok = lossless and layout
    criterion(12, ok, f"40-play round trip {'lossless' if lossless else 'lossy'}; summary table layout "
                      f"{'ok' if layout else 'wrong'}")
    assert ok

import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from coverhmm.fit import (
    FitConfig,
    GaussianInterceptData,
    HmmData,
    LaplaceError,
    joint_negloglik,
    laplace_marginal,
    to_working,
)
from coverhmm.hmm import DefenderSeries, EmissionSpec, TransitionSpec, forward_loglik

from oracles import brute_force_hmm


def gaussian_marginal(y, groups, mu, sig_e, sig_w):
    total = 0.0
    for g in np.unique(groups):
        yg = y[groups == g]
        n = yg.size
        cov = sig_e ** 2 * np.eye(n) + sig_w ** 2 * np.ones((n, n))
        total += multivariate_normal(np.full(n, mu), cov).logpdf(yg)
    return total


def small_hmm_data(rng, n_plays=3, T=5, teams=("A", "B"), roles=("CB", "FS", "SS")):
    series = []
    for p in range(n_plays):
        off = rng.uniform(5, 45, size=(5, T)) + rng.normal(0, 1.0, size=(5, T)).cumsum(axis=1)
        team = teams[p % len(teams)]
        for d in range(5):
            y = off[rng.integers(5)] + rng.normal(0, 1.0, T)
            series.append(DefenderSeries(("g", p), d + 1, roles[(p + d) % len(roles)], team, y, off))
    return series


@pytest.mark.parametrize("seed", range(5))
def test_laplace_exact_for_gaussian_intercepts(seed):
    rng = np.random.default_rng(seed)
    groups = rng.integers(0, 7, size=40)
    mu, se, sw = rng.normal(), rng.uniform(0.3, 2), rng.uniform(0.2, 2)
    y = mu + rng.normal(0, sw, 7)[groups] + rng.normal(0, se, 40)
    data = GaussianInterceptData(y, groups)
    th = to_working([mu, 0.0, se, 1.0, 1.0, sw])
    val, _ = laplace_marginal(th, data)
    assert val == pytest.approx(gaussian_marginal(y, groups, mu, se, sw), abs=1e-8)


def test_laplace_without_random_effects_is_joint_loglik():
    rng = np.random.default_rng(1)
    series = small_hmm_data(rng, n_plays=2)
    data = HmmData(series, lag=1)
    th = to_working([-3.0, -0.5, 1.2, 0.3, 0.3, 0.3])
    val, mode = laplace_marginal(th, data, factors=[])
    direct = sum(forward_loglik(s, EmissionSpec(1.2, 1), TransitionSpec(-3.0, -0.5)) for s in series)
    assert mode == {}
    assert val == pytest.approx(direct, rel=1e-12)


def test_small_sigma_w_recovers_fixed_effects_model():
    rng = np.random.default_rng(2)
    series = small_hmm_data(rng, n_plays=3)
    data = HmmData(series, lag=1)
    th = to_working([-3.0, -0.5, 1.2, 0.3, 0.3, 1e-6])
    val, mode = laplace_marginal(th, data, factors=["play"])
    fixed, _ = laplace_marginal(th, data, factors=[])
    assert np.abs(mode["play"]).max() < 1e-9
    assert val == pytest.approx(fixed, abs=1e-6)


def test_joint_negloglik_decomposition_and_additivity():
    rng = np.random.default_rng(3)
    series = small_hmm_data(rng, n_plays=1)[:1]
    data = HmmData(series, lag=2)
    th = to_working([-2.0, -0.7, 0.9, 0.5, 0.4, 0.3])
    eff = {"role": np.zeros(1), "team": np.zeros(1), "play": np.zeros(1)}
    ll = forward_loglik(series[0], EmissionSpec(0.9, 2), TransitionSpec(-2.0, -0.7))
    consts = sum(math.log(s) + 0.5 * math.log(2 * math.pi) for s in (0.5, 0.4, 0.3))
    assert joint_negloglik(th, eff, data) == pytest.approx(-ll + consts, rel=1e-12)
    doubled = HmmData(series * 2, lag=2)
    assert joint_negloglik(th, {}, doubled) == pytest.approx(2 * joint_negloglik(th, {}, data), rel=1e-12)


def test_joint_negloglik_matches_independent_summation():
    rng = np.random.default_rng(4)
    series = small_hmm_data(rng, n_plays=2, T=4)
    data = HmmData(series, lag=1)
    th_nat = [-2.5, -0.4, 1.1, 0.6, 0.5, 0.7]
    eff = {f: rng.normal(0, 0.5, len(data.labels[f])) for f in ("role", "team", "play")}
    expected = 0.0
    for s in series:
        a = th_nat[0]
        a += eff["role"][data.labels["role"].index(s.role)]
        a += eff["team"][data.labels["team"].index(s.team)]
        a += eff["play"][data.labels["play"].index(s.play_key)]
        expected -= brute_force_hmm(s.y, s.offense_y, a, th_nat[1], th_nat[2], 1)[0]
    for f, sd in zip(("role", "team", "play"), th_nat[3:]):
        expected -= sum(-0.5 * math.log(2 * math.pi) - math.log(sd) - 0.5 * x * x / sd ** 2 for x in eff[f])
    assert joint_negloglik(to_working(th_nat), eff, data) == pytest.approx(expected, rel=1e-10)


def fd_check(seed):
    rng = np.random.default_rng(seed)
    series = small_hmm_data(rng, n_plays=int(rng.integers(2, 4)), T=int(rng.integers(3, 9)))
    data = HmmData(series, lag=int(rng.integers(0, 3)))
    th = np.array([rng.normal(-2, 1), rng.normal(-0.5, 0.3), rng.normal(0, 0.3),
                   rng.normal(-1, 0.3), rng.normal(-1, 0.3), rng.normal(-1, 0.3)])
    eff = {f: rng.normal(0, 0.4, len(data.labels[f])) for f in ("role", "team", "play")}
    _, g_th, g_eff = joint_negloglik(th, eff, data, grad=True)
    flat = np.concatenate([th] + [eff[f] for f in ("role", "team", "play")])
    g = np.concatenate([g_th] + [g_eff[f] for f in ("role", "team", "play")])
    sizes = [len(eff[f]) for f in ("role", "team", "play")]

    def f(x):
        parts = np.split(x[6:], np.cumsum(sizes)[:-1])
        return joint_negloglik(x[:6], dict(zip(("role", "team", "play"), parts)), data)

    num = np.empty_like(flat)
    for i in range(flat.size):
        h = 1e-6 * (1 + abs(flat[i]))
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        num[i] = (f(xp) - f(xm)) / (2 * h)
    return g, num


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_central_differences(seed):
    g, num = fd_check(seed)
    rel = np.abs(g - num) / np.maximum(1.0, np.abs(num))
    assert rel.max() < 1e-5


def test_nonpositive_sd_rejected():
    with pytest.raises(ValueError):
        to_working([-4, -1, 0.5, 0.0, 0.3, 0.3])


def test_laplace_permutation_invariant():
    rng = np.random.default_rng(6)
    series = small_hmm_data(rng, n_plays=4)
    th = to_working([-3.0, -0.5, 1.0, 0.4, 0.4, 0.6])
    v1, _ = laplace_marginal(th, HmmData(series, lag=1))
    perm = rng.permutation(len(series))
    v2, _ = laplace_marginal(th, HmmData([series[i] for i in perm], lag=1))
    assert v1 == pytest.approx(v2, rel=1e-10)


def test_config_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        FitConfig(inner_tol=0)

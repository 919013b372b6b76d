import math

import numpy as np
import pytest

from sorelkit.envs import random_mdp
from sorelkit.mdp import Dataset, TabularMdp, TabularPolicy, policy_evaluation, sample_dataset
from sorelkit.posterior import ConjugatePosterior, fit_conjugate, prior
from sorelkit.regret import (NoCompleteEpisodeError, all_stats, approx_regret, episode_returns, max_regret,
                             policy_value_gap_bound, predictive_returns, r_max_hat, regret_bound_thm1,
                             regret_curve_thm2)
from sorelkit.solver import bayes_objective_estimate


def test_thm1_bound_values():
    assert regret_bound_thm1(0.0, 0.9, 0.0, 1.0) == 0.0
    assert regret_bound_thm1(1e6, 0.9, 0.0, 1.0) == pytest.approx(2 * max_regret(0.9, 0.0, 1.0))
    assert regret_bound_thm1(math.log(2), 0.0, 0.0, 1.0) == pytest.approx(2 * math.sqrt(0.5), abs=1e-12)
    assert policy_value_gap_bound(math.log(2), 0.0, 0.0, 1.0) == pytest.approx(math.sqrt(0.5))
    with pytest.raises(ValueError):
        regret_bound_thm1(-1.0, 0.9, 0.0, 1.0)


def test_thm2_limits_and_monotonicity():
    n = np.geomspace(1, 1e12, 400)
    c = regret_curve_thm2(1.0, 100, 0.99, n)
    assert c.values[-1] < 1e-3
    assert np.all(np.diff(c.values) <= 0)
    big = regret_curve_thm2(1.0, 1000, 0.99, n)
    assert np.all(big.values >= c.values)
    main = regret_curve_thm2(1.0, 100, 0.99, n, form="main")
    assert np.all(np.diff(main.values) >= 0) and main.values[-1] > 1.0


def test_thm2_first_crossing_matches_closed_form():
    n = np.geomspace(1, 1e12, 4000)
    # bound < 1/4 with R = 1/2 means 1 - exp(-x) < 1/16, i.e. N > C d / ((1 - g) * -log(15/16))
    crossings = []
    for d in (10, 100, 1000, 10000):
        first = regret_curve_thm2(1.0, d, 0.99, n).first_below(0.25)
        exact = d / (0.01 * -math.log(15 / 16))
        assert exact <= first <= exact * (n[1] / n[0]) * (1 + 1e-12)
        crossings.append(first)
    assert all(b > a for a, b in zip(crossings, crossings[1:]))


def _point_mass(mdp, n=1e12):
    counts = mdp.transition * n
    return ConjugatePosterior(mdp.spec, prior(mdp.spec).prior, counts, mdp.reward_mean * counts.sum(-1))


def test_predictive_returns_point_mass_and_k1():
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    mdp = TabularMdp(P, np.array([[0.1, 0.5], [0.3, 0.2]]), 0.1, 0.9, np.array([1.0, 0.0]))
    pol = TabularPolicy(np.array([[0.4, 0.6], [0.5, 0.5]]))
    rets = predictive_returns(_point_mass(mdp), pol, 20, seed=0)
    assert np.allclose(rets, policy_evaluation(mdp, pol), atol=1e-6)
    assert len(predictive_returns(_point_mass(mdp), pol, 1)) == 1


def test_predictive_mean_resampling():
    mdp = random_mdp(3, 2, np.random.default_rng(0))
    post = fit_conjugate(mdp.spec, sample_dataset(mdp, TabularPolicy.uniform(3, 2), 60, seed=1))
    pol = TabularPolicy.uniform(3, 2)
    a = predictive_returns(post, pol, 10000, seed=1)
    b = predictive_returns(post, pol, 10000, seed=2)
    se = math.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
    assert abs(a.mean() - b.mean()) < 3 * se


def test_bayes_objective_error_shrinks_with_k():
    mdp = random_mdp(3, 2, np.random.default_rng(4))
    post = fit_conjugate(mdp.spec, sample_dataset(mdp, TabularPolicy.uniform(3, 2), 40, seed=0))
    pol = TabularPolicy.uniform(3, 2)
    small = [bayes_objective_estimate(post, pol, 100, seed=s) for s in range(50)]
    large = [bayes_objective_estimate(post, pol, 200, seed=1000 + s) for s in range(50)]
    ratio = np.std(large, ddof=1) / np.std(small, ddof=1)
    assert 0.5 < ratio < 0.95  # 1/sqrt(2) up to the noise of 50 repeats


def test_bayes_objective_zero_rewards():
    mdp = TabularMdp(random_mdp(3, 2, np.random.default_rng(0)).transition, np.zeros((3, 2)), 0.1, 0.9,
                     np.array([1.0, 0, 0]))
    post = prior(mdp.spec, mu0=0.0, tau0_sq=1e-30)
    assert bayes_objective_estimate(post, TabularPolicy.uniform(3, 2), 50) == pytest.approx(0.0, abs=1e-12)


def _episodes(rewards_per_episode, gamma=0.5, max_steps=100):
    r, done = [], []
    for ep in rewards_per_episode:
        r.extend(ep)
        done.extend([False] * (len(ep) - 1) + [True])
    n = len(r)
    return Dataset(np.zeros(n, int), np.zeros(n, int), np.array(r, float), np.zeros(n, int),
                   np.array(done), state_dim=1, action_dim=1, gamma=gamma, max_steps=max_steps)


def test_r_max_hat_examples():
    assert r_max_hat(_episodes([[1.0]], gamma=0.5, max_steps=1)) == 2.0
    assert r_max_hat(_episodes([[3.0], [5.0]])) == 5.0
    with pytest.raises(NoCompleteEpisodeError):
        r_max_hat(Dataset(np.zeros(2, int), np.zeros(2, int), np.ones(2), np.zeros(2, int),
                          np.zeros(2, bool), state_dim=1, action_dim=1))


def test_r_max_hat_scan():
    rng = np.random.default_rng(0)
    eps = [list(rng.normal(size=rng.integers(1, 9))) for _ in range(30)]
    g, s = 0.8, 6
    best = -np.inf
    for ep in eps:
        ret = sum(r * g ** t for t, r in enumerate(ep))
        if len(ep) >= s:
            ret /= 1 - g ** s
        best = max(best, ret)
    data = _episodes(eps, gamma=g, max_steps=s)
    assert r_max_hat(data) == pytest.approx(best, rel=1e-12)
    assert len(episode_returns(data)) == 30


def test_approx_regret_examples():
    assert approx_regret("median", [1, 2, 3], 4.0).value == 2.0
    assert approx_regret("median", [1, 2, 3, 4], 4.0).value == 1.5
    same = all_stats([2.0, 2.0, 2.0], 2.0)
    assert all(v == 0.0 for v in same.values())
    with pytest.raises(ValueError):
        approx_regret("mode", [1.0], 1.0)


def test_approx_regret_sort_oracle():
    x = np.random.default_rng(3).normal(size=7)
    s = sorted(x.tolist())
    r = 2.0
    st = all_stats(x, r)
    assert st["min"] == pytest.approx(r - s[-1])
    assert st["median"] == pytest.approx(r - s[3])
    assert st["max"] == pytest.approx(r - s[0])
    assert st["min"] <= st["median"] <= st["max"]
    assert st["min"] <= st["mean"] <= st["max"]
    assert st["combined"] == max(st["median"], st["variance2"])

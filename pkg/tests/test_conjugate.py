import numpy as np
import pytest

from sorelkit.envs import random_mdp
from sorelkit.mdp import Dataset, TabularPolicy, TabularSpec, sample_dataset
from sorelkit.posterior import (conjugate_update, fit_conjugate, mean_mdp, prior, sample_posterior_mdp,
                                sample_posterior_mdps)


def _spec(S=3, A=2, sigma=0.5):
    d0 = np.zeros(S)
    d0[0] = 1.0
    return TabularSpec(S, A, 0.9, d0, sigma, 20)


def _one(s, a, r, s2, S=3, A=2):
    return Dataset(np.array([s]), np.array([a]), np.array([r]), np.array([s2]), np.array([False]),
                   state_dim=S, action_dim=A)


def test_empty_update_is_identity():
    p = prior(_spec(), alpha0=0.7)
    empty = Dataset(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, bool),
                    state_dim=3, action_dim=2)
    q = conjugate_update(p, empty)
    assert np.array_equal(q.dirichlet_alpha, p.dirichlet_alpha)
    assert np.array_equal(q.reward_post_mean, p.reward_post_mean)


def test_single_transition_increments_one_count():
    post = conjugate_update(prior(_spec()), _one(1, 0, 0.3, 2))
    expected = np.ones((3, 2, 3))
    expected[1, 0, 2] = 2.0
    assert np.array_equal(post.dirichlet_alpha, expected)


def test_counts_match_brute_force():
    mdp = random_mdp(4, 2, np.random.default_rng(0), reward_std=0.3)
    data = sample_dataset(mdp, TabularPolicy.uniform(4, 2), 500, seed=2)
    post = fit_conjugate(mdp.spec, data, alpha0=0.5)
    counts = np.zeros((4, 2, 4))
    for t in data:
        counts[t.s, t.a, t.s_next] += 1
    assert np.array_equal(post.counts, counts)
    predictive = (counts + 0.5) / (counts + 0.5).sum(-1, keepdims=True)
    assert np.allclose(post.transition_mean, predictive, rtol=0, atol=1e-15)


def test_reward_posterior_closed_form():
    spec = _spec(sigma=0.5)
    rs = [0.2, 0.6, 1.1]
    data = Dataset(np.zeros(3), np.ones(3), np.array(rs), np.zeros(3), np.zeros(3, bool),
                   state_dim=3, action_dim=2)
    post = fit_conjugate(spec, data, mu0=0.1, tau0_sq=2.0)
    prec = 1 / 2.0 + 3 / 0.25
    assert post.reward_post_var[0, 1] == pytest.approx(1 / prec)
    assert post.reward_post_mean[0, 1] == pytest.approx((0.1 / 2.0 + sum(rs) / 0.25) / prec)
    assert post.reward_post_mean[2, 0] == 0.1 and post.reward_post_var[2, 0] == 2.0


def test_noiseless_rewards_pin_the_mean():
    data = Dataset(np.zeros(2), np.zeros(2), np.array([0.4, 0.4]), np.zeros(2), np.zeros(2, bool),
                   state_dim=3, action_dim=2)
    post = fit_conjugate(_spec(sigma=0.0), data)
    assert post.reward_post_mean[0, 0] == 0.4 and post.reward_post_var[0, 0] == 0.0


def test_batch_additivity():
    mdp = random_mdp(3, 2, np.random.default_rng(1))
    data = sample_dataset(mdp, TabularPolicy.uniform(3, 2), 300, seed=0)
    d1, d2 = data.prefix(120), data.subset(np.arange(120, 300))
    p0 = prior(mdp.spec)
    seq = conjugate_update(conjugate_update(p0, d1), d2)
    once = conjugate_update(p0, data)
    assert np.array_equal(seq.counts, once.counts)
    assert np.allclose(seq.reward_sum, once.reward_sum, rtol=1e-12, atol=0)
    shuffled = data.subset(np.random.default_rng(0).permutation(300))
    assert np.array_equal(conjugate_update(p0, shuffled).counts, once.counts)


def test_out_of_range_index_rejected():
    bad = Dataset(np.array([0]), np.array([0]), np.array([0.0]), np.array([4]), np.array([False]),
                  state_dim=5, action_dim=2)
    with pytest.raises(IndexError):
        conjugate_update(prior(_spec()), bad)


def test_sample_concentration_limit():
    spec = _spec(S=3, A=1)
    post = prior(spec, alpha0=1.0)
    counts = np.zeros((3, 1, 3))
    counts[:, 0, 1] = 1e8
    post = type(post)(spec, post.prior, counts, np.zeros((3, 1)))
    P, _ = sample_posterior_mdps(post, 5, np.random.default_rng(0))
    assert np.max(np.abs(P - np.eye(3)[1])) < 1e-6


def test_sample_dirichlet_mean():
    spec = _spec(S=4, A=1)
    counts = np.zeros((4, 1, 4))
    counts[0, 0] = [3.0, 0.0, 7.0, 1.0]
    post = type(prior(spec))(spec, prior(spec).prior, counts, np.zeros((4, 1)))
    P, _ = sample_posterior_mdps(post, 10000, np.random.default_rng(0))
    alpha = counts[0, 0] + 1.0
    assert np.max(np.abs(P[:, 0, 0].mean(0) - alpha / alpha.sum())) < 0.01
    assert np.allclose(P.sum(-1), 1.0)


def test_sampling_is_seeded():
    mdp = random_mdp(3, 2, np.random.default_rng(1))
    post = fit_conjugate(mdp.spec, sample_dataset(mdp, TabularPolicy.uniform(3, 2), 50, seed=0))
    a = sample_posterior_mdp(post, np.random.default_rng(7))
    b = sample_posterior_mdp(post, np.random.default_rng(7))
    assert np.array_equal(a.transition, b.transition)
    assert np.array_equal(a.reward_mean, b.reward_mean)


def test_mean_mdp():
    post = conjugate_update(prior(_spec()), _one(0, 1, 0.5, 2))
    m = mean_mdp(post)
    assert np.allclose(m.transition[0, 1], [0.25, 0.25, 0.5])
    assert np.allclose(m.transition[1, 0], 1 / 3)

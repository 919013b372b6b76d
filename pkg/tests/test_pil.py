import csv

import mpmath
import numpy as np
import pytest
from scipy.special import digamma

from sorelkit.envs import random_mdp
from sorelkit.mdp import Dataset, TabularMdp, TabularPolicy, sample_dataset
from sorelkit.pil import (PilHistory, PilUndefinedError, _report, balance_check, balance_ratio, info_rate,
                          pil_conjugate_validation, pil_gaussian, pil_tabular_exact, rho_weights)
from sorelkit.posterior import ConjugatePosterior, fit_conjugate, prior
from sorelkit.posterior.ensemble import EnsembleConfig, EnsembleModel, init_params


def test_digamma_against_mpmath():
    xs = np.geomspace(1e-3, 1e9, 60)
    for x in xs:
        ref = float(mpmath.digamma(mpmath.mpf(float(x))))
        assert abs(digamma(x) - ref) <= 1e-12 * max(1.0, abs(ref))


# ---------------------------------------------------------------------------
# rho weights
# ---------------------------------------------------------------------------

def test_rho_gamma_zero_is_initial_occupancy():
    mdp = random_mdp(3, 2, np.random.default_rng(0), gamma=0.0)
    pol = TabularPolicy(np.array([[0.3, 0.7], [0.5, 0.5], [1.0, 0.0]]))
    w = rho_weights(mdp, pol).weights
    assert np.allclose(w, mdp.initial_dist[:, None] * pol.probs)


def test_rho_double_sum_two_state_cycle():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 0] = 1.0
    g = 0.5
    mdp = TabularMdp(P, np.zeros((2, 1)), 0.1, g, np.array([1.0, 0.0]))
    pol = TabularPolicy.uniform(2, 1)
    # sum over i of AG(i) times the uniform average over j <= i of the step-j distribution
    brute = np.zeros(2)
    for i in range(61):
        w_i = (1 - g) ** 2 * g ** i * (i + 1)
        for j in range(i + 1):
            brute[j % 2] += w_i / (i + 1)
    assert np.max(np.abs(rho_weights(mdp, pol).weights[:, 0] - brute)) < 1e-9


def test_rho_absorbing_state_gets_tail():
    P = np.zeros((2, 1, 2))
    P[:, 0, 1] = 1.0
    mdp = TabularMdp(P, np.zeros((2, 1)), 0.1, 0.9, np.array([1.0, 0.0]))
    rho = rho_weights(mdp, TabularPolicy.uniform(2, 1))
    assert rho.weights[0, 0] == pytest.approx(0.1)
    assert rho.weights[1, 0] == pytest.approx(0.9)
    assert 0.9 ** rho.horizon < 1e-6


# ---------------------------------------------------------------------------
# exact tabular PIL
# ---------------------------------------------------------------------------

def _deterministic_mdp():
    P = np.zeros((3, 2, 3))
    for s in range(3):
        P[s, 0, s] = 1.0
        P[s, 1, (s + 1) % 3] = 1.0
    return TabularMdp(P, np.arange(6.0).reshape(3, 2) / 6, 0.1, 0.9, np.array([1.0, 0, 0]))


def test_point_mass_posterior_has_no_pil():
    mdp = _deterministic_mdp()
    n = 1e9
    counts = mdp.transition * n
    post = ConjugatePosterior(mdp.spec, prior(mdp.spec).prior, counts, mdp.reward_mean * n)
    rep = pil_tabular_exact(post, mdp, rho_weights(mdp, TabularPolicy.uniform(3, 2)))
    assert rep.pil <= 1e-6
    assert rep.source == "exact_tabular"


def test_prior_pil_matches_closed_form_and_monte_carlo():
    S, A = 3, 1
    P = np.full((S, A, S), 1.0 / S)
    R = np.array([[0.2], [0.0], [-0.1]])
    sigma = 0.5
    mdp = TabularMdp(P, R, sigma, 0.9, np.array([1.0, 0, 0]))
    post = prior(mdp.spec, alpha0=1.0, mu0=0.0, tau0_sq=1.0)
    rho = rho_weights(mdp, TabularPolicy.uniform(S, A))
    rep = pil_tabular_exact(post, mdp, rho)
    # closed form with uniform truth and Dirichlet(1,1,1): log(1/3) - psi(1) + psi(3), plus reward part
    t_kl = np.log(1 / 3) - float(mpmath.digamma(1)) + float(mpmath.digamma(3))
    r_kl = (R[:, 0] ** 2 + 1.0) / (2 * sigma ** 2)
    w = rho.weights[:, 0]
    assert rep.pil == pytest.approx(float(w @ (t_kl + r_kl)), rel=1e-12)
    # Monte-Carlo: exact categorical and Gaussian KLs under posterior draws
    rng = np.random.default_rng(0)
    k = 100000
    theta = rng.dirichlet(np.ones(S), size=(k, S))
    mu = rng.standard_normal((k, S))
    kl = (P[:, 0][None] * (np.log(P[:, 0][None]) - np.log(theta))).sum(-1) \
        + (mu - R[:, 0]) ** 2 / (2 * sigma ** 2)
    samples = kl @ w
    se = samples.std(ddof=1) / np.sqrt(k)
    assert abs(samples.mean() - rep.pil) < 3 * se


def test_pil_positive_and_terms_sum():
    mdp = random_mdp(4, 2, np.random.default_rng(2))
    data = sample_dataset(mdp, TabularPolicy.uniform(4, 2), 300, seed=0)
    rep = pil_tabular_exact(fit_conjugate(mdp.spec, data), mdp, rho_weights(mdp, TabularPolicy.uniform(4, 2)))
    assert rep.pil > 0 and rep.mse_term >= 0 and rep.var_term > 0
    assert rep.pil == rep.mse_term + rep.var_term


# ---------------------------------------------------------------------------
# Gaussian PIL
# ---------------------------------------------------------------------------

def constant_ensemble(means, logvar):
    """Ensemble whose members output fixed normalised means; all variances exp(logvar)."""
    means = np.asarray(means, float)
    M, D = means.shape
    cfg = EnsembleConfig(hidden=(2,), n_members=M, n_elites=M, prior_scale=0.0, batch_size=1)
    params, prior_net = init_params(cfg, 2, D, np.random.default_rng(0))
    for k in ("W0", "b0", "W1"):
        params[k] = np.zeros_like(params[k])
    params["b1"] = np.concatenate([means, np.zeros((M, D))], axis=1)[:, None, :]
    params["xi_max"] = np.full(D, float(logvar))
    params["xi_min"] = np.full(D, float(logvar))
    return EnsembleModel(cfg, params, prior_net, 1, 1, np.zeros(2), np.ones(2), np.zeros(D), np.ones(D),
                         (-10.0, 10.0), np.arange(M), gamma=0.9, max_steps=10)


def _continuous(s, a, r, s_next):
    n = len(r)
    return Dataset(np.reshape(s, (n, 1)), np.reshape(a, (n, 1)), np.asarray(r, float),
                   np.reshape(s_next, (n, 1)), np.zeros(n, bool), discrete=False,
                   state_dim=1, action_dim=1)


def test_gaussian_pil_two_member_hand_oracle():
    model = constant_ensemble([[0.2, -0.1], [0.6, 0.3]], np.log(0.25))
    val = _continuous([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.5], [0.0, 0.2, -0.2])
    rep = pil_gaussian(model, val, min_points=1)
    # average mean (0.4, 0.1); squared errors per point 0.17, 0.37, 0.10
    mse = 0.5 * (0.17 + 0.37 + 0.10) / 3
    # deviations 0.2^2 per dim for both members, variances 0.25 per dim
    var = 0.5 * ((0.04 + 0.04) + (0.25 + 0.25))
    assert abs(rep.mse_term - mse) < 1e-8
    assert abs(rep.var_term - var) < 1e-8
    assert abs(rep.pil - (mse + var)) < 1e-8
    assert abs(rep.spread_term - 0.5 * 0.08) < 1e-8


def test_gaussian_pil_identical_exact_members():
    model = constant_ensemble([[0.3, 0.1], [0.3, 0.1]], np.log(0.5))
    val = _continuous([0.0, 1.0], [0.0, 0.0], [0.3, 0.3], [0.1, 1.1])
    rep = pil_gaussian(model, val, min_points=1)
    assert rep.spread_term == 0.0 and rep.mse_term < 1e-24
    assert rep.var_term == pytest.approx(0.5 * 2 * 0.5)


def test_gaussian_pil_single_member_has_no_spread():
    model = constant_ensemble([[0.3, -0.2]], 0.0)
    val = _continuous([0.0, 0.5], [0.0, 0.0], [1.0, 0.0], [0.0, 0.5])
    rep = pil_gaussian(model, val, min_points=1)
    assert rep.spread_term == 0.0
    assert rep.var_term == pytest.approx(1.0)


def test_gaussian_pil_needs_a_batch():
    model = constant_ensemble([[0.0, 0.0]], 0.0)
    val = _continuous([0.0], [0.0], [0.0], [0.0])
    with pytest.raises(PilUndefinedError):
        pil_gaussian(model, val, min_points=2)


# ---------------------------------------------------------------------------
# offline tabular PIL, balance, history
# ---------------------------------------------------------------------------

def test_conjugate_validation_pil_is_balanced_with_plenty_of_data():
    mdp = random_mdp(4, 2, np.random.default_rng(3), reward_std=0.2)
    data = sample_dataset(mdp, TabularPolicy.uniform(4, 2), 20000, seed=1)
    train, val = data.split(0.2, seed=0)
    rep = pil_conjugate_validation(fit_conjugate(mdp.spec, train), val)
    assert rep.source == "conjugate_validation" and rep.n_points == 4000
    assert balance_check(rep)
    with pytest.raises(PilUndefinedError):
        pil_conjugate_validation(fit_conjugate(mdp.spec, train), val.prefix(3), min_points=10)


def test_balance_ratio_arithmetic():
    assert balance_ratio(0.7, 0.7) == 0.0
    assert balance_check(_report(0.7, 0.7, 1, "x"), 0.0)
    assert balance_ratio(1.0, 0.5) == 0.5
    assert not balance_check(_report(1.0, 0.5, 1, "x"), 0.25)
    assert balance_ratio(1.0, 0.8) == pytest.approx(0.2)
    assert balance_check(_report(1.0, 0.8, 1, "x"), 0.25)
    assert balance_ratio(0.0, 0.0) == 0.0


def _history(pairs):
    h = PilHistory()
    for n, p in pairs:
        h.add(n, _report(p / 2, p / 2, n, "x"))
    return h


def test_info_rate_arithmetic():
    assert all(r == 0.0 for _, r in info_rate(_history([(10, 1.0), (20, 1.0), (40, 1.0)])))
    (_, rate), = info_rate(_history([(100, 0.8), (200, 0.4)]))
    assert rate == pytest.approx(-0.8 / 200)


def test_info_rate_tracks_derivative():
    d = 50.0
    ns = np.arange(1000, 1101, 10)
    for n, rate in info_rate(_history([(int(n), d / n) for n in ns])):
        deriv = -d / n ** 2
        assert abs(rate - deriv) / abs(deriv) < 0.011  # first-order error is step / N


def test_history_csv(tmp_path):
    h = _history([(10, 1.0), (20, 0.5)])
    with pytest.raises(ValueError):
        h.add(20, _report(0.1, 0.1, 20, "x"))
    h.to_csv(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["N", "mse_term", "var_term", "pil", "balance_ratio", "rate"]
    assert rows[1][-1] == "" and float(rows[2][-1]) == pytest.approx(-0.05)

"""Exact Bayesian inference for tabular MDPs.

Transitions get independent Dirichlet rows; mean rewards get independent
Normal posteriors under the known reward noise of the environment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mdp import Dataset, TabularMdp, TabularSpec


@dataclass(frozen=True)
class ConjugatePrior:
    alpha0: float = 1.0  # symmetric Dirichlet concentration
    mu0: float = 0.0
    tau0_sq: float = 1.0

    def __post_init__(self):
        if self.alpha0 <= 0 or self.tau0_sq <= 0:
            raise ValueError("alpha0 and tau0_sq must be positive")


@dataclass(frozen=True)
class ConjugatePosterior:
    """Posterior stored through its sufficient statistics.

    ``counts`` holds (s, a, s') visit counts and ``reward_sum`` the summed
    rewards per (s, a). Everything else is derived.
    """

    spec: TabularSpec
    prior: ConjugatePrior
    counts: np.ndarray  # (S, A, S)
    reward_sum: np.ndarray  # (S, A)

    def __post_init__(self):
        for name in ("counts", "reward_sum"):
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dirichlet_alpha(self) -> np.ndarray:
        return self.counts + self.prior.alpha0

    @property
    def visits(self) -> np.ndarray:
        return self.counts.sum(axis=-1)

    @property
    def reward_post_var(self) -> np.ndarray:
        sigma_sq = self.spec.reward_std ** 2
        if sigma_sq == 0:
            # noiseless rewards: one observation pins the mean
            return np.where(self.visits > 0, 0.0, self.prior.tau0_sq)
        return 1.0 / (1.0 / self.prior.tau0_sq + self.visits / sigma_sq)

    @property
    def reward_post_mean(self) -> np.ndarray:
        sigma_sq = self.spec.reward_std ** 2
        n = self.visits
        if sigma_sq == 0:
            emp = np.divide(self.reward_sum, n, out=np.zeros_like(n), where=n > 0)
            return np.where(n > 0, emp, self.prior.mu0)
        return self.reward_post_var * (self.prior.mu0 / self.prior.tau0_sq + self.reward_sum / sigma_sq)

    @property
    def transition_mean(self) -> np.ndarray:
        alpha = self.dirichlet_alpha
        return alpha / alpha.sum(axis=-1, keepdims=True)


def prior(spec: TabularSpec, alpha0: float = 1.0, mu0: float = 0.0, tau0_sq: float = 1.0) -> ConjugatePosterior:
    S, A = spec.n_states, spec.n_actions
    return ConjugatePosterior(spec, ConjugatePrior(alpha0, mu0, tau0_sq),
                              np.zeros((S, A, S)), np.zeros((S, A)))


def conjugate_update(post: ConjugatePosterior, data: Dataset) -> ConjugatePosterior:
    """Add the counts and reward sums of ``data``; transition order is irrelevant."""
    if len(data) == 0:
        return post
    S, A = post.spec.n_states, post.spec.n_actions
    if not data.discrete:
        raise ValueError("conjugate posterior needs a tabular dataset")
    for name, col, hi in (("s", data.s, S), ("a", data.a, A), ("s_next", data.s_next, S)):
        if col.min() < 0 or col.max() >= hi:
            raise IndexError(f"{name} index out of range [0, {hi})")
    flat = (data.s * A + data.a) * S + data.s_next
    counts = np.bincount(flat, minlength=S * A * S).reshape(S, A, S)
    rsum = np.bincount(data.s * A + data.a, weights=data.r, minlength=S * A).reshape(S, A)
    return ConjugatePosterior(post.spec, post.prior, post.counts + counts, post.reward_sum + rsum)


def fit_conjugate(spec: TabularSpec, data: Dataset, alpha0: float = 1.0, mu0: float = 0.0,
                  tau0_sq: float = 1.0) -> ConjugatePosterior:
    return conjugate_update(prior(spec, alpha0, mu0, tau0_sq), data)


def _dirichlet_rows(alpha: np.ndarray, rng: np.random.Generator, k: int | None) -> np.ndarray:
    shape = alpha.shape if k is None else (k,) + alpha.shape
    g = rng.standard_gamma(np.broadcast_to(alpha, shape))
    tot = g.sum(axis=-1, keepdims=True)
    bad = tot[..., 0] <= 0
    if np.any(bad):
        # every gamma draw underflowed (tiny concentrations): put the mass on the largest alpha
        onehot = np.zeros(alpha.shape)
        idx = np.argmax(alpha, axis=-1)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        g[bad] = np.broadcast_to(onehot, shape)[bad]
        tot = g.sum(axis=-1, keepdims=True)
    return g / tot


def sample_posterior_mdps(post: ConjugatePosterior, k: int, rng: np.random.Generator):
    """Draw ``k`` MDPs at once; returns (transition (k,S,A,S), reward_mean (k,S,A))."""
    P = _dirichlet_rows(post.dirichlet_alpha, rng, k)
    R = post.reward_post_mean + np.sqrt(post.reward_post_var) * rng.standard_normal((k,) + post.reward_sum.shape)
    return P, R


def _as_mdp(post: ConjugatePosterior, P: np.ndarray, R: np.ndarray) -> TabularMdp:
    sp = post.spec
    return TabularMdp(P, R, sp.reward_std, sp.gamma, sp.initial_dist, sp.max_steps, sp.env_id)


def sample_posterior_mdp(post: ConjugatePosterior, rng: np.random.Generator) -> TabularMdp:
    P, R = sample_posterior_mdps(post, 1, rng)
    return _as_mdp(post, P[0], R[0])


def mean_mdp(post: ConjugatePosterior) -> TabularMdp:
    """MDP built from Dirichlet means and reward posterior means."""
    return _as_mdp(post, post.transition_mean, post.reward_post_mean)

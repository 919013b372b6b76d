"""Builtin environments and behaviour-policy mixtures."""
from __future__ import annotations

import numpy as np

from .mdp import ContinuousEnv, LinearPolicy, TabularMdp, TabularPolicy, value_iteration


def single_state(reward: float = 1.0, gamma: float = 0.5, reward_std: float = 0.0) -> TabularMdp:
    return TabularMdp(np.ones((1, 1, 1)), np.full((1, 1), reward), reward_std, gamma, np.ones(1),
                      max_steps=10, env_id="single_state")


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator, gamma: float = 0.9,
               reward_std: float = 0.1, concentration: float = 1.0, max_steps: int = 50,
               env_id: str = "random") -> TabularMdp:
    """Dirichlet transition rows, uniform [0, 1] mean rewards, start in state 0."""
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    P /= P.sum(-1, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    d0 = np.zeros(n_states)
    d0[0] = 1.0
    return TabularMdp(P, R, reward_std, gamma, d0, max_steps, env_id)


def chain5(gamma: float = 0.9, reward_std: float = 0.02, p_forward: float = 0.95,
           p_leap: float = 0.3, lure_reward: float = 0.2, goal_reward: float = 1.0,
           max_steps: int = 50) -> TabularMdp:
    """Five-state chain with a small lure at the start and a large reward at the far end.

    Actions: 0 = back (deterministic; pays the lure at state 0), 1 = forward
    (succeeds with ``p_forward``, otherwise stays), 2 = leap (two states
    forward with ``p_leap``, otherwise back to the start). Leaping is worse
    than walking, but a posterior that has barely seen it can believe
    otherwise. Episodes start in state 0.
    """
    S, A = 5, 3
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s in range(S):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, S - 1)] += p_forward
        P[s, 1, s] += 1.0 - p_forward
        P[s, 2, min(s + 2, S - 1)] += p_leap
        P[s, 2, 0] += 1.0 - p_leap
    R[0, 0] = lure_reward
    R[S - 1, 1] = goal_reward
    d0 = np.zeros(S)
    d0[0] = 1.0
    return TabularMdp(P, R, reward_std, gamma, d0, max_steps, "chain5")


def chain5_behavior(mdp: TabularMdp) -> list[TabularPolicy]:
    """Behaviour cycle for the benchmark: expert, lure-seeking and uniform episodes in turn.

    The expert episode comes first so even the smallest prefix holds a
    near-optimal return; the lure episode next so the start state's actions
    are all seen early.
    """
    S, A = mdp.n_states, mdp.n_actions
    _, opt = value_iteration(mdp)
    lure = TabularPolicy.deterministic([0] * S, A, tag="lure")
    return [TabularPolicy(opt.probs, tag="expert"),
            lure.epsilon_greedy(0.5, tag="lure_eps0.5"),
            TabularPolicy.uniform(S, A)]


def linear1d(gamma: float = 0.95, delta_std: float = 0.005, reward_std: float = 0.01,
             max_steps: int = 50) -> ContinuousEnv:
    """1-D point mass: delta = 0.1 a - 0.05 s, reward -(s^2 + 0.1 a^2), s and a in [-1, 1]."""

    def dynamics(s, a):
        return 0.1 * a - 0.05 * s

    def reward(s, a):
        return -(s[:, 0] ** 2 + 0.1 * a[:, 0] ** 2)

    def init(rng, n):
        return rng.uniform(-1.0, 1.0, size=(n, 1))

    one = np.ones(1)
    return ContinuousEnv(1, 1, dynamics, reward, delta_std, reward_std, gamma, init, max_steps,
                         -one, one, -one, one, env_id="linear1d")


def linear1d_behavior(env: ContinuousEnv) -> list[LinearPolicy]:
    lo, hi = env.action_low, env.action_high
    return [LinearPolicy(np.zeros((1, 2)), lo, hi, std=0.6, tag="random"),
            LinearPolicy(np.array([[-1.0, 0.0]]), lo, hi, std=0.3, tag="controller")]


BUILTINS = {
    "single_state": single_state,
    "chain5": chain5,
    "linear1d": linear1d,
}


def make_env(name: str, **params):
    if name not in BUILTINS:
        raise KeyError(f"unknown builtin environment {name!r}; choose from {sorted(BUILTINS)}")
    return BUILTINS[name](**params)


def default_behavior(env):
    if isinstance(env, TabularMdp):
        if env.env_id == "chain5":
            return chain5_behavior(env)
        return [TabularPolicy.uniform(env.n_states, env.n_actions)]
    if env.env_id == "linear1d":
        return linear1d_behavior(env)
    lo, hi = env.action_low, env.action_high
    return [LinearPolicy(np.zeros((env.action_dim, env.state_dim + 1)), lo, hi, std=0.5, tag="random")]

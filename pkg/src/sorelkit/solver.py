"""Small policy optimisers for the Bayesian objective E_theta[J^pi(theta)].

Both solvers return Markov policies. ``mean_mdp_vi`` plans in the posterior
mean MDP; ``cross_entropy`` searches policy parameters directly against
sampled models.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .mdp import LinearPolicy, TabularPolicy, value_iteration
from .posterior.conjugate import ConjugatePosterior, mean_mdp, sample_posterior_mdps
from .posterior.ensemble import EnsembleModel
from .regret import predictive_returns

SOLVERS = ("mean_mdp_vi", "cross_entropy")


@dataclass(frozen=True)
class SolverConfig:
    solver: str = "mean_mdp_vi"
    population: int = 64
    elite_frac: float = 0.2
    iterations: int = 30
    k_samples: int = 64  # posterior samples (tabular) scoring every candidate
    horizon: int | None = None  # rollout length for ensembles; None uses the model's max_steps
    smoothing: float = 0.0  # weight kept on the previous mean in each update
    init_std: float = 2.0
    min_std: float = 0.3  # floor on the search std so logits keep moving
    n_episodes: int = 16  # episodes per elite member when scoring against an ensemble
    seed: int = 0

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if not 0.0 < self.elite_frac < 1.0:
            raise ValueError("elite_frac must lie in (0, 1)")
        if self.iterations < 1 or self.population < 2:
            raise ValueError("need iterations >= 1 and population >= 2")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown solver settings: {sorted(unknown)}")
        return cls(**d)


def bayes_objective_estimate(post, policy, k_samples: int, horizon: int | None = None,
                             gamma: float | None = None, seed: int = 0, env=None) -> float:
    """Monte-Carlo estimate of the posterior-expected return of ``policy``."""
    return float(np.mean(predictive_returns(post, policy, k_samples, horizon, gamma, seed, env=env)))


def solve_mean_mdp(post: ConjugatePosterior) -> TabularPolicy:
    """Greedy policy of the posterior-mean MDP; ties go to the lowest action."""
    _, pol = value_iteration(mean_mdp(post))
    return TabularPolicy(pol.probs, tag="mean_mdp_vi")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _tabular_scores(P, R, gamma, d0, logits_pop):
    """Exact mean return of each candidate over a fixed batch of sampled MDPs."""
    pi = _softmax(logits_pop)  # (C, S, A)
    S = P.shape[1]
    P_pi = np.einsum("csa,ksat->ckst", pi, P)
    r_pi = np.einsum("csa,ksa->cks", pi, R)
    v = np.linalg.solve(np.eye(S) - gamma * P_pi, r_pi[..., None])[..., 0]
    return (v @ d0).mean(axis=1)


def _cem(score_fn, shape, config: SolverConfig, rng):
    mean = np.zeros(shape)
    std = np.full(shape, config.init_std)
    n_elite = max(1, int(round(config.elite_frac * config.population)))
    history = []
    for _ in range(config.iterations):
        pop = mean + std * rng.standard_normal((config.population,) + shape)
        scores = np.asarray(score_fn(pop), dtype=float)
        if not np.all(np.isfinite(scores)):
            bad = np.flatnonzero(~np.isfinite(scores))
            raise FloatingPointError(f"non-finite candidate scores at population indices {bad.tolist()}")
        # stable sort on negated scores: ties keep the lower population index
        elite = pop[np.argsort(-scores, kind="stable")[:n_elite]]
        mean = config.smoothing * mean + (1 - config.smoothing) * elite.mean(0)
        std = np.maximum(config.smoothing * std + (1 - config.smoothing) * elite.std(0), config.min_std)
        history.append(float(scores.max()))
    return mean, history


def solve_cross_entropy(post, config: SolverConfig, env=None):
    """Cross-entropy search; returns the policy at the final elite mean.

    Every candidate in a run is scored on the same sampled models (common
    random numbers), so equal candidates always get equal scores.
    """
    rng = np.random.default_rng(config.seed)
    if isinstance(post, ConjugatePosterior):
        sp = post.spec
        P, R = sample_posterior_mdps(post, config.k_samples, np.random.default_rng(config.seed + 1))
        shape = (sp.n_states, sp.n_actions)
        mean, _ = _cem(lambda pop: _tabular_scores(P, R, sp.gamma, sp.initial_dist, pop), shape, config, rng)
        return TabularPolicy.from_logits(mean, tag="cross_entropy")
    if isinstance(post, EnsembleModel):
        if env is None:
            raise ValueError("ensemble planning needs the environment for initial states and bounds")
        shape = (post.action_dim, post.state_dim + 1)

        def make(w):
            return LinearPolicy(w, env.action_low, env.action_high, 0.0, tag="cross_entropy")

        def score(pop):
            return [np.mean(predictive_returns(post, make(w), 1, config.horizon, None, config.seed + 1,
                                               env=env, n_episodes=config.n_episodes)) for w in pop]

        mean, _ = _cem(score, shape, config, rng)
        return make(mean)
    raise TypeError(f"unsupported posterior type {type(post).__name__}")


def solve(post, config: SolverConfig, env=None):
    if config.solver == "mean_mdp_vi":
        if not isinstance(post, ConjugatePosterior):
            raise TypeError("mean_mdp_vi needs a conjugate posterior")
        return solve_mean_mdp(post)
    return solve_cross_entropy(post, config, env)

"""Regret bounds and posterior-predictive regret approximators."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import Dataset, TabularPolicy, evaluate_batch, infinite_horizon_return
from .posterior.conjugate import ConjugatePosterior, sample_posterior_mdps
from .posterior.ensemble import EnsembleModel, ModelEnv

STATS = ("median", "mean", "max", "min", "variance2", "combined")
DEFAULT_EPISODES_PER_MEMBER = 64


class NoCompleteEpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class RegretEstimate:
    stat: str
    value: float
    returns_sample: tuple
    r_max_hat: float
    bound_thm1: float | None = None


@dataclass(frozen=True)
class BoundCurve:
    C: float
    d: int
    gamma: float
    n_grid: np.ndarray
    values: np.ndarray
    r_max: float = 0.5
    form: str = "appendix"

    def first_below(self, level: float) -> float:
        """Smallest grid N whose bound is below ``level`` (inf if none)."""
        hit = np.flatnonzero(self.values < level)
        return float(self.n_grid[hit[0]]) if len(hit) else math.inf


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

def _bh(x):
    """sqrt(1 - exp(-x)), accurate for small x."""
    return np.sqrt(-np.expm1(-np.asarray(x, dtype=float)))


def max_regret(gamma: float, r_min: float, r_max: float) -> float:
    return (r_max - r_min) / (1.0 - gamma)


def _check_bound_args(pil, gamma, r_min, r_max):
    if np.any(np.asarray(pil) < 0):
        raise ValueError("pil must be nonnegative")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if r_max < r_min:
        raise ValueError("r_max must be >= r_min")


def regret_bound_thm1(pil, gamma: float, r_min: float, r_max: float):
    """Regret bound 2 R_max sqrt(1 - exp(-pil / (1 - gamma)))."""
    _check_bound_args(pil, gamma, r_min, r_max)
    out = 2.0 * max_regret(gamma, r_min, r_max) * _bh(np.asarray(pil) / (1.0 - gamma))
    return float(out) if np.ndim(out) == 0 else out


def policy_value_gap_bound(pil, gamma: float, r_min: float, r_max: float):
    """Bound on |J(M*) - J_Bayes| for one fixed policy: R_max sqrt(1 - exp(-pil / (1 - gamma)))."""
    _check_bound_args(pil, gamma, r_min, r_max)
    out = max_regret(gamma, r_min, r_max) * _bh(np.asarray(pil) / (1.0 - gamma))
    return float(out) if np.ndim(out) == 0 else out


def regret_curve_thm2(C: float, d: int, gamma: float, n_grid, r_max: float = 0.5,
                      form: str = "appendix") -> BoundCurve:
    """Expected-regret curve for a d-parameter model family as the data size grows.

    ``form="appendix"`` gives 2 R sqrt(1 - exp(-C d / ((1-gamma) N))), which
    vanishes as N grows. ``form="main"`` gives 2 R exp(1 - sqrt(C d / ((1-gamma) N))),
    kept for comparison: it grows with N and exceeds 2R.
    """
    if C <= 0 or d < 1:
        raise ValueError("need C > 0 and d >= 1")
    n = np.asarray(n_grid, dtype=float)
    x = C * d / ((1.0 - gamma) * n)
    if form == "appendix":
        vals = 2.0 * r_max * _bh(x)
    elif form == "main":
        vals = 2.0 * r_max * np.exp(1.0 - np.sqrt(x))
    else:
        raise ValueError(f"unknown form {form!r}")
    return BoundCurve(C, d, gamma, n, vals, r_max, form)


# ---------------------------------------------------------------------------
# Posterior-predictive returns
# ---------------------------------------------------------------------------

def _episode_returns_batch(env, policy, n: int, horizon: int, gamma: float,
                           rng: np.random.Generator) -> np.ndarray:
    """Discounted returns of ``n`` vectorised episodes; truncated ones get the horizon correction."""
    s = env.reset_batch(rng, n)
    ret = np.zeros(n)
    alive = np.ones(n, bool)
    g = 1.0
    for _ in range(horizon):
        a = policy.act_batch(s, rng)
        r, s, done = env.step_batch(s, a, rng)
        ret += g * r * alive
        g *= gamma
        alive &= ~done
        if not alive.any():
            break
    return np.where(alive, infinite_horizon_return(ret, gamma, horizon), ret)


def predictive_returns(post, policy, k_samples: int, horizon: int | None = None,
                       gamma: float | None = None, seed: int = 0, env=None,
                       n_episodes: int = DEFAULT_EPISODES_PER_MEMBER) -> np.ndarray:
    """Policy returns under models drawn from the posterior.

    Conjugate posterior: ``k_samples`` sampled MDPs, each evaluated exactly
    (``horizon`` is unused). Ensemble: one value per elite member, the mean
    over ``n_episodes`` rollouts in that member's dynamics; ``env`` supplies
    initial states, bounds and termination.
    """
    if k_samples < 1:
        raise ValueError("k_samples must be >= 1")
    rng = np.random.default_rng(seed)
    if isinstance(post, ConjugatePosterior):
        if not isinstance(policy, TabularPolicy):
            raise TypeError("conjugate posteriors need a tabular policy")
        g = post.spec.gamma if gamma is None else gamma
        P, R = sample_posterior_mdps(post, k_samples, rng)
        return evaluate_batch(P, R, g, post.spec.initial_dist, policy.probs)
    if isinstance(post, EnsembleModel):
        if env is None:
            raise ValueError("ensemble rollouts need the environment for initial states")
        g = post.gamma if gamma is None else gamma
        h = post.max_steps if horizon is None else horizon
        out = []
        for member in post.elites:
            menv = ModelEnv(post, int(member), env)
            out.append(_episode_returns_batch(menv, policy, n_episodes, h, g, rng).mean())
        return np.array(out)
    raise TypeError(f"unsupported posterior type {type(post).__name__}")


def episode_returns(dataset: Dataset, gamma: float | None = None,
                    max_steps: int | None = None) -> np.ndarray:
    """Discounted return of every complete episode; time-limited ones get the horizon correction."""
    gamma = dataset.gamma if gamma is None else gamma
    max_steps = dataset.max_steps if max_steps is None else max_steps
    out = []
    for sl in dataset.episodes():
        r = dataset.r[sl]
        ret = float(np.sum(r * gamma ** np.arange(len(r))))
        if len(r) >= max_steps:
            ret = infinite_horizon_return(ret, gamma, max_steps)
        out.append(ret)
    return np.array(out)


def r_max_hat(dataset: Dataset, gamma: float | None = None, max_steps: int | None = None) -> float:
    """Best discounted episode return in the dataset, on the infinite-horizon scale."""
    rets = episode_returns(dataset, gamma, max_steps)
    if len(rets) == 0:
        raise NoCompleteEpisodeError("dataset holds no complete episode")
    return float(rets.max())


def approx_regret(stat: str, returns, r_max_hat: float, bound_thm1: float | None = None) -> RegretEstimate:
    """Regret estimate from posterior-predictive returns.

    Statistics from least to most conservative: ``min`` uses the best return,
    then ``median`` and ``mean``, and ``max`` uses the worst return.
    ``variance2`` is twice the sample standard deviation; ``combined`` is
    the larger of that and the median form. Even-length medians average the
    two central values.
    """
    x = np.asarray(returns, dtype=float)
    if x.size == 0:
        raise ValueError("returns must be nonempty")
    sd2 = 2.0 * math.sqrt(x.var(ddof=1)) if x.size > 1 else 0.0
    values = {
        "median": r_max_hat - float(np.median(x)),
        "mean": r_max_hat - float(x.mean()),
        "max": r_max_hat - float(x.min()),
        "min": r_max_hat - float(x.max()),
        "variance2": sd2,
    }
    values["combined"] = max(sd2, values["median"])
    if stat not in values:
        raise ValueError(f"unknown statistic {stat!r}; choose from {STATS}")
    return RegretEstimate(stat, float(values[stat]), tuple(x.tolist()), float(r_max_hat), bound_thm1)


def all_stats(returns, r_max_hat: float) -> dict:
    return {s: approx_regret(s, returns, r_max_hat).value for s in STATS}

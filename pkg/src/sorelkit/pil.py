"""Posterior information loss (PIL) and its diagnostics.

The PIL is split into an error term (how far the posterior's average model
sits from the data or the truth) and a spread term (how uncertain the
posterior still is). Training a posterior well should leave the two roughly
equal, which is what ``balance_check`` tests.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma

from .mdp import Dataset, TabularMdp, TabularPolicy
from .posterior.conjugate import ConjugatePosterior

DEFAULT_BALANCE_THRESHOLD = 0.25
RHO_TAIL = 1e-6


class PilUndefinedError(ValueError):
    """Raised when too little validation data exists to estimate the PIL."""


@dataclass(frozen=True)
class RhoWeights:
    weights: np.ndarray  # (S, A), sums to 1
    horizon: int  # steps after which the omitted mixture mass is below RHO_TAIL
    policy_tag: str = ""


@dataclass(frozen=True)
class PilReport:
    mse_term: float
    var_term: float
    pil: float
    n_points: int
    balance_ratio: float
    source: str  # "exact_tabular", "gaussian_validation" or "conjugate_validation"
    spread_term: float = 0.0  # part of var_term due to disagreement between models

    def as_dict(self) -> dict:
        return {"mse_term": self.mse_term, "var_term": self.var_term, "pil": self.pil,
                "n_points": self.n_points, "balance_ratio": self.balance_ratio,
                "source": self.source, "spread_term": self.spread_term}


def balance_ratio(mse_term: float, var_term: float) -> float:
    """|E - V| / max(E, V); 0 when both vanish."""
    top = max(mse_term, var_term)
    return 0.0 if top == 0 else abs(mse_term - var_term) / top


def _report(mse: float, var: float, n: int, source: str, spread: float = 0.0) -> PilReport:
    if mse < 0 or var < 0:
        raise ValueError(f"PIL terms must be nonnegative, got {mse}, {var}")
    return PilReport(float(mse), float(var), float(mse + var), int(n), balance_ratio(mse, var),
                     source, float(spread))


def balance_check(report: PilReport, threshold: float = DEFAULT_BALANCE_THRESHOLD) -> bool:
    return report.balance_ratio <= threshold


# ---------------------------------------------------------------------------
# Tabular, exact
# ---------------------------------------------------------------------------

def occupancy(mdp: TabularMdp, policy: TabularPolicy, gamma: float) -> np.ndarray:
    """Normalised discounted state visitation (1-gamma) d0^T (I - gamma P_pi)^-1."""
    P_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    S = mdp.n_states
    return (1.0 - gamma) * np.linalg.solve((np.eye(S) - gamma * P_pi).T, mdp.initial_dist)


def rho_weights(mdp: TabularMdp, policy: TabularPolicy, gamma: float | None = None) -> RhoWeights:
    """State-action weights under which model errors drive regret.

    Picking a time i from the arithmetico-geometric law and then a step j
    uniformly from 0..i gives step j probability (1-gamma) gamma^j, so the
    weights are the normalised discounted occupancy of the policy.
    """
    gamma = mdp.gamma if gamma is None else gamma
    nu = occupancy(mdp, policy, gamma)
    w = nu[:, None] * policy.probs
    w = np.clip(w, 0.0, None)
    w /= w.sum()
    horizon = 1 if gamma == 0 else int(math.ceil(math.log(RHO_TAIL) / math.log(gamma)))
    return RhoWeights(w, horizon, policy.tag)


def _xlogx_ratio(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Elementwise p*log(p/q) with 0 log 0 = 0."""
    out = np.zeros_like(p)
    m = p > 0
    out[m] = p[m] * (np.log(p[m]) - np.log(q[m]))
    return out


def pil_terms_tabular(post: ConjugatePosterior, true_mdp: TabularMdp):
    """Per-(s, a) expected KL split into (error part, spread part), each (S, A)."""
    alpha = post.dirichlet_alpha
    if np.any(alpha <= 0):
        raise ValueError("Dirichlet concentrations must be positive")
    if alpha.shape != true_mdp.transition.shape:
        raise ValueError("posterior and MDP dimensions differ")
    a0 = alpha.sum(axis=-1, keepdims=True)
    p_true = true_mdp.transition
    p_bar = alpha / a0
    # E[-log theta_j] = psi(a0) - psi(a_j); split around log p_bar
    spread_j = np.log(p_bar) - digamma(alpha) + digamma(a0)
    t_err = _xlogx_ratio(p_true, p_bar).sum(-1)
    t_var = np.where(p_true > 0, p_true * spread_j, 0.0).sum(-1)

    sigma = true_mdp.reward_std
    if sigma <= 0:
        raise ValueError("exact tabular PIL needs reward_std > 0")
    r_err = (post.reward_post_mean - true_mdp.reward_mean) ** 2 / (2 * sigma ** 2)
    r_var = post.reward_post_var / (2 * sigma ** 2)
    return t_err + r_err, t_var + r_var


def pil_tabular_exact(post: ConjugatePosterior, true_mdp: TabularMdp, rho: RhoWeights) -> PilReport:
    """Posterior-expected KL between true and sampled models, weighted by ``rho``."""
    err, var = pil_terms_tabular(post, true_mdp)
    w = rho.weights
    mse, v = float((w * err).sum()), float((w * var).sum())
    if not (np.isfinite(mse) and np.isfinite(v)):
        raise FloatingPointError("tabular PIL is not finite")
    return _report(max(mse, 0.0), max(v, 0.0), int(post.counts.sum()), "exact_tabular")


def pil_conjugate_validation(post: ConjugatePosterior, validation: Dataset,
                             min_points: int = 1) -> PilReport:
    """Offline PIL estimate for a conjugate posterior on held-out transitions.

    Error term: squared error of the posterior predictive mean against each
    observed next-state one-hot vector and reward. Spread term: variance of
    the posterior predictive for the same quantities. Both are divided by
    twice the validation-set variance of the target, as in the Gaussian case.
    """
    n = len(validation)
    if n < min_points:
        raise PilUndefinedError(f"validation split has {n} points, need at least {min_points}")
    s, a, s2, r = validation.s, validation.a, validation.s_next, validation.r
    p_bar = post.transition_mean[s, a]  # (n, S)
    onehot = np.zeros_like(p_bar)
    onehot[np.arange(n), s2] = 1.0
    freq = onehot.mean(0)
    t_scale = 2 * max(float((freq * (1 - freq)).sum()), 1e-12)
    r_scale = 2 * max(float(r.var()), 1e-12)
    m, v = post.reward_post_mean[s, a], post.reward_post_var[s, a]
    sigma_sq = post.spec.reward_std ** 2
    mse = ((p_bar - onehot) ** 2).sum(1) / t_scale + (m - r) ** 2 / r_scale
    var = (p_bar * (1 - p_bar)).sum(1) / t_scale + (v + sigma_sq) / r_scale
    spread = v / r_scale
    return _report(float(mse.mean()), float(var.mean()), n, "conjugate_validation", float(spread.mean()))


# ---------------------------------------------------------------------------
# Gaussian ensembles
# ---------------------------------------------------------------------------

def pil_gaussian(model, validation: Dataset, min_points: int | None = None) -> PilReport:
    """Normalised MSE and predictive-variance terms of an ensemble on held-out data.

    Targets are (r, delta s). Dividing by twice the dataset target variance is
    the same as working in the model's normalised target space, which is what
    happens here. ``min_points`` defaults to the model's batch size.
    """
    n = len(validation)
    need = model.config.batch_size if min_points is None else min_points
    if n < max(need, 1):
        raise PilUndefinedError(f"PIL undefined: validation split has {n} points, one batch needs {need}")
    mu, var = model.member_predictions(validation.s, validation.a)  # (E, n, D), normalised
    y = model.normalized_targets(validation)  # (n, D)
    mu_bar = mu.mean(axis=0)
    mse = 0.5 * ((mu_bar - y) ** 2).sum(-1)
    dev = 0.5 * ((mu_bar[None] - mu) ** 2).sum(-1).mean(0)
    alea = 0.5 * var.sum(-1).mean(0)
    mse_term = float(mse.mean())
    spread = float(dev.mean())
    var_term = float((dev + alea).mean())
    return _report(mse_term, var_term, n, "gaussian_validation", spread)


# ---------------------------------------------------------------------------
# History and information rate
# ---------------------------------------------------------------------------

@dataclass
class PilHistory:
    entries: list = field(default_factory=list)  # (N, PilReport)

    def add(self, n: int, report: PilReport) -> None:
        if self.entries and n <= self.entries[-1][0]:
            raise ValueError("N must be strictly increasing")
        self.entries.append((int(n), report))

    def to_csv(self, path) -> None:
        rates = dict(info_rate(self)) if len(self.entries) >= 2 else {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "mse_term", "var_term", "pil", "balance_ratio", "rate"])
            for n, rep in self.entries:
                rate = rates.get(n)
                w.writerow([n, repr(rep.mse_term), repr(rep.var_term), repr(rep.pil),
                            repr(rep.balance_ratio), "" if rate is None else repr(rate)])


def info_rate(history: PilHistory) -> list[tuple[int, float]]:
    """Finite-difference slope of PIL against N, one value per entry after the first."""
    if len(history.entries) < 2:
        raise ValueError("information rate needs at least two entries")
    out = []
    for (n0, r0), (n1, r1) in zip(history.entries, history.entries[1:]):
        out.append((n1, (r1.pil - r0.pil) / (n1 - n0)))
    return out

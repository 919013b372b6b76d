"""Ground-truth environments, exact planners, datasets and return accounting.

Tabular MDPs are the verification oracle for everything else in the package:
values and regrets are computed by exact linear solves, never by sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

ROW_TOL = 1e-12
DEGENERATE_EPS = 1e-6


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Distributions over timesteps
# ---------------------------------------------------------------------------

def ag_pmf(p: float, i, mode: str = "ag"):
    """Arithmetico-geometric pmf (1-p)^2 p^i (i+1), or geometric (1-p) p^i.

    ``i`` may be an integer or an integer array.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"p must lie in [0, 1), got {p}")
    i = np.asarray(i)
    if np.any(i < 0):
        raise ValueError("i must be nonnegative")
    # 0**0 == 1 keeps the p=0 point mass at i=0
    pw = np.power(float(p), i.astype(float))
    if mode == "ag":
        out = (1.0 - p) ** 2 * pw * (i + 1)
    elif mode == "geometric":
        out = (1.0 - p) * pw
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Environments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TabularSpec:
    """What is known about a tabular environment without knowing its dynamics."""

    n_states: int
    n_actions: int
    gamma: float
    initial_dist: np.ndarray
    reward_std: float
    max_steps: int
    env_id: str = "tabular"


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with Gaussian rewards of shared, known noise ``reward_std``."""

    transition: np.ndarray  # (S, A, S)
    reward_mean: np.ndarray  # (S, A)
    reward_std: float
    gamma: float
    initial_dist: np.ndarray
    max_steps: int = 100
    env_id: str = "tabular"

    def __post_init__(self):
        P = _frozen(self.transition)
        R = _frozen(self.reward_mean)
        d0 = _frozen(self.initial_dist)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward_mean", R)
        object.__setattr__(self, "initial_dist", d0)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if R.shape != (S, A):
            raise ValueError(f"reward_mean must have shape {(S, A)}, got {R.shape}")
        if d0.shape != (S,):
            raise ValueError(f"initial_dist must have shape {(S,)}, got {d0.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1.0)) > ROW_TOL:
            raise ValueError("transition rows must be probability vectors")
        if np.any(d0 < 0) or abs(d0.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_dist must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.reward_std < 0:
            raise ValueError("reward_std must be nonnegative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def discrete(self) -> bool:
        return True

    @property
    def spec(self) -> TabularSpec:
        return TabularSpec(self.n_states, self.n_actions, self.gamma, self.initial_dist,
                           self.reward_std, self.max_steps, self.env_id)

    def reward_range(self, clip: float = 0.0) -> tuple[float, float]:
        """(r_min, r_max) as extrema of the mean rewards widened by ``clip``."""
        return float(self.reward_mean.min() - clip), float(self.reward_mean.max() + clip)

    def shift_rewards(self, c: float) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward_mean + c, self.reward_std, self.gamma,
                          self.initial_dist, self.max_steps, self.env_id)

    # step interface shared with ContinuousEnv and model environments
    def reset(self, rng: np.random.Generator) -> int:
        return int(np.searchsorted(np.cumsum(self.initial_dist), rng.random(), side="right"))

    def step(self, s: int, a: int, rng: np.random.Generator) -> tuple[float, int, bool]:
        r = self.reward_mean[s, a] + self.reward_std * rng.standard_normal()
        cdf = np.cumsum(self.transition[s, a])
        s_next = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return float(r), min(s_next, self.n_states - 1), False


@dataclass(frozen=True)
class ContinuousEnv:
    """Continuous-state environment with additive Gaussian noise.

    ``dynamics(s, a)`` returns the mean state change; ``reward(s, a)`` the mean
    reward. Both accept batched inputs of shape (B, dim).
    """

    state_dim: int
    action_dim: int
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    reward: Callable[[np.ndarray, np.ndarray], np.ndarray]
    delta_std: float
    reward_std: float
    gamma: float
    initial_sampler: Callable[[np.random.Generator, int], np.ndarray]
    max_steps: int
    state_low: np.ndarray
    state_high: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray
    terminal: Callable[[np.ndarray], np.ndarray] | None = None
    env_id: str = "continuous"

    @property
    def discrete(self) -> bool:
        return False

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self.reset_batch(rng, 1)[0]

    def reset_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.clip(self.initial_sampler(rng, n), self.state_low, self.state_high)

    def step(self, s, a, rng: np.random.Generator):
        r, s_next, done = self.step_batch(np.atleast_2d(s), np.atleast_2d(a), rng)
        return float(r[0]), s_next[0], bool(done[0])

    def step_batch(self, s: np.ndarray, a: np.ndarray, rng: np.random.Generator):
        a = np.clip(a, self.action_low, self.action_high)
        noise_r = rng.standard_normal(len(s))
        noise_s = rng.standard_normal(s.shape)
        r = self.reward(s, a) + self.reward_std * noise_r
        s_next = np.clip(s + self.dynamics(s, a) + self.delta_std * noise_s,
                         self.state_low, self.state_high)
        done = self.terminal(s_next) if self.terminal is not None else np.zeros(len(s), bool)
        return r, s_next, done


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TabularPolicy:
    probs: np.ndarray  # (S, A)
    tag: str = ""

    def __post_init__(self):
        p = _frozen(self.probs)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise ValueError("policy probabilities must be a (S, A) matrix")
        if np.any(p < 0) or np.max(np.abs(p.sum(1) - 1.0)) > ROW_TOL:
            raise ValueError("policy rows must sum to 1")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions), tag="uniform")

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int, tag: str = "") -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs, tag=tag)

    @classmethod
    def from_logits(cls, logits: np.ndarray, tag: str = "") -> "TabularPolicy":
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        # renormalise once more so rows meet ROW_TOL after the division
        return cls(p / p.sum(axis=1, keepdims=True), tag=tag)

    def epsilon_greedy(self, eps: float, tag: str = "") -> "TabularPolicy":
        n_actions = self.probs.shape[1]
        return TabularPolicy((1 - eps) * self.probs + eps / n_actions, tag=tag or f"eps{eps:g}")

    def act(self, s: int, rng: np.random.Generator) -> int:
        cdf = np.cumsum(self.probs[s])
        return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")),
                   self.probs.shape[1] - 1)


@dataclass(frozen=True)
class LinearPolicy:
    """Feature-linear continuous policy: a = clip(W @ [s, 1] + std * eps)."""

    weights: np.ndarray  # (action_dim, state_dim + 1)
    action_low: np.ndarray
    action_high: np.ndarray
    std: float = 0.0
    tag: str = ""

    def mean_action(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(s)
        feats = np.concatenate([s, np.ones((len(s), 1))], axis=1)
        return np.clip(feats @ self.weights.T, self.action_low, self.action_high)

    def act_batch(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        a = self.mean_action(s)
        if self.std > 0:
            a = a + self.std * rng.standard_normal(a.shape)
        return np.clip(a, self.action_low, self.action_high)

    def act(self, s, rng: np.random.Generator) -> np.ndarray:
        return self.act_batch(np.atleast_2d(s), rng)[0]


# ---------------------------------------------------------------------------
# Exact planning
# ---------------------------------------------------------------------------

def _vi_iteration_cap(gamma: float, tol: float, r_span: float, margin: int = 100) -> int:
    if gamma == 0.0 or r_span == 0.0:
        return 1 + margin
    target = tol * (1.0 - gamma) / r_span
    if target >= 1.0:
        return 1 + margin
    return int(math.ceil(math.log(target) / math.log(gamma))) + margin


def greedy_policy(q: np.ndarray, tag: str = "greedy") -> TabularPolicy:
    """Deterministic greedy policy; ties go to the lowest action index."""
    return TabularPolicy.deterministic(np.argmax(q, axis=1), q.shape[1], tag=tag)


def q_values(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    return mdp.reward_mean + mdp.gamma * mdp.transition @ v


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int | None = None):
    """Return (optimal state values, greedy policy) with Bellman residual <= tol."""
    r_span = float(np.ptp(mdp.reward_mean))
    cap = max_iter if max_iter is not None else _vi_iteration_cap(mdp.gamma, tol, r_span)
    v = np.zeros(mdp.n_states)
    for _ in range(cap):
        v_new = q_values(mdp, v).max(axis=1)
        residual = np.max(np.abs(v_new - v))
        v = v_new
        if residual <= tol * (1 - mdp.gamma) or mdp.gamma == 0.0:
            break
    else:
        raise RuntimeError(f"value iteration did not reach tol={tol} within {cap} iterations")
    q = q_values(mdp, v)
    v = q.max(axis=1)
    return v, greedy_policy(q)


def state_values(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    pi = policy.probs
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {pi.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward_mean)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def policy_evaluation(mdp: TabularMdp, policy: TabularPolicy) -> float:
    """Exact expected discounted return from the initial distribution."""
    return float(mdp.initial_dist @ state_values(mdp, policy))


def evaluate_batch(transition: np.ndarray, reward: np.ndarray, gamma: float,
                   initial_dist: np.ndarray, policy_probs: np.ndarray) -> np.ndarray:
    """Exact returns of one policy in a batch of MDPs.

    transition: (K, S, A, S), reward: (K, S, A). Returns shape (K,).
    """
    S = transition.shape[1]
    P_pi = np.einsum("sa,ksat->kst", policy_probs, transition)
    r_pi = np.einsum("sa,ksa->ks", policy_probs, reward)
    v = np.linalg.solve(np.eye(S)[None] - gamma * P_pi, r_pi[..., None])[..., 0]
    return v @ initial_dist


def optimal_return(mdp: TabularMdp) -> float:
    v, _ = value_iteration(mdp)
    return float(mdp.initial_dist @ v)


def worst_return(mdp: TabularMdp) -> float:
    """Minimum expected return over all policies."""
    flipped = TabularMdp(mdp.transition, -mdp.reward_mean, mdp.reward_std, mdp.gamma,
                         mdp.initial_dist, mdp.max_steps, mdp.env_id)
    return -optimal_return(flipped)


def true_regret(mdp: TabularMdp, policy: TabularPolicy) -> float:
    reg = optimal_return(mdp) - policy_evaluation(mdp, policy)
    if reg < 0:
        if reg < -1e-9:
            raise RuntimeError(f"negative regret {reg}: value iteration is inaccurate")
        reg = 0.0
    return float(reg)


def return_bounds(mdp: TabularMdp) -> tuple[float, float]:
    """Per-step normalisation constants (r_min_norm, r_max_norm) for a known MDP.

    They are the worst and best achievable returns divided back by 1/(1-gamma),
    so ``normalize_regret`` maps the optimal return to 0 and the worst to 1.
    """
    g = 1.0 - mdp.gamma
    return worst_return(mdp) * g, optimal_return(mdp) * g


# ---------------------------------------------------------------------------
# Regret normalisation
# ---------------------------------------------------------------------------

def infinite_horizon_return(return_finite, gamma: float, max_steps: int):
    """R_inf = R_fin * (1 + g^s / (1 - g^s))."""
    gs = gamma ** max_steps
    if gs >= 1.0:
        raise ValueError("gamma**max_steps must be < 1")
    return return_finite * (1.0 + gs / (1.0 - gs))


def normalize_regret(return_finite: float, gamma: float, max_steps: int,
                     r_min_norm: float, r_max_norm: float, clip: bool = False) -> float:
    """Normalised regret of a finite-horizon discounted return.

    R_min and R_max are r_min_norm/(1-gamma) and r_max_norm/(1-gamma).
    """
    if not r_max_norm > r_min_norm:
        raise ValueError("r_max_norm must exceed r_min_norm")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    r_inf = infinite_horizon_return(return_finite, gamma, max_steps)
    R_min, R_max = r_min_norm / (1 - gamma), r_max_norm / (1 - gamma)
    reg = (R_max - r_inf) / (R_max - R_min)
    return float(np.clip(reg, 0.0, 1.0)) if clip else float(reg)


def regret_scale(gamma: float, r_min_norm: float, r_max_norm: float) -> float:
    """R_max - R_min, the divisor used to normalise regrets in return units."""
    if not r_max_norm > r_min_norm:
        raise ValueError("r_max_norm must exceed r_min_norm: every policy has the same value")
    return (r_max_norm - r_min_norm) / (1.0 - gamma)


def percentile_norm_constants(dataset: "Dataset") -> tuple[float, float]:
    """2.5th / 97.5th percentiles of per-step rewards (linear interpolation).

    With ``n`` sorted rewards the q-th percentile sits at fractional index
    q/100 * (n - 1), interpolating linearly between neighbours (numpy's
    default ``linear`` method).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    lo, hi = np.percentile(dataset.r, [2.5, 97.5], method="linear")
    if hi <= lo:
        c = float(lo)
        return c - DEGENERATE_EPS, c + DEGENERATE_EPS
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    s: object
    a: object
    r: float
    s_next: object
    done: bool


@dataclass
class Dataset:
    """Ordered transitions stored column-wise.

    ``done`` marks the last transition of an episode (termination or time
    limit); the next transition starts from a reset.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    env_id: str = ""
    discrete: bool = True
    state_dim: int = 0
    action_dim: int = 0
    gamma: float = 0.99
    max_steps: int = 1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        self.done = np.asarray(self.done, dtype=bool)
        dtype = int if self.discrete else float
        self.s = np.asarray(self.s, dtype=dtype)
        self.a = np.asarray(self.a, dtype=dtype)
        self.s_next = np.asarray(self.s_next, dtype=dtype)
        n = len(self.r)
        if not (len(self.s) == len(self.a) == len(self.s_next) == len(self.done) == n):
            raise ValueError("dataset columns have different lengths")
        if not np.all(np.isfinite(self.r)):
            raise ValueError("rewards must be finite")
        if self.discrete and n:
            for name, col, hi in (("s", self.s, self.state_dim), ("a", self.a, self.action_dim),
                                  ("s_next", self.s_next, self.state_dim)):
                if col.min() < 0 or col.max() >= hi:
                    raise ValueError(f"{name} index out of range [0, {hi})")

    def __len__(self) -> int:
        return len(self.r)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_meta = (self.env_id, self.discrete, self.state_dim, self.action_dim, self.gamma,
                     self.max_steps, self.metadata) == (other.env_id, other.discrete, other.state_dim,
                                                        other.action_dim, other.gamma, other.max_steps,
                                                        other.metadata)
        return same_meta and all(np.array_equal(getattr(self, k), getattr(other, k))
                                 for k in ("s", "a", "r", "s_next", "done"))

    def _take(self, idx) -> "Dataset":
        return Dataset(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx],
                       self.env_id, self.discrete, self.state_dim, self.action_dim, self.gamma,
                       self.max_steps, dict(self.metadata))

    def prefix(self, n: int) -> "Dataset":
        if n > len(self):
            raise ValueError(f"prefix {n} exceeds dataset size {len(self)}")
        return self._take(slice(0, n))

    def subset(self, idx: np.ndarray) -> "Dataset":
        return self._take(np.asarray(idx))

    def split(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Seeded random (train, validation) split; validation gets ``fraction``."""
        n_val = int(round(fraction * len(self)))
        perm = np.random.default_rng(seed).permutation(len(self))
        val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        return self.subset(train_idx), self.subset(val_idx)

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Transition:
        conv = int if self.discrete else (lambda x: np.array(x))
        return Transition(conv(self.s[i]), conv(self.a[i]), float(self.r[i]),
                          conv(self.s_next[i]), bool(self.done[i]))

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    def episodes(self) -> list[slice]:
        """Slices of complete episodes (those ending with ``done``)."""
        ends = np.flatnonzero(self.done)
        starts = np.concatenate([[0], ends[:-1] + 1])
        return [slice(int(b), int(e) + 1) for b, e in zip(starts, ends)]

    def delta(self) -> np.ndarray:
        if self.discrete:
            raise ValueError("state deltas are only defined for continuous datasets")
        return self.s_next - self.s

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], **kw) -> "Dataset":
        discrete = kw.get("discrete", True)
        state_dim = kw.get("state_dim", 0)
        action_dim = kw.get("action_dim", 0)
        if not transitions:
            shape_s = (0,) if discrete else (0, state_dim)
            shape_a = (0,) if discrete else (0, action_dim)
            return cls(np.zeros(shape_s), np.zeros(shape_a), np.zeros(0), np.zeros(shape_s),
                       np.zeros(0, bool), **kw)
        cols = list(zip(*[(t.s, t.a, t.r, t.s_next, t.done) for t in transitions]))
        return cls(*(np.array(c) for c in cols), **kw)


def _policy_list(behavior) -> list:
    return list(behavior) if isinstance(behavior, (list, tuple)) else [behavior]


def sample_dataset(env, behavior, n: int, seed: int) -> Dataset:
    """Collect ``n`` transitions; episodes cycle through the behavior policies.

    ``behavior`` is one policy or a list of them (a mixture emulating a
    diverse replay buffer). Episode k uses policy k mod len(list). Each
    episode ends on termination or after ``env.max_steps`` steps.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    policies = _policy_list(behavior)
    rng = np.random.default_rng(seed)
    if isinstance(env, TabularMdp):
        return _sample_tabular(env, policies, n, rng, seed)
    S, A, R, S2, D = [], [], [], [], []
    episode, t, s = 0, 0, env.reset(rng)
    while len(R) < n:
        pol = policies[episode % len(policies)]
        a = pol.act(s, rng)
        r, s_next, done = env.step(s, a, rng)
        t += 1
        end = done or t >= env.max_steps
        S.append(s); A.append(a); R.append(r); S2.append(s_next); D.append(end)
        if end:
            episode, t, s = episode + 1, 0, env.reset(rng)
        else:
            s = s_next
    return Dataset(np.array(S), np.array(A), np.array(R), np.array(S2), np.array(D),
                   env_id=env.env_id, discrete=False, state_dim=env.state_dim,
                   action_dim=env.action_dim, gamma=env.gamma, max_steps=env.max_steps,
                   metadata={"behavior": [p.tag for p in policies], "seed": seed})


def _sample_tabular(mdp: TabularMdp, policies, n, rng, seed) -> Dataset:
    S_, A_ = mdp.n_states, mdp.n_actions
    P_cdf = np.cumsum(mdp.transition, axis=-1)
    d0_cdf = np.cumsum(mdp.initial_dist)
    pi_cdfs = [np.cumsum(p.probs, axis=1) for p in policies]
    u = rng.random((n, 3))
    noise = rng.standard_normal(n) * mdp.reward_std
    s_col = np.empty(n, int); a_col = np.empty(n, int); s2_col = np.empty(n, int)
    done = np.zeros(n, bool)
    episode, t = 0, 0
    s = min(int(np.searchsorted(d0_cdf, u[0, 2] * d0_cdf[-1], side="right")), S_ - 1)
    for i in range(n):
        pc = pi_cdfs[episode % len(pi_cdfs)][s]
        a = min(int(np.searchsorted(pc, u[i, 0] * pc[-1], side="right")), A_ - 1)
        tc = P_cdf[s, a]
        s2 = min(int(np.searchsorted(tc, u[i, 1] * tc[-1], side="right")), S_ - 1)
        s_col[i], a_col[i], s2_col[i] = s, a, s2
        t += 1
        if t >= mdp.max_steps:
            done[i] = True
            episode, t = episode + 1, 0
            # the reset reuses this row's third uniform, which is otherwise unused
            s = min(int(np.searchsorted(d0_cdf, u[i, 2] * d0_cdf[-1], side="right")), S_ - 1)
        else:
            s = s2
    r = mdp.reward_mean[s_col, a_col] + noise
    return Dataset(s_col, a_col, r, s2_col, done, env_id=mdp.env_id, discrete=True,
                   state_dim=S_, action_dim=A_, gamma=mdp.gamma, max_steps=mdp.max_steps,
                   metadata={"behavior": [p.tag for p in policies], "seed": seed})


def rollout(env, policy, gamma: float, horizon: int, seed: int) -> tuple[float, float]:
    """One episode; returns (discounted return, undiscounted return)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    s = env.reset(rng)
    disc, total, g = 0.0, 0.0, 1.0
    for _ in range(horizon):
        a = policy.act(s, rng)
        r, s, done = env.step(s, a, rng)
        disc += g * r
        total += r
        g *= gamma
        if done:
            break
    return disc, total


def rollout_batch_tabular(mdp: TabularMdp, policy: TabularPolicy, n_episodes: int,
                          horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Discounted returns of ``n_episodes`` independent episodes, vectorised."""
    S, A = mdp.n_states, mdp.n_actions
    P_cdf = np.cumsum(mdp.transition, axis=-1)
    pi_cdf = np.cumsum(policy.probs, axis=1)
    s = np.minimum(np.searchsorted(np.cumsum(mdp.initial_dist), rng.random(n_episodes), side="right"), S - 1)
    ret = np.zeros(n_episodes)
    g = 1.0
    for _ in range(horizon):
        u = rng.random((n_episodes, 2))
        a = np.minimum((u[:, :1] * pi_cdf[s, -1:] >= pi_cdf[s]).sum(1), A - 1)
        r = mdp.reward_mean[s, a] + mdp.reward_std * rng.standard_normal(n_episodes)
        ret += g * r
        g *= mdp.gamma
        tc = P_cdf[s, a]
        s = np.minimum((u[:, 1:] * tc[:, -1:] >= tc).sum(1), S - 1)
    return ret


def monte_carlo_horizon(gamma: float, rel_tol: float = 1e-3) -> int:
    """Smallest h with gamma**h < rel_tol."""
    if gamma == 0.0:
        return 1
    return int(math.ceil(math.log(rel_tol) / math.log(gamma)))

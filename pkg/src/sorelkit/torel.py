"""Offline hyperparameter tuning for arbitrary offline RL planners, plus an online UCB baseline.

The posterior here only scores policies; the planners never see it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .mdp import (Dataset, LinearPolicy, TabularMdp, TabularPolicy, normalize_regret, true_regret,
                  value_iteration)
from .pil import DEFAULT_BALANCE_THRESHOLD, PilReport
from .posterior.conjugate import fit_conjugate, mean_mdp
from .regret import approx_regret, predictive_returns, r_max_hat
from .sorel import HyperGrid, default_conjugate_grid, tune_model


class StepCounter:
    """Proxy that counts environment interactions and forwards everything else."""

    def __init__(self, env):
        self._env = env
        self.steps = 0
        self.resets = 0

    def __getattr__(self, name):
        return getattr(self._env, name)

    def reset(self, rng):
        self.resets += 1
        return self._env.reset(rng)

    def step(self, s, a, rng):
        self.steps += 1
        return self._env.step(s, a, rng)

    def step_batch(self, s, a, rng):
        self.steps += len(s)
        return self._env.step_batch(s, a, rng)

    @property
    def unwrapped(self):
        return self._env


# ---------------------------------------------------------------------------
# Planners
# ---------------------------------------------------------------------------

class BehaviorCloning:
    """Imitate the dataset's actions.

    Tabular: per-state action frequencies plus ``smoothing`` pseudo-counts.
    Continuous: least-squares linear regression of actions on [s, 1].
    """

    name = "behavior_cloning"
    model_based = False
    grid_keys = ("smoothing",)

    def __init__(self, n_states: int = 0, n_actions: int = 0, action_low=None, action_high=None):
        self.n_states, self.n_actions = n_states, n_actions
        self.action_low, self.action_high = action_low, action_high

    def train(self, data: Dataset, phi: dict, seed: int = 0):
        smoothing = float(phi.get("smoothing", 1.0))
        if data.discrete:
            S = self.n_states or data.state_dim
            A = self.n_actions or data.action_dim
            counts = np.zeros((S, A))
            np.add.at(counts, (data.s, data.a), 1.0)
            counts += smoothing
            empty = counts.sum(1) == 0
            counts[empty] = 1.0
            return TabularPolicy(counts / counts.sum(1, keepdims=True), tag=f"bc_{smoothing:g}")
        X = np.concatenate([data.s, np.ones((len(data), 1))], axis=1)
        reg = smoothing * np.eye(X.shape[1])
        W = np.linalg.solve(X.T @ X + reg, X.T @ data.a.reshape(len(data), -1)).T
        lo = self.action_low if self.action_low is not None else data.a.min(0)
        hi = self.action_high if self.action_high is not None else data.a.max(0)
        return LinearPolicy(W, np.atleast_1d(lo), np.atleast_1d(hi), 0.0, tag=f"bc_{smoothing:g}")


class PessimisticPlanner:
    """Value iteration on the posterior-mean MDP with reward r - lam * u(s, a).

    u is the posterior std of the mean reward plus the total posterior std of
    the next-state distribution. The planner keeps its own flat-prior
    posterior, separate from the one used for scoring.
    """

    name = "pessimistic"
    model_based = True
    grid_keys = ("lam",)

    def __init__(self, spec, alpha0: float = 1.0, mu0: float = 0.0, tau0_sq: float = 1.0):
        self.spec = spec
        self.alpha0, self.mu0, self.tau0_sq = alpha0, mu0, tau0_sq

    def uncertainty(self, data: Dataset) -> np.ndarray:
        post = fit_conjugate(self.spec, data, self.alpha0, self.mu0, self.tau0_sq)
        alpha = post.dirichlet_alpha
        a0 = alpha.sum(-1)
        p_bar = alpha / a0[..., None]
        trans_sd = np.sqrt((1.0 - (p_bar ** 2).sum(-1)) / (a0 + 1.0))
        return np.sqrt(post.reward_post_var) + trans_sd

    def train(self, data: Dataset, phi: dict, seed: int = 0) -> TabularPolicy:
        lam = float(phi.get("lam", 0.0))
        post = fit_conjugate(self.spec, data, self.alpha0, self.mu0, self.tau0_sq)
        base = mean_mdp(post)
        penal = TabularMdp(base.transition, base.reward_mean - lam * self.uncertainty(data),
                           base.reward_std, base.gamma, base.initial_dist, base.max_steps, base.env_id)
        _, pol = value_iteration(penal)
        return TabularPolicy(pol.probs, tag=f"pessimistic_{lam:g}")


# ---------------------------------------------------------------------------
# Offline tuning
# ---------------------------------------------------------------------------

def correlation_report(metrics, true_regrets) -> tuple[float, float]:
    """Pearson r and its two-sided p-value from a t-test with n - 2 degrees of freedom.

    Returns (nan, nan) when either input has zero variance.
    """
    x = np.asarray(metrics, dtype=float)
    y = np.asarray(true_regrets, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return math.nan, math.nan
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))


@dataclass
class TuningRow:
    phi: dict
    metric: float | None
    true_regret: float | None = None
    rank: int | None = None
    error: str | None = None
    policy: object = None


@dataclass
class TuningReport:
    planner: str
    stat: str
    rows: list
    selected: int
    oracle: int | None = None
    pearson_r: float | None = None
    p_value: float | None = None
    model_pil: PilReport | None = None
    online_steps: int = 0

    @property
    def selected_true_regret(self):
        return self.rows[self.selected].true_regret

    @property
    def mean_true_regret(self):
        vals = [r.true_regret for r in self.rows if r.true_regret is not None and r.error is None]
        return float(np.mean(vals)) if vals else None

    def summary(self) -> dict:
        oracle = None if self.oracle is None else self.rows[self.oracle]
        return {"planner": self.planner, "stat": self.stat,
                "selected": self.rows[self.selected].phi,
                "selected_true_regret": self.selected_true_regret,
                "oracle": None if oracle is None else oracle.phi,
                "oracle_true_regret": None if oracle is None else oracle.true_regret,
                "mean_true_regret": self.mean_true_regret,
                "pearson_r": self.pearson_r, "p_value": self.p_value,
                "online_steps": self.online_steps}


def torel_tune(planner, grid: list, data: Dataset, stat: str = "median",
               model_grid: HyperGrid | None = None, spec=None, oracle_mdp=None,
               threshold: float = DEFAULT_BALANCE_THRESHOLD, k_eval: int = 1000,
               seed: int = 0) -> TuningReport:
    """Rank planner hyperparameters by approximate regret, using offline data only.

    The posterior is fitted once by PIL minimisation (with the balance
    constraint only for model-based planners). ``oracle_mdp`` is read for
    exact true regrets in test mode and is never stepped.
    """
    if not grid:
        raise ValueError("grid must be nonempty")
    if spec is None and oracle_mdp is not None:
        spec = oracle_mdp.spec
    model_grid = model_grid or default_conjugate_grid()
    fit = tune_model(model_grid, data, threshold, spec, seed,
                     require_balance=getattr(planner, "model_based", False))
    r_hat = r_max_hat(data)
    rows = []
    for phi in grid:
        try:
            policy = planner.train(data, phi, seed)
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            rows.append(TuningRow(phi, None, error=f"{type(exc).__name__}: {exc}"))
            continue
        rets = predictive_returns(fit.posterior, policy, k_eval, seed=seed + 104729)
        metric = approx_regret(stat, rets, r_hat).value
        tr = true_regret(oracle_mdp, policy) if oracle_mdp is not None else None
        rows.append(TuningRow(phi, metric, tr, policy=policy))
    ok = [i for i, r in enumerate(rows) if r.error is None]
    if not ok:
        raise RuntimeError("planner training failed for every grid point")
    order = sorted(ok, key=lambda i: (rows[i].metric, i))
    for rank, i in enumerate(order):
        rows[i].rank = rank
    report = TuningReport(planner.name, stat, rows, order[0], model_pil=fit.pil)
    if oracle_mdp is not None:
        report.oracle = min(ok, key=lambda i: (rows[i].true_regret, i))
        if len(ok) >= 3:
            report.pearson_r, report.p_value = correlation_report(
                [rows[i].metric for i in ok], [rows[i].true_regret for i in ok])
    return report


# ---------------------------------------------------------------------------
# Online UCB baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UcbConfig:
    exploration: float = math.sqrt(2.0)
    r_min_norm: float = 0.0  # per-step normalisation constants for the episode score
    r_max_norm: float = 1.0
    horizon: int | None = None
    seed: int = 0


@dataclass
class UcbResult:
    selected: int
    phi: dict
    online_steps: int
    pulls: list
    trace: list = field(default_factory=list)  # (cumulative steps, best-so-far true regret)

    def steps_to_reach(self, target: float, tol: float = 1e-12) -> float:
        """Online steps after which the best-so-far true regret is <= target (inf if never)."""
        for steps, reg in self.trace:
            if reg is not None and reg <= target + tol:
                return float(steps)
        return math.inf


def _episode(env, policy, horizon, gamma, rng) -> float:
    s = env.reset(rng)
    ret, g = 0.0, 1.0
    for _ in range(horizon):
        r, s, done = env.step(s, policy.act(s, rng), rng)
        ret += g * r
        g *= gamma
        if done:
            break
    return ret


def ucb_online_tune(planner, grid: list, env, episode_budget: int, data: Dataset,
                    config: UcbConfig | None = None, oracle_mdp=None) -> UcbResult:
    """UCB bandit over pre-trained policies, one online episode per pull.

    Scores are 100 * (1 - normalised regret) of the episode return. The arm
    with the best mean score is the current selection; the trace records the
    best true regret among selections so far.
    """
    config = config or UcbConfig()
    if episode_budget < len(grid):
        raise ValueError(f"episode budget {episode_budget} is smaller than the {len(grid)} arms")
    counter = env if isinstance(env, StepCounter) else StepCounter(env)
    policies = [planner.train(data, phi, config.seed) for phi in grid]
    true_regs = [true_regret(oracle_mdp, p) for p in policies] if oracle_mdp is not None else None
    horizon = config.horizon or counter.max_steps
    gamma = counter.gamma
    rng = np.random.default_rng(config.seed)
    K = len(grid)
    n = np.zeros(K)
    total = np.zeros(K)
    pulls, trace = [], []
    best_so_far = math.inf
    start = counter.steps
    for t in range(1, episode_budget + 1):
        if t <= K:
            arm = t - 1
        else:
            idx = total / n + config.exploration * np.sqrt(math.log(t) / n)
            arm = int(np.argmax(idx))
        ret = _episode(counter, policies[arm], horizon, gamma, rng)
        reg = normalize_regret(ret, gamma, horizon, config.r_min_norm, config.r_max_norm, clip=True)
        n[arm] += 1
        total[arm] += 100.0 * (1.0 - reg)
        pulls.append(arm)
        means = np.where(n > 0, total / np.maximum(n, 1), -np.inf)
        current = int(np.argmax(means))
        if true_regs is not None:
            best_so_far = min(best_so_far, true_regs[current])
            trace.append((counter.steps - start, best_so_far))
        else:
            trace.append((counter.steps - start, None))
    means = total / n
    sel = int(np.argmax(means))
    return UcbResult(sel, grid[sel], counter.steps - start, pulls, trace)

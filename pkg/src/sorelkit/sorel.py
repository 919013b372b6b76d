"""Safe offline RL: tune the posterior, tune the solver, deploy only when the regret estimate allows.

Model settings come in two groups. ``phi_I`` describes the model itself
(prior concentration for conjugate posteriors; architecture and prior scale
for ensembles). ``phi_II`` describes inference (reward prior and validation
split; ensemble size, elites and clamp penalty). ``phi_III`` configures the
policy solver.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .mdp import Dataset, TabularMdp, percentile_norm_constants, regret_scale, return_bounds, true_regret
from .pil import DEFAULT_BALANCE_THRESHOLD, PilReport, balance_check, pil_conjugate_validation, pil_gaussian
from .posterior.conjugate import fit_conjugate
from .posterior.ensemble import EnsembleConfig, train_ensemble, validation_split
from .regret import RegretEstimate, all_stats, approx_regret, predictive_returns, r_max_hat
from .solver import SolverConfig, solve

CONJUGATE_PHI_I = ("alpha0",)
CONJUGATE_PHI_II = ("mu0", "tau0_sq", "validation_split")


@dataclass
class HyperGrid:
    phi_I: list
    phi_II: list
    phi_III: list

    def __post_init__(self):
        if not (self.phi_I and self.phi_II and self.phi_III):
            raise ValueError("every hyperparameter list must be nonempty")
        self.phi_III = [c if isinstance(c, SolverConfig) else SolverConfig.from_dict(c) for c in self.phi_III]

    @classmethod
    def from_dict(cls, d: dict) -> "HyperGrid":
        unknown = set(d) - {"phi_I", "phi_II", "phi_III"}
        if unknown:
            raise KeyError(f"unknown grid keys: {sorted(unknown)}")
        return cls(list(d.get("phi_I", [{}])), list(d.get("phi_II", [{}])), list(d.get("phi_III", [{}])))


def default_conjugate_grid() -> HyperGrid:
    return HyperGrid(phi_I=[{"alpha0": a} for a in (0.5, 1.0, 2.0)],
                     phi_II=[{"mu0": 0.0, "tau0_sq": 1.0, "validation_split": 0.2}],
                     phi_III=[SolverConfig("mean_mdp_vi")])


@dataclass
class ModelFit:
    phi_I: dict
    phi_II: dict
    posterior: object  # fitted on the whole prefix
    pil: PilReport  # measured on the held-out split
    balanced: bool
    rows: list = field(default_factory=list)  # (phi_I, phi_II, PilReport or error string)


def _check_keys(d: dict, allowed, what):
    unknown = set(d) - set(allowed)
    if unknown:
        raise KeyError(f"unknown {what} settings: {sorted(unknown)}")


def fit_and_score(data: Dataset, phi_I: dict, phi_II: dict, spec=None, seed: int = 0):
    """Fit one model configuration; return (posterior on all data, PIL on the validation split).

    Conjugate posteriors are scored after fitting on the training split and
    then refitted on the whole prefix, since more data can only sharpen
    them. Ensembles keep the training-split fit.
    """
    if data.discrete:
        _check_keys(phi_I, CONJUGATE_PHI_I, "phi_I")
        _check_keys(phi_II, CONJUGATE_PHI_II, "phi_II")
        alpha0 = phi_I.get("alpha0", 1.0)
        mu0, tau0_sq = phi_II.get("mu0", 0.0), phi_II.get("tau0_sq", 1.0)
        train, val = data.split(phi_II.get("validation_split", 0.2), seed)
        report = pil_conjugate_validation(fit_conjugate(spec, train, alpha0, mu0, tau0_sq), val)
        return fit_conjugate(spec, data, alpha0, mu0, tau0_sq), report
    cfg = EnsembleConfig.from_dict({**phi_I, **phi_II})
    model, _ = train_ensemble(data, cfg, seed)
    _, val = validation_split(data, cfg, seed)
    return model, pil_gaussian(model, val)


def tune_model(grid: HyperGrid, data: Dataset, threshold: float = DEFAULT_BALANCE_THRESHOLD,
               spec=None, seed: int = 0, require_balance: bool = True) -> ModelFit:
    """Pick the (phi_I, phi_II) pair with least validation PIL among balanced ones.

    If no pair is balanced the one with the smallest balance ratio is
    returned with ``balanced=False``. With ``require_balance=False`` the
    plain PIL minimiser is returned.
    """
    rows, fits = [], []
    for p1 in grid.phi_I:
        for p2 in grid.phi_II:
            try:
                post, rep = fit_and_score(data, p1, p2, spec, seed)
            except (ValueError, FloatingPointError) as exc:
                rows.append((p1, p2, f"{type(exc).__name__}: {exc}"))
                continue
            rows.append((p1, p2, rep))
            fits.append((p1, p2, post, rep))
    if not fits:
        raise RuntimeError("every model configuration failed to train: "
                           + "; ".join(str(r[2]) for r in rows))
    if not require_balance:
        best = min(fits, key=lambda f: f[3].pil)
        return ModelFit(best[0], best[1], best[2], best[3], balance_check(best[3], threshold), rows)
    passing = [f for f in fits if balance_check(f[3], threshold)]
    if passing:
        best = min(passing, key=lambda f: f[3].pil)
        return ModelFit(best[0], best[1], best[2], best[3], True, rows)
    best = min(fits, key=lambda f: f[3].balance_ratio)
    return ModelFit(best[0], best[1], best[2], best[3], False, rows)


@dataclass
class SolverChoice:
    phi_III: SolverConfig
    index: int
    policy: object
    estimate: RegretEstimate
    returns: np.ndarray
    rows: list = field(default_factory=list)  # (index, regret value)


def tune_solver(grid: HyperGrid, posterior, stat: str, r_hat: float, k_eval: int = 1000,
                seed: int = 0, env=None) -> SolverChoice:
    """Solve with each phi_III and keep the lowest approximate regret (first index wins ties)."""
    best, rows = None, []
    for i, cfg in enumerate(grid.phi_III):
        policy = solve(posterior, cfg, env)
        rets = predictive_returns(posterior, policy, k_eval, seed=seed + 7919, env=env)
        est = approx_regret(stat, rets, r_hat)
        rows.append((i, est.value))
        if best is None or est.value < best.estimate.value:
            best = SolverChoice(cfg, i, policy, est, rets)
    best.rows = rows
    return best


@dataclass
class SorelRow:
    n: int
    pil: PilReport
    phi_I: dict
    phi_II: dict
    phi_III: SolverConfig
    r_max_hat: float
    approx: dict  # normalised regret for every statistic
    approx_regret: float  # normalised value of the gating statistic
    balanced: bool
    gate: bool  # approx_regret <= r_deploy and balanced
    deployed: bool
    true_regret: float | None = None  # normalised, test mode only
    policy: object = None

    def as_dict(self) -> dict:
        return {"N": self.n, "pil": self.pil.pil, "mse_term": self.pil.mse_term,
                "var_term": self.pil.var_term, "balance_ratio": self.pil.balance_ratio,
                "balanced": self.balanced, "phi_I": self.phi_I, "phi_II": self.phi_II,
                "phi_III": self.phi_III.as_dict(), "r_max_hat": self.r_max_hat,
                "approx_regret": self.approx_regret,
                **{f"approx_{k}": v for k, v in self.approx.items()},
                "gate": self.gate, "deployed": self.deployed, "true_regret": self.true_regret}


@dataclass
class SorelReport:
    r_deploy: float
    stat: str
    rows: list = field(default_factory=list)
    deployed_at: int | None = None
    exhausted: bool = False

    @property
    def deployed(self) -> bool:
        return self.deployed_at is not None

    @property
    def deployed_row(self) -> SorelRow | None:
        return next((r for r in self.rows if r.deployed), None)

    def append(self, row: SorelRow) -> None:
        if self.rows and row.n <= self.rows[-1].n:
            raise ValueError("report rows must have strictly increasing N")
        self.rows.append(row)

    def summary(self) -> dict:
        dep = self.deployed_row
        return {"r_deploy": self.r_deploy, "stat": self.stat, "deployed": self.deployed,
                "deployed_at": self.deployed_at, "exhausted": self.exhausted,
                "deployed_true_regret": None if dep is None else dep.true_regret,
                "rows": [r.as_dict() for r in self.rows]}

    CSV_COLUMNS = ("N", "pil", "mse_term", "var_term", "balance_ratio", "balanced", "r_max_hat",
                   "approx_regret", "approx_median", "approx_mean", "approx_max", "approx_min",
                   "approx_variance2", "approx_combined", "gate", "deployed", "true_regret", "phi_I",
                   "phi_II", "phi_III")

    def csv_rows(self) -> list[list]:
        out = []
        for r in self.rows:
            d = r.as_dict()
            out.append([json.dumps(d[c], sort_keys=True) if isinstance(d[c], dict) else
                        ("" if d[c] is None else repr(d[c]) if isinstance(d[c], float) else d[c])
                        for c in self.CSV_COLUMNS])
        return out


def sorel_loop(data: Dataset, prefixes, r_deploy: float, grid: HyperGrid, stat: str = "median",
               test_env=None, spec=None, env=None, threshold: float = DEFAULT_BALANCE_THRESHOLD,
               seed: int = 0, k_eval: int = 1000, run_all_prefixes: bool = False,
               retune_every_n: bool = False) -> SorelReport:
    """Consume growing prefixes of ``data`` until the regret estimate allows deployment.

    Regrets are normalised by the spread of achievable returns: the true
    worst and best policy values when ``test_env`` is a known tabular MDP,
    otherwise the reward percentiles of the current prefix. With
    ``run_all_prefixes`` the loop keeps going after deployment (validation
    mode); only the first passing row is marked deployed. ``phi_I`` and
    ``phi_II`` are tuned on the first prefix and reused, unless
    ``retune_every_n``. ``phi_III`` is tuned at every prefix.
    """
    prefixes = [int(n) for n in prefixes]
    if any(b <= a for a, b in zip(prefixes, prefixes[1:])):
        raise ValueError("prefixes must be strictly increasing")
    if not 0.0 <= r_deploy <= 1.0:
        raise ValueError("r_deploy must lie in [0, 1]")
    if spec is None and isinstance(test_env, TabularMdp):
        spec = test_env.spec
    report = SorelReport(r_deploy, stat)
    chosen = None
    scale_true = None
    if isinstance(test_env, TabularMdp):
        lo, hi = return_bounds(test_env)
        scale_true = regret_scale(test_env.gamma, lo, hi)
    for n in prefixes:
        data_n = data.prefix(n)
        if chosen is None or retune_every_n:
            fit = tune_model(grid, data_n, threshold, spec, seed)
            chosen = (fit.phi_I, fit.phi_II)
        else:
            post, rep = fit_and_score(data_n, chosen[0], chosen[1], spec, seed)
            fit = ModelFit(chosen[0], chosen[1], post, rep, balance_check(rep, threshold))
        r_hat = r_max_hat(data_n)
        sol = tune_solver(grid, fit.posterior, stat, r_hat, k_eval, seed, env)
        if scale_true is not None:
            scale = scale_true
        else:
            lo, hi = percentile_norm_constants(data_n)
            scale = regret_scale(data_n.gamma, lo, hi)
        approx = {k: v / scale for k, v in all_stats(sol.returns, r_hat).items()}
        value = approx[stat]
        gate = bool(fit.balanced and value <= r_deploy)
        deploy = gate and report.deployed_at is None
        tr = None
        if isinstance(test_env, TabularMdp):
            tr = true_regret(test_env, sol.policy) / scale_true
        report.append(SorelRow(n, fit.pil, fit.phi_I, fit.phi_II, sol.phi_III, r_hat, approx, value,
                               fit.balanced, gate, deploy, tr, sol.policy))
        if deploy:
            report.deployed_at = n
            if not run_all_prefixes:
                break
    report.exhausted = report.deployed_at is None
    return report

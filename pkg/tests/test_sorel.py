import numpy as np
import pytest

import sorelkit.sorel as sorel
from sorelkit.envs import chain5, chain5_behavior
from sorelkit.mdp import TabularMdp, TabularPolicy, regret_scale, sample_dataset
from sorelkit.pil import _report, balance_check, pil_conjugate_validation
from sorelkit.posterior import fit_conjugate
from sorelkit.solver import SolverConfig
from sorelkit.sorel import (HyperGrid, SorelReport, default_conjugate_grid, sorel_loop, tune_model,
                            tune_solver)


@pytest.fixture(scope="module")
def chain():
    mdp = chain5()
    return mdp, sample_dataset(mdp, chain5_behavior(mdp), 3000, seed=0)


def _bandit():
    return TabularMdp(np.ones((1, 2, 1)), np.array([[0.0, 1.0]]), 0.0, 0.5, np.ones(1), max_steps=10)


def test_single_combination_grid(chain):
    mdp, data = chain
    grid = HyperGrid([{"alpha0": 0.5}], [{"tau0_sq": 2.0}], [SolverConfig()])
    rep = sorel_loop(data, [500, 1000], 0.1, grid, test_env=mdp, run_all_prefixes=True)
    assert [r.n for r in rep.rows] == [500, 1000]
    assert all(r.phi_I == {"alpha0": 0.5} and r.phi_II == {"tau0_sq": 2.0} for r in rep.rows)


def test_alpha0_choice_matches_exhaustive_search(chain):
    mdp, data = chain
    data = data.prefix(1500)
    alphas = (0.1, 0.5, 1.0, 2.0, 5.0)
    grid = HyperGrid([{"alpha0": a} for a in alphas], [{}], [SolverConfig()])
    train, val = data.split(0.2, 0)
    reports = [pil_conjugate_validation(fit_conjugate(mdp.spec, train, a), val) for a in alphas]
    ok = [i for i, r in enumerate(reports) if balance_check(r)]
    assert ok
    best = min(ok, key=lambda i: reports[i].pil)
    fit = tune_model(grid, data, spec=mdp.spec)
    assert fit.phi_I == {"alpha0": alphas[best]} and fit.balanced
    assert fit.pil.pil == reports[best].pil


def _fake_scores(monkeypatch, reports):
    """Make fit_and_score return fixed reports keyed by alpha0."""
    monkeypatch.setattr(sorel, "fit_and_score",
                        lambda data, p1, p2, spec, seed: (None, reports[p1["alpha0"]]))


def test_balance_beats_lower_pil(monkeypatch, chain):
    _, data = chain
    # alpha0=1 has the smaller PIL but is badly unbalanced
    _fake_scores(monkeypatch, {1: _report(0.3, 0.0, 10, "x"), 2: _report(0.25, 0.25, 10, "x")})
    grid = HyperGrid([{"alpha0": 1}, {"alpha0": 2}], [{}], [SolverConfig()])
    fit = tune_model(grid, data)
    assert fit.phi_I == {"alpha0": 2} and fit.balanced
    assert tune_model(grid, data, require_balance=False).phi_I == {"alpha0": 1}


def test_no_balanced_pair_falls_back_to_best_ratio(monkeypatch, chain):
    _, data = chain
    _fake_scores(monkeypatch, {1: _report(1.0, 0.0, 10, "x"), 2: _report(1.0, 0.5, 10, "x")})
    fit = tune_model(HyperGrid([{"alpha0": 1}, {"alpha0": 2}], [{}], [SolverConfig()]), data)
    assert fit.phi_I == {"alpha0": 2} and not fit.balanced


def test_tune_solver_prefers_longer_search():
    mdp = _bandit()
    post = fit_conjugate(mdp.spec, sample_dataset(mdp, TabularPolicy.uniform(1, 2), 200, seed=0))
    grid = HyperGrid([{}], [{}], [SolverConfig("cross_entropy", iterations=1),
                                  SolverConfig("cross_entropy", iterations=50)])
    choice = tune_solver(grid, post, "median", 2.0, k_eval=200)
    assert choice.index == 1 and choice.phi_III.iterations == 50
    assert choice.rows[1][1] < choice.rows[0][1]
    single = tune_solver(HyperGrid([{}], [{}], [SolverConfig()]), post, "median", 2.0, k_eval=50)
    assert single.index == 0 and len(single.rows) == 1


def test_tune_solver_tie_keeps_first():
    mdp = _bandit()
    post = fit_conjugate(mdp.spec, sample_dataset(mdp, TabularPolicy.uniform(1, 2), 50, seed=0))
    grid = HyperGrid([{}], [{}], [SolverConfig(seed=3), SolverConfig(seed=4)])
    choice = tune_solver(grid, post, "median", 2.0, k_eval=100)
    assert choice.rows[0][1] == choice.rows[1][1] and choice.index == 0


def test_near_certain_model_deploys_at_first_prefix():
    mdp = _bandit()
    data = sample_dataset(mdp, TabularPolicy.uniform(1, 2), 1000, seed=0)
    rep = sorel_loop(data, [100, 1000], 0.1, default_conjugate_grid(), test_env=mdp)
    assert rep.deployed_at == 100 and len(rep.rows) == 1
    assert rep.rows[0].true_regret == 0.0 and not rep.exhausted


def test_zero_threshold_never_deploys(chain):
    mdp, data = chain
    rep = sorel_loop(data, [100, 1000, 3000], 0.0, default_conjugate_grid(), test_env=mdp)
    assert not rep.deployed and rep.exhausted and len(rep.rows) == 3
    assert rep.summary()["deployed_true_regret"] is None


def test_validation_mode_marks_only_first_deployment():
    mdp = _bandit()
    data = sample_dataset(mdp, TabularPolicy.uniform(1, 2), 1000, seed=0)
    rep = sorel_loop(data, [100, 500, 1000], 0.1, default_conjugate_grid(), test_env=mdp,
                     run_all_prefixes=True)
    assert [r.deployed for r in rep.rows] == [True, False, False]
    assert all(r.gate for r in rep.rows)


def test_rows_strictly_increasing(chain):
    mdp, data = chain
    with pytest.raises(ValueError):
        sorel_loop(data, [1000, 1000], 0.1, default_conjugate_grid(), test_env=mdp)
    with pytest.raises(ValueError):
        sorel_loop(data, [100], 1.5, default_conjugate_grid(), test_env=mdp)
    rep = sorel_loop(data, [100, 300], 1.0, default_conjugate_grid(), test_env=mdp, run_all_prefixes=True)
    fresh = SorelReport(1.0, "median")
    fresh.append(rep.rows[1])
    with pytest.raises(ValueError):
        fresh.append(rep.rows[0])


def test_percentile_normalisation_without_test_env(chain):
    mdp, data = chain
    rep = sorel_loop(data, [1000], 1.0, default_conjugate_grid(), spec=mdp.spec)
    row = rep.rows[0]
    assert row.true_regret is None
    lo, hi = np.percentile(data.prefix(1000).r, [2.5, 97.5])
    raw = row.approx["median"] * regret_scale(mdp.gamma, lo, hi)
    assert np.isfinite(raw)


def test_summary_and_csv_columns(chain):
    mdp, data = chain
    rep = sorel_loop(data, [200, 400], 0.1, default_conjugate_grid(), test_env=mdp, run_all_prefixes=True)
    rows = rep.csv_rows()
    assert len(rows) == 2 and all(len(r) == len(SorelReport.CSV_COLUMNS) for r in rows)
    summary = rep.summary()
    assert [r["N"] for r in summary["rows"]] == [200, 400]


def test_grid_rejects_unknown_keys(chain):
    mdp, data = chain
    with pytest.raises(KeyError):
        HyperGrid.from_dict({"phi_IV": []})
    with pytest.raises(ValueError):
        HyperGrid([], [{}], [{}])
    grid = HyperGrid([{"beta": 1.0}], [{}], [SolverConfig()])
    with pytest.raises(KeyError):
        tune_model(grid, data.prefix(200), spec=mdp.spec)

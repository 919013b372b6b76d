"""Command-line runner: ``sorelkit <command> [--config FILE] [flags]``.

Each command reads settings from its defaults, then an optional YAML/JSON
config file, then command-line flags. Unknown config keys are rejected. The
resolved settings are written to ``<out_dir>/<command>.resolved.json`` before
anything else. The output directory comes from ``--out-dir``, then the
``SORELKIT_OUT_DIR`` environment variable, then ``out_dir`` in the config,
then ``./out``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical error,
5 PIL undefined. Failures print one JSON object to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import envs
from .io import (ConfigError, DatasetFormatError, check_keys, load_config, output_dir, read_dataset,
                 to_jsonable, write_csv, write_dataset, write_json)
from .mdp import TabularMdp, TabularPolicy, return_bounds, sample_dataset
from .pil import DEFAULT_BALANCE_THRESHOLD, PilUndefinedError, pil_conjugate_validation, pil_gaussian
from .posterior.conjugate import fit_conjugate
from .posterior.ensemble import (EnsembleConfig, ValidationTooSmallError, load_checkpoint,
                                 save_checkpoint, train_ensemble, validation_split)
from .regret import NoCompleteEpisodeError, regret_curve_thm2
from .sorel import HyperGrid, default_conjugate_grid, sorel_loop
from .solver import SolverConfig
from .torel import BehaviorCloning, PessimisticPlanner, UcbConfig, torel_tune, ucb_online_tune

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_PIL = 0, 2, 3, 4, 5

CURVE_COLUMNS = ("N", "d", "gamma", "bound")
TOREL_COLUMNS = ("phi", "metric", "rank", "true_regret", "error")
TRACE_COLUMNS = ("episode", "arm", "online_steps", "best_true_regret")

# defaults per command; every key here may appear in a config file
DEFAULTS = {
    "make-dataset": {"env": None, "n": 1000, "seed": 0, "behavior": "default",
                     "output": "dataset.jsonl"},
    "train-model": {"dataset": None, "env": None, "seed": 0, "ensemble": {}, "alpha0": 1.0,
                    "mu0": 0.0, "tau0_sq": 1.0, "output": None},
    "pil": {"dataset": None, "env": None, "seed": 0, "checkpoint": None, "ensemble": {},
            "alpha0": 1.0, "mu0": 0.0, "tau0_sq": 1.0, "validation_split": 0.2,
            "min_points": None, "output": "pil.json"},
    "sorel": {"dataset": None, "env": None, "prefixes": None, "r_deploy": 0.1, "grid": None,
              "stat": "median", "seed": 0, "threshold": DEFAULT_BALANCE_THRESHOLD, "k_eval": 1000,
              "test_mode": True, "run_all_prefixes": False, "retune_every_n": False},
    "torel": {"planner": "pessimistic", "grid": None, "dataset": None, "env": None, "stat": "median",
              "seed": 0, "threshold": DEFAULT_BALANCE_THRESHOLD, "k_eval": 1000, "validate": True},
    "ucb": {"planner": "pessimistic", "grid": None, "dataset": None, "env": None, "budget": 50,
            "seed": 0, "exploration": float(np.sqrt(2.0))},
    "curves": {"C": 1.0, "d": [10, 100, 1000, 10000], "gamma": [0.9, 0.99, 0.999], "d_fixed": 100,
               "gamma_fixed": 0.99, "n_min": 1.0, "n_max": 1e9, "points": 200, "r_max": 0.5,
               "form": "appendix"},
    "report": {"input": None},
}
for _d in DEFAULTS.values():
    _d["out_dir"] = None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _env_param(text: str):
    if "=" not in text:
        raise ConfigError(f"--env-param expects key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k, yaml.safe_load(v)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sorelkit", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON settings file")
        sp.add_argument("--out-dir")
        sp.add_argument("--seed", type=int)
        return sp

    def env_flags(sp):
        sp.add_argument("--env", help="builtin environment name")
        sp.add_argument("--env-param", action="append", type=_env_param, default=None,
                        metavar="KEY=VALUE")

    sp = common(sub.add_parser("make-dataset", help="sample a dataset from a builtin environment"))
    env_flags(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--behavior", choices=["default", "uniform"])
    sp.add_argument("--output")

    sp = common(sub.add_parser("train-model", help="fit a posterior and save it"))
    env_flags(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--output")

    sp = common(sub.add_parser("pil", help="validation PIL of a posterior"))
    env_flags(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--min-points", type=int)
    sp.add_argument("--output")

    sp = common(sub.add_parser("sorel", help="run the safe offline RL loop"))
    env_flags(sp)
    sp.add_argument("--dataset")
    sp.add_argument("--prefixes", type=lambda t: [int(float(x)) for x in t.split(",")])
    sp.add_argument("--r-deploy", type=float)
    sp.add_argument("--grid", help="grid file")
    sp.add_argument("--stat")
    sp.add_argument("--run-all-prefixes", action="store_const", const=True)

    for name in ("torel", "ucb"):
        sp = common(sub.add_parser(name, help="offline planner tuning" if name == "torel"
                                   else "online UCB tuning baseline"))
        env_flags(sp)
        sp.add_argument("--planner", choices=["pessimistic", "behavior_cloning"])
        sp.add_argument("--grid", help="grid file")
        sp.add_argument("--dataset")
        if name == "torel":
            sp.add_argument("--stat")
        else:
            sp.add_argument("--budget", type=int)

    sp = common(sub.add_parser("curves", help="expected-regret curves as CSV"))
    sp.add_argument("--C", type=float)
    sp.add_argument("--d", type=lambda t: [int(float(x)) for x in t.split(",")])
    sp.add_argument("--gamma", type=lambda t: [float(x) for x in t.split(",")])
    sp.add_argument("--points", type=int)

    sp = common(sub.add_parser("report", help="summarise JSON outputs in a directory"))
    sp.add_argument("--input")
    return p


def resolve(args) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        user = load_config(args.config)
        check_keys(user, cfg, f"{args.command} config")
        cfg.update(user)
    skip = {"command", "config", "env_param"}
    for k, v in vars(args).items():
        if k not in skip and v is not None and k in cfg:
            cfg[k] = v
    if getattr(args, "env_param", None):
        name = cfg["env"] if isinstance(cfg["env"], str) else None
        if name is None:
            raise ConfigError("--env-param needs --env NAME")
        cfg["env"] = {"name": name, "params": dict(args.env_param)}
    return cfg


def make_env(spec):
    """Environment from a builtin name, {name, params}, or an inline {tabular: {...}} definition."""
    if spec is None:
        return None
    if isinstance(spec, str):
        return envs.make_env(spec)
    if not isinstance(spec, dict):
        raise ConfigError("env must be a name or a mapping")
    if "tabular" in spec:
        check_keys(spec, ("tabular",), "env")
        t = dict(spec["tabular"])
        check_keys(t, ("transition", "reward_mean", "reward_std", "gamma", "initial_dist",
                       "max_steps", "env_id"), "env.tabular")
        try:
            return TabularMdp(np.array(t.pop("transition"), dtype=float),
                              np.array(t.pop("reward_mean"), dtype=float),
                              t.pop("reward_std"), t.pop("gamma"),
                              np.array(t.pop("initial_dist"), dtype=float), **t)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"incomplete inline tabular env: {exc}") from None
    check_keys(spec, ("name", "params"), "env")
    try:
        return envs.make_env(spec["name"], **spec.get("params", {}))
    except TypeError as exc:
        raise ConfigError(f"bad env params: {exc}") from None


def _need(cfg, key):
    if cfg.get(key) is None:
        raise ConfigError(f"missing required setting {key!r}")
    return cfg[key]


def _load_grid_file(value):
    """A grid is given inline in the config or as a path to a YAML/JSON file."""
    return load_config(value, mapping=False) if isinstance(value, str) else value


def _tabular_env(cfg, what):
    env = make_env(_need(cfg, "env"))
    if not isinstance(env, TabularMdp):
        raise ConfigError(f"{what} needs a tabular environment")
    return env


def _check_dataset_env(data, env):
    if env is None:
        return
    if data.discrete != env.discrete:
        raise DatasetFormatError("dataset and environment disagree on discrete vs continuous")
    if isinstance(env, TabularMdp) and (data.state_dim, data.action_dim) != (env.n_states, env.n_actions):
        raise DatasetFormatError(f"dataset has {data.state_dim} states and {data.action_dim} actions, "
                                 f"env has {env.n_states} and {env.n_actions}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_dataset(cfg, out: Path) -> dict:
    env = make_env(_need(cfg, "env"))
    if cfg["behavior"] == "uniform":
        if not isinstance(env, TabularMdp):
            raise ConfigError("behavior 'uniform' is only defined for tabular envs")
        beh = [TabularPolicy.uniform(env.n_states, env.n_actions)]
    else:
        beh = envs.default_behavior(env)
    data = sample_dataset(env, beh, int(cfg["n"]), int(cfg["seed"]))
    path = out / cfg["output"]
    write_dataset(path, data)
    return {"dataset": str(path), "n": len(data)}


def cmd_train_model(cfg, out: Path) -> dict:
    data = read_dataset(_need(cfg, "dataset"))
    if data.discrete:
        env = _tabular_env(cfg, "a tabular dataset")
        _check_dataset_env(data, env)
        post = fit_conjugate(env.spec, data, cfg["alpha0"], cfg["mu0"], cfg["tau0_sq"])
        path = out / (cfg["output"] or "posterior.npz")
        with open(path, "wb") as fh:
            np.savez(fh, counts=post.counts, reward_sum=post.reward_sum,
                     prior=np.array([post.prior.alpha0, post.prior.mu0, post.prior.tau0_sq]))
        return {"posterior": str(path), "n": len(data)}
    model, stats = train_ensemble(data, EnsembleConfig.from_dict(cfg["ensemble"]), int(cfg["seed"]))
    path = out / (cfg["output"] or "model.npz")
    save_checkpoint(model, path)
    write_json(out / "train_stats.json", stats)
    return {"checkpoint": str(path), "n": len(data), "elites": stats["elites"]}


def cmd_pil(cfg, out: Path) -> dict:
    data = read_dataset(_need(cfg, "dataset"))
    seed = int(cfg["seed"])
    if data.discrete:
        env = _tabular_env(cfg, "a tabular dataset")
        _check_dataset_env(data, env)
        train, val = data.split(cfg["validation_split"], seed)
        post = fit_conjugate(env.spec, train, cfg["alpha0"], cfg["mu0"], cfg["tau0_sq"])
        report = pil_conjugate_validation(post, val, cfg["min_points"] or 1)
    else:
        if cfg["checkpoint"]:
            model = load_checkpoint(cfg["checkpoint"])
        else:
            try:
                model, _ = train_ensemble(data, EnsembleConfig.from_dict(cfg["ensemble"]), seed)
            except ValidationTooSmallError as exc:
                raise PilUndefinedError(str(exc)) from None
        _, val = validation_split(data, model.config, seed)
        report = pil_gaussian(model, val, cfg["min_points"])
    result = report.as_dict()
    write_json(out / cfg["output"], result)
    return result


def _grid_for(cfg, data):
    raw = _load_grid_file(cfg["grid"])
    if raw is None:
        if data.discrete:
            return default_conjugate_grid()
        return HyperGrid([{}], [{}], [SolverConfig("cross_entropy", population=32, iterations=10,
                                                   n_episodes=16, seed=int(cfg["seed"]))])
    if not isinstance(raw, dict):
        raise ConfigError("sorel grid must be a mapping with phi_I, phi_II, phi_III")
    return HyperGrid.from_dict(raw)


def cmd_sorel(cfg, out: Path) -> dict:
    data = read_dataset(_need(cfg, "dataset"))
    env = make_env(_need(cfg, "env"))
    _check_dataset_env(data, env)
    prefixes = cfg["prefixes"] or [len(data)]
    if max(prefixes) > len(data):
        raise ConfigError(f"prefix {max(prefixes)} exceeds the dataset size {len(data)}")
    grid = _grid_for(cfg, data)
    tabular = isinstance(env, TabularMdp)
    report = sorel_loop(data, prefixes, float(cfg["r_deploy"]), grid, cfg["stat"],
                        test_env=env if tabular and cfg["test_mode"] else None,
                        spec=env.spec if tabular else None, env=None if tabular else env,
                        threshold=float(cfg["threshold"]), seed=int(cfg["seed"]),
                        k_eval=int(cfg["k_eval"]), run_all_prefixes=bool(cfg["run_all_prefixes"]),
                        retune_every_n=bool(cfg["retune_every_n"]))
    write_csv(out / "sorel.csv", report.CSV_COLUMNS, report.csv_rows())
    summary = report.summary()
    write_json(out / "sorel_summary.json", summary)
    return {k: summary[k] for k in ("deployed", "deployed_at", "deployed_true_regret", "exhausted")}


def _planner(cfg, env, data):
    if cfg["planner"] == "pessimistic":
        return PessimisticPlanner(env.spec)
    if cfg["planner"] == "behavior_cloning":
        return BehaviorCloning(data.state_dim, data.action_dim)
    raise ConfigError(f"unknown planner {cfg['planner']!r}")


def _planner_grid(cfg):
    raw = _load_grid_file(cfg["grid"])
    if raw is None:
        key = "lam" if cfg["planner"] == "pessimistic" else "smoothing"
        return [{key: v} for v in (0.0, 0.1, 1.0, 10.0, 100.0)]
    if not isinstance(raw, list) or not all(isinstance(x, dict) for x in raw):
        raise ConfigError("planner grid must be a list of mappings")
    return raw


def cmd_torel(cfg, out: Path) -> dict:
    data = read_dataset(_need(cfg, "dataset"))
    if not data.discrete:
        raise ConfigError("torel runs on tabular datasets")
    env = _tabular_env(cfg, "torel")
    _check_dataset_env(data, env)
    grid = _planner_grid(cfg)
    report = torel_tune(_planner(cfg, env, data), grid, data, cfg["stat"], spec=env.spec,
                        oracle_mdp=env if cfg["validate"] else None,
                        threshold=float(cfg["threshold"]), k_eval=int(cfg["k_eval"]),
                        seed=int(cfg["seed"]))
    rows = [[json.dumps(r.phi, sort_keys=True), "" if r.metric is None else r.metric,
             "" if r.rank is None else r.rank, "" if r.true_regret is None else r.true_regret,
             r.error or ""] for r in report.rows]
    write_csv(out / "torel.csv", TOREL_COLUMNS, rows)
    summary = report.summary()
    write_json(out / "torel_summary.json", summary)
    return summary


def cmd_ucb(cfg, out: Path) -> dict:
    data = read_dataset(_need(cfg, "dataset"))
    if not data.discrete:
        raise ConfigError("ucb runs on tabular datasets")
    env = _tabular_env(cfg, "ucb")
    _check_dataset_env(data, env)
    grid = _planner_grid(cfg)
    lo, hi = return_bounds(env)
    config = UcbConfig(exploration=float(cfg["exploration"]), r_min_norm=lo, r_max_norm=hi,
                       seed=int(cfg["seed"]))
    res = ucb_online_tune(_planner(cfg, env, data), grid, env, int(cfg["budget"]), data, config,
                          oracle_mdp=env)
    rows = [[t + 1, arm, steps, reg] for t, (arm, (steps, reg)) in enumerate(zip(res.pulls, res.trace))]
    write_csv(out / "ucb_trace.csv", TRACE_COLUMNS, rows)
    summary = {"selected": res.phi, "online_steps": res.online_steps,
               "final_best_true_regret": res.trace[-1][1] if res.trace else None}
    write_json(out / "ucb_summary.json", summary)
    return summary


def curve_rows(cfg) -> list:
    n_grid = np.geomspace(float(cfg["n_min"]), float(cfg["n_max"]), int(cfg["points"]))
    pairs = [(int(d), float(cfg["gamma_fixed"])) for d in cfg["d"]]
    pairs += [(int(cfg["d_fixed"]), float(g)) for g in cfg["gamma"]]
    seen, rows = set(), []
    for d, g in pairs:
        if (d, g) in seen:
            continue
        seen.add((d, g))
        curve = regret_curve_thm2(float(cfg["C"]), d, g, n_grid, float(cfg["r_max"]), cfg["form"])
        rows.extend([float(n), d, g, float(v)] for n, v in zip(curve.n_grid, curve.values))
    return rows


def cmd_curves(cfg, out: Path) -> dict:
    rows = curve_rows(cfg)
    write_csv(out / "curves.csv", CURVE_COLUMNS, rows)
    return {"curves": str(out / "curves.csv"), "rows": len(rows)}


def cmd_report(cfg, out: Path) -> dict:
    src = Path(cfg["input"] or out)
    if not src.is_dir():
        raise FileNotFoundError(f"report input directory not found: {src}")
    lines, found = ["# sorelkit report", ""], {}
    for path in sorted(src.glob("*.json")):
        if path.name.endswith(".resolved.json"):
            continue
        with open(path) as fh:
            obj = json.load(fh)
        found[path.name] = obj
        lines.append(f"## {path.name}")
        if isinstance(obj, dict):
            for k, v in obj.items():
                if k != "rows":
                    lines.append(f"- {k}: {json.dumps(v, sort_keys=True)}")
        lines.append("")
    (out / "report.md").write_text("\n".join(lines))
    return {"files": sorted(found)}


COMMANDS = {"make-dataset": cmd_make_dataset, "train-model": cmd_train_model, "pil": cmd_pil,
            "sorel": cmd_sorel, "torel": cmd_torel, "ucb": cmd_ucb, "curves": cmd_curves,
            "report": cmd_report}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (PilUndefinedError, ValidationTooSmallError)):
        return EXIT_PIL
    if isinstance(exc, (DatasetFormatError, NoCompleteEpisodeError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (FloatingPointError, np.linalg.LinAlgError, RuntimeError)):
        return EXIT_NUMERIC
    return EXIT_CONFIG


def run_command(argv=None) -> int:
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        cfg = resolve(args)
        out = output_dir(args.out_dir, cfg.get("out_dir"))
        cfg["out_dir"] = str(out)
        write_json(out / f"{command}.resolved.json", cfg)
        result = COMMANDS[command](cfg, out)
    except (ConfigError, KeyError, TypeError, ValueError, OSError, RuntimeError, FloatingPointError,
            np.linalg.LinAlgError, yaml.YAMLError) as exc:
        code = _exit_code(exc)
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        err = {"error": type(exc).__name__, "code": code, "command": command, "message": msg}
        print(json.dumps(err), file=sys.stderr)
        return code
    print(json.dumps(to_jsonable(result), sort_keys=True, allow_nan=False, default=str))
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()

"""Dataset files, config files and CSV output.

Dataset files are JSON lines. The first line is a header object; every
following line holds one transition with keys s, a, r, s_next, done in that
order. Floats are written with ``repr`` precision, so a round trip is exact.
"""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np
import yaml

from .mdp import Dataset

FORMAT_TAG = "sorelkit-dataset"
FORMAT_VERSION = 1
RECORD_KEYS = ("s", "a", "r", "s_next", "done")


class DatasetFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _scalar_or_list(x, discrete: bool):
    if discrete:
        return int(x)
    return [float(v) for v in np.atleast_1d(x)]


def write_dataset(path, data: Dataset) -> None:
    header = {"format": FORMAT_TAG, "version": FORMAT_VERSION, "env_id": data.env_id,
              "discrete": bool(data.discrete), "state_dim": int(data.state_dim),
              "action_dim": int(data.action_dim), "gamma": float(data.gamma),
              "max_steps": int(data.max_steps), "metadata": data.metadata}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for i in range(len(data)):
            rec = {"s": _scalar_or_list(data.s[i], data.discrete),
                   "a": _scalar_or_list(data.a[i], data.discrete),
                   "r": float(data.r[i]),
                   "s_next": _scalar_or_list(data.s_next[i], data.discrete),
                   "done": bool(data.done[i])}
            fh.write(json.dumps(rec) + "\n")


def _check_field(value, name, discrete, dim, lineno):
    if discrete:
        if isinstance(value, bool) or not isinstance(value, int):
            raise DatasetFormatError(f"line {lineno}: {name} must be an integer index")
        if not 0 <= value < dim:
            raise DatasetFormatError(f"line {lineno}: {name}={value} outside [0, {dim})")
        return value
    if not isinstance(value, list) or len(value) != dim:
        got = len(value) if isinstance(value, list) else "a scalar"
        raise DatasetFormatError(f"line {lineno}: {name} has dimension {got}, header says {dim}")
    return value


def read_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line 1: malformed header ({exc.msg})") from None
        if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
            raise DatasetFormatError("line 1: not a dataset header")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"line 1: unsupported version {header.get('version')}")
        discrete = bool(header["discrete"])
        sd, ad = int(header["state_dim"]), int(header["action_dim"])
        cols = {k: [] for k in RECORD_KEYS}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict) or tuple(rec) != RECORD_KEYS:
                raise DatasetFormatError(f"line {lineno}: record keys must be {list(RECORD_KEYS)} in order")
            cols["s"].append(_check_field(rec["s"], "s", discrete, sd, lineno))
            cols["a"].append(_check_field(rec["a"], "a", discrete, ad, lineno))
            cols["s_next"].append(_check_field(rec["s_next"], "s_next", discrete, sd, lineno))
            r = rec["r"]
            if isinstance(r, bool) or not isinstance(r, (int, float)) or not np.isfinite(r):
                raise DatasetFormatError(f"line {lineno}: r must be a finite number")
            cols["r"].append(float(r))
            if not isinstance(rec["done"], bool):
                raise DatasetFormatError(f"line {lineno}: done must be true or false")
            cols["done"].append(rec["done"])
    shape_s = (0,) if discrete else (0, sd)
    shape_a = (0,) if discrete else (0, ad)

    def arr(key, empty_shape):
        return np.array(cols[key]) if cols[key] else np.zeros(empty_shape)

    return Dataset(arr("s", shape_s), arr("a", shape_a), np.array(cols["r"], dtype=float),
                   arr("s_next", shape_s), np.array(cols["done"], dtype=bool),
                   env_id=header.get("env_id", ""), discrete=discrete, state_dim=sd, action_dim=ad,
                   gamma=float(header["gamma"]), max_steps=int(header["max_steps"]),
                   metadata=header.get("metadata", {}))


def load_config(path, mapping: bool = True):
    """Read a YAML or JSON file; with ``mapping`` the top level must be a dict."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if cfg is None:
        return {} if mapping else None
    if mapping and not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg


def check_keys(cfg: dict, allowed, where: str = "config") -> None:
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def to_jsonable(obj):
    """Plain Python copy of ``obj`` with numpy values unwrapped and nan/inf replaced by None."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False, default=str)
        fh.write("\n")


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def output_dir(cli_value: str | None, config_value: str | None = None) -> Path:
    """Command-line flag, then the SORELKIT_OUT_DIR variable, then the config, then ./out."""
    chosen = cli_value or os.environ.get("SORELKIT_OUT_DIR") or config_value or "out"
    p = Path(chosen)
    p.mkdir(parents=True, exist_ok=True)
    return p

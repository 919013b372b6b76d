"""Gaussian ensemble world model with randomised priors, in plain numpy.

Each member maps normalised (s, a) to a Gaussian over normalised (r, delta s).
Members are stored stacked along a leading axis so one forward pass serves
the whole ensemble. Gradients are written out by hand.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..mdp import Dataset

CHECKPOINT_VERSION = 1


class ValidationTooSmallError(ValueError):
    """The validation split cannot fill a single batch, so PIL is undefined."""


class UntrainedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    """Model (architecture, prior, clamp init) and inference (M, elites, c, split) settings."""

    hidden: tuple = (32, 32, 32)
    n_members: int = 7
    n_elites: int = 5
    prior_scale: float = 1.0
    logvar_max_init: float = 0.5
    logvar_min_init: float = -10.0
    logvar_diff_coeff: float = 0.01
    lr: float = 1e-3
    final_lr_frac: float = 0.1
    weight_decay: float = 2.5e-5
    batch_size: int = 64
    epochs: int = 30
    validation_split: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 1 <= self.n_elites <= self.n_members:
            raise ValueError("need 1 <= n_elites <= n_members")
        if not 0.0 < self.validation_split < 1.0:
            raise ValueError("validation_split must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown ensemble settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class GaussianPrediction:
    """Per-sample Gaussian in environment units."""

    mean_r: np.ndarray
    var_r: np.ndarray
    mean_delta: np.ndarray
    var_delta: np.ndarray


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_clamp(raw, xi_max, xi_min):
    """Smoothly squash ``raw`` into [xi_min, xi_max]; returns (xi, u).

    The outer softplus can overshoot xi_max by log(1 + exp(xi_min - xi_max)),
    so the result is capped at xi_max exactly.
    """
    u = xi_max - softplus(xi_max - raw)
    xi = np.minimum(xi_min + softplus(u - xi_min), xi_max)
    return xi, u


def _lecun_layer(rng, m, fan_in, fan_out):
    lim = math.sqrt(3.0 / fan_in)
    return rng.uniform(-lim, lim, size=(m, fan_in, fan_out)), np.zeros((m, 1, fan_out))


def init_params(config: EnsembleConfig, in_dim: int, out_dim: int, rng: np.random.Generator):
    """Return (trainable params, frozen prior params) for the whole ensemble."""
    sizes = [in_dim, *config.hidden, 2 * out_dim]
    params, prior = {}, {}
    M = config.n_members
    for l, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"W{l}"], params[f"b{l}"] = _lecun_layer(rng, M, fi, fo)
    prior_sizes = [in_dim, *config.hidden, out_dim]
    n_prior = len(prior_sizes) - 1
    for l, (fi, fo) in enumerate(zip(prior_sizes[:-1], prior_sizes[1:])):
        prior[f"W{l}"], prior[f"b{l}"] = _lecun_layer(rng, M, fi, fo)
        if l < n_prior - 1:
            # random hidden biases keep the prior function from passing through the origin
            lim = math.sqrt(3.0 / fi)
            prior[f"b{l}"] = rng.uniform(-lim, lim, size=(M, 1, fo))
    params["xi_max"] = np.full(out_dim, config.logvar_max_init)
    params["xi_min"] = np.full(out_dim, config.logvar_min_init)
    return params, prior


def _n_layers(params) -> int:
    return sum(1 for k in params if k.startswith("W"))


def _mlp(params, x, relu_cache=None):
    L = _n_layers(params)
    h = x
    for l in range(L):
        a = h @ params[f"W{l}"] + params[f"b{l}"]
        if l < L - 1:
            if relu_cache is not None:
                relu_cache.append((h, a > 0))
            h = np.maximum(a, 0.0)
        else:
            if relu_cache is not None:
                relu_cache.append((h, None))
            h = a
    return h


def _broadcast_x(x, M):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(x, (M,) + x.shape) if x.ndim == 2 else x


def forward(params, prior, prior_scale, x, cache=None):
    """Normalised means and clamped log-variances, each (M, B, D)."""
    M = params["W0"].shape[0]
    x = _broadcast_x(x, M)
    out = _mlp(params, x, cache)
    D = out.shape[-1] // 2
    mu = out[..., :D]
    if prior_scale != 0.0:
        mu = mu + prior_scale * _mlp(prior, x)
    raw = out[..., D:]
    xi, u = soft_clamp(raw, params["xi_max"], params["xi_min"])
    if cache is not None:
        cache.append((raw, u))
    return mu, xi


def nll_loss(params, prior, prior_scale, coeff, x, y):
    """Gaussian NLL summed over members plus the clamp-width penalty.

    Per member the loss is the batch mean of sum_d (xi + (y - mu)^2 exp(-xi)),
    so duplicating a batch leaves it unchanged. The penalty is
    coeff * sum_d (xi_max - xi_min). Returns (loss, grads) with grads keyed
    like ``params``.
    """
    cache = []
    mu, xi = forward(params, prior, prior_scale, x, cache)
    raw, u = cache.pop()
    y = _broadcast_x(y, mu.shape[0])
    B = mu.shape[1]
    resid = y - mu
    inv_var = np.exp(-xi)
    per = xi + resid ** 2 * inv_var
    loss = per.sum() / B
    width = params["xi_max"] - params["xi_min"]
    loss = float(loss + coeff * width.sum())
    if not np.isfinite(loss):
        bad = np.flatnonzero(~np.isfinite(per).all(axis=(0, 1)))
        raise FloatingPointError(f"non-finite NLL loss in target dimension(s) {bad.tolist()}")

    g_mu = -2.0 * resid * inv_var / B
    g_xi = (1.0 - resid ** 2 * inv_var) / B
    # where the cap is active xi equals xi_max and nothing flows back to raw
    capped = xi >= params["xi_max"]
    g_cap = np.where(capped, g_xi, 0.0)
    g_xi = np.where(capped, 0.0, g_xi)
    s_lo = sigmoid(u - params["xi_min"])
    s_hi = sigmoid(params["xi_max"] - raw)
    g_u = g_xi * s_lo
    grads = {
        "xi_min": (g_xi * (1.0 - s_lo)).sum(axis=(0, 1)) - coeff,
        "xi_max": (g_u * (1.0 - s_hi) + g_cap).sum(axis=(0, 1)) + coeff,
    }
    g_out = np.concatenate([g_mu, g_u * s_hi], axis=-1)
    L = _n_layers(params)
    for l in reversed(range(L)):
        h_in = cache[l][0]
        grads[f"W{l}"] = np.swapaxes(h_in, 1, 2) @ g_out
        grads[f"b{l}"] = g_out.sum(axis=1, keepdims=True)
        if l > 0:
            # back through layer l's weights, then through the ReLU that produced h_in
            g_out = (g_out @ np.swapaxes(params[f"W{l}"], 1, 2)) * cache[l - 1][1]
    return loss, grads


@dataclass
class EnsembleModel:
    config: EnsembleConfig
    params: dict
    prior: dict
    state_dim: int
    action_dim: int
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    reward_range: tuple
    elites: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    gamma: float = 0.99
    max_steps: int = 200

    @property
    def out_dim(self) -> int:
        return 1 + self.state_dim

    @property
    def trained(self) -> bool:
        return len(self.elites) > 0

    def inputs(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, float))
        a = np.asarray(a, float).reshape(len(s), -1)
        return (np.concatenate([s, a], axis=1) - self.in_mean) / self.in_std

    def normalized_targets(self, data: Dataset) -> np.ndarray:
        y = np.concatenate([data.r[:, None], data.delta()], axis=1)
        return (y - self.out_mean) / self.out_std

    def forward(self, s, a, members=None):
        """Normalised (mu, logvar) for the chosen members (default: all)."""
        p = self.params if members is None else _select(self.params, members)
        pr = self.prior if members is None else _select(self.prior, members)
        return forward(p, pr, self.config.prior_scale, self.inputs(s, a))

    def member_predictions(self, s, a):
        """Normalised elite means and variances, each (E, n, D)."""
        if not self.trained:
            raise UntrainedModelError("model has no elites; train it first")
        mu, xi = self.forward(s, a, self.elites)
        return mu, np.exp(xi)

    def predict(self, s, a, member: int) -> GaussianPrediction:
        mu, xi = self.forward(s, a, [member])
        mean = mu[0] * self.out_std + self.out_mean
        var = np.exp(xi[0]) * self.out_std ** 2
        return GaussianPrediction(mean[:, 0], var[:, 0], mean[:, 1:], var[:, 1:])

    def loss(self, x, y) -> tuple[float, dict]:
        return nll_loss(self.params, self.prior, self.config.prior_scale,
                        self.config.logvar_diff_coeff, x, y)


def _select(tree: dict, members) -> dict:
    idx = np.asarray(members, dtype=int)
    return {k: (v[idx] if v.ndim == 3 else v) for k, v in tree.items()}


def _safe_std(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    return np.where(sd > 1e-8, sd, 1.0)


def train_ensemble(data: Dataset, config: EnsembleConfig | None = None, seed: int = 0):
    """Fit an ensemble on a continuous dataset; returns (model, stats).

    Uses AdamW with cosine decay and elite selection by validation MSE.
    Raises ``ValidationTooSmallError`` when the validation split holds fewer
    points than one batch.
    """
    config = config or EnsembleConfig()
    if data.discrete:
        raise ValueError("ensemble models need a continuous dataset")
    train, val = validation_split(data, config, seed)
    if len(val) < config.batch_size or len(train) < 1:
        raise ValidationTooSmallError(
            f"PIL undefined: validation split of {len(val)} < batch size {config.batch_size}")
    rng = np.random.default_rng(seed)
    x_raw = np.concatenate([train.s, train.a.reshape(len(train), -1)], axis=1)
    y_raw = np.concatenate([train.r[:, None], train.delta()], axis=1)
    in_mean, in_std = x_raw.mean(0), _safe_std(x_raw)
    out_mean, out_std = y_raw.mean(0), _safe_std(y_raw)
    params, prior = init_params(config, x_raw.shape[1], y_raw.shape[1], rng)
    model = EnsembleModel(config, params, prior, data.state_dim, data.action_dim, in_mean, in_std,
                          out_mean, out_std, (float(data.r.min()), float(data.r.max())),
                          gamma=data.gamma, max_steps=data.max_steps)
    x = (x_raw - in_mean) / in_std
    y = (y_raw - out_mean) / out_std
    M, n, B = config.n_members, len(x), config.batch_size
    steps_per_epoch = max(1, n // B)
    total = steps_per_epoch * config.epochs
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    init_loss = model.loss(x, y)[0]
    step = 0
    history = []
    for _ in range(config.epochs):
        perms = np.stack([rng.permutation(n) for _ in range(M)])
        ep_loss = 0.0
        for k in range(steps_per_epoch):
            idx = perms[:, k * B:(k + 1) * B] if n >= B else perms
            loss, grads = model.loss(x[idx], y[idx])
            ep_loss += loss
            step += 1
            lr = config.lr * (config.final_lr_frac + (1 - config.final_lr_frac)
                              * 0.5 * (1 + math.cos(math.pi * (step - 1) / max(total, 1))))
            for key, g in grads.items():
                m1[key] = b1 * m1[key] + (1 - b1) * g
                m2[key] = b2 * m2[key] + (1 - b2) * g * g
                upd = (m1[key] / (1 - b1 ** step)) / (np.sqrt(m2[key] / (1 - b2 ** step)) + eps)
                if key.startswith("W"):
                    params[key] -= lr * config.weight_decay * params[key]
                params[key] -= lr * upd
        history.append(ep_loss / steps_per_epoch)
        if not np.isfinite(history[-1]):
            raise FloatingPointError("ensemble training diverged (loss is not finite)")
    final_loss = model.loss(x, y)[0]
    mu_val, _ = model.forward(val.s, val.a)
    y_val = model.normalized_targets(val)
    val_mse = ((mu_val - y_val) ** 2).mean(axis=(1, 2))
    model.elites = np.sort(np.argsort(val_mse, kind="stable")[:config.n_elites])
    mu_e = mu_val[model.elites].mean(0)
    stats = {
        "initial_loss": float(init_loss), "final_loss": float(final_loss),
        "epoch_loss": [float(h) for h in history],
        "val_mse_members": val_mse.tolist(), "elites": model.elites.tolist(),
        "val_mse_elite_mean": float(((mu_e - y_val) ** 2).mean()),
        "n_train": len(train), "n_val": len(val),
    }
    return model, stats


def validation_split(data: Dataset, config: EnsembleConfig, seed: int) -> tuple[Dataset, Dataset]:
    """The (train, validation) split ``train_ensemble`` uses for this seed."""
    return data.split(config.validation_split, seed)


def predict_and_sample(model: EnsembleModel, s, a, rng: np.random.Generator,
                       member: int | None = None):
    """Sample (r, s_next) from a uniformly chosen elite (or a fixed ``member``).

    Accepts a single (s, a) or a batch; rewards are clipped to the range
    seen in the training data.
    """
    if not model.trained:
        raise UntrainedModelError("model has no elites; train it first")
    s = np.asarray(s, float)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    n = len(s2)
    mu, xi = model.forward(s2, np.asarray(a, float).reshape(n, -1), model.elites)
    pick = rng.integers(len(model.elites), size=n) if member is None else \
        np.full(n, int(np.flatnonzero(model.elites == member)[0]))
    mu_k = mu[pick, np.arange(n)]
    sd_k = np.exp(0.5 * xi[pick, np.arange(n)])
    y = (mu_k + sd_k * rng.standard_normal(mu_k.shape)) * model.out_std + model.out_mean
    r = np.clip(y[:, 0], *model.reward_range)
    s_next = s2 + y[:, 1:]
    return (float(r[0]), s_next[0]) if single else (r, s_next)


@dataclass
class ModelEnv:
    """Environment view of one ensemble member (or of uniform elite sampling)."""

    model: EnsembleModel
    member: int | None = None
    env: object = None  # the real env supplies initial states, bounds and termination

    @property
    def gamma(self):
        return self.model.gamma

    @property
    def max_steps(self):
        return self.model.max_steps

    def reset_batch(self, rng, n):
        return self.env.reset_batch(rng, n)

    def step_batch(self, s, a, rng):
        if self.env is not None:
            a = np.clip(a, self.env.action_low, self.env.action_high)
        r, s_next = predict_and_sample(self.model, s, a, rng, self.member)
        if self.env is not None:
            s_next = np.clip(s_next, self.env.state_low, self.env.state_high)
            term = self.env.terminal
            done = term(s_next) if term is not None else np.zeros(len(s), bool)
        else:
            done = np.zeros(len(s), bool)
        return r, s_next, done


def save_checkpoint(model: EnsembleModel, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION, "config": asdict(model.config),
        "state_dim": model.state_dim, "action_dim": model.action_dim,
        "reward_range": list(model.reward_range), "gamma": model.gamma,
        "max_steps": model.max_steps, "param_keys": sorted(model.params),
        "prior_keys": sorted(model.prior),
    }
    arrays = {f"p_{k}": v for k, v in model.params.items()}
    arrays.update({f"q_{k}": v for k, v in model.prior.items()})
    arrays.update(in_mean=model.in_mean, in_std=model.in_std, out_mean=model.out_mean,
                  out_std=model.out_std, elites=model.elites)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> EnsembleModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k: z[f"p_{k}"].copy() for k in meta["param_keys"]}
        prior = {k: z[f"q_{k}"].copy() for k in meta["prior_keys"]}
        cfg = EnsembleConfig.from_dict(meta["config"])
        return EnsembleModel(cfg, params, prior, meta["state_dim"], meta["action_dim"],
                             z["in_mean"].copy(), z["in_std"].copy(), z["out_mean"].copy(),
                             z["out_std"].copy(), tuple(meta["reward_range"]), z["elites"].copy(),
                             meta["gamma"], meta["max_steps"])

"""Optimizers, losses and the training loop with best-snapshot early stopping."""

from __future__ import annotations

import dataclasses
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import num
from .adapters import build_adapter
from .errors import ConfigError, TrainingError

OPTIMIZERS = ("sgd", "adam", "adamw")
SCHEDULES = ("constant", "linear")
LOSSES = ("mse", "ce")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    schedule: str = "linear"
    iterations: int = 500
    batch_size: int = 1
    seed: int = 0
    loss: str = "mse"
    eval_every: int = 10
    grad_clip: float | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError("optimizer", f"expected one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError("schedule", f"expected one of {SCHEDULES}, got {self.schedule!r}")
        if self.loss not in LOSSES:
            raise ConfigError("loss", f"expected one of {LOSSES}, got {self.loss!r}")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate", "must be >= 0")
        if int(self.iterations) < 1:
            raise ConfigError("iterations", "must be >= 1")
        if int(self.batch_size) < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if int(self.eval_every) < 1:
            raise ConfigError("eval_every", "must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)


def lr_at(cfg, t):
    """Learning rate used at (0-based) iteration t."""
    if cfg.schedule == "constant":
        return cfg.learning_rate
    return cfg.learning_rate * (1.0 - t / cfg.iterations)


class SGD:
    def __init__(self, weight_decay=0.0):
        self.weight_decay = weight_decay

    def step(self, params, grads, lr):
        return OrderedDict((k, p - lr * (grads[k] + self.weight_decay * p)) for k, p in params.items())


class Adam:
    """Adam; with ``decoupled`` the weight decay is applied AdamW-style."""

    def __init__(self, weight_decay=0.0, decoupled=True, beta1=0.9, beta2=0.999, eps=1e-8):
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = OrderedDict()
        for k, p in params.items():
            g = grads[k]
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            new = p - lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and self.decoupled:
                new = new - lr * self.weight_decay * p
            out[k] = new
        return out


def make_optimizer(cfg):
    if cfg.optimizer == "sgd":
        return SGD(cfg.weight_decay)
    if cfg.optimizer == "adam":
        return Adam(cfg.weight_decay, decoupled=False)
    return Adam(cfg.weight_decay, decoupled=True)


# ---------------------------------------------------------------- data and losses


@dataclass(frozen=True)
class Dataset:
    """X (S, D, N) inputs; Y (S, D, N) regression targets or (S,) integer labels."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        Y = np.asarray(self.Y, dtype=np.float64)
        if Y.ndim == 2 and Y.shape == X.shape[1:]:
            Y = Y[None]
        if len(X) == 0:
            raise ValueError("empty dataset")
        if len(Y) != len(X):
            raise ValueError(f"inputs and targets disagree on sample count: {len(X)} vs {len(Y)}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    def __len__(self):
        return len(self.X)

    @property
    def is_classification(self):
        return self.Y.ndim == 1

    def subset(self, idx):
        return Dataset(self.X[idx], self.Y[idx])


def mse_loss(pred, target):
    diff = pred - num.constant(target)
    return (diff * diff).mean()


def cross_entropy_loss(logits, labels):
    labels = np.asarray(labels, dtype=np.intp)
    shift = num.constant(logits.value.max(axis=1, keepdims=True))
    z = logits - shift
    lse = num.log(num.exp(z).sum(axis=1))
    picked = z[np.arange(len(labels)), labels]
    return (lse - picked).mean()


def batch_loss(adapter, nodes, batch, loss, rng=None):
    Y, logits = adapter.graph(nodes, batch.X, rng)
    if loss == "mse":
        return mse_loss(Y, batch.Y)
    if logits is None:
        raise ValueError("cross-entropy loss needs a model with a classification head")
    return cross_entropy_loss(logits, batch.Y)


def evaluate(adapter, data, values=None, metric=None):
    """Mean MSE over all tokens (regression) or accuracy (classification)."""
    if data is None or len(data) == 0:
        raise ValueError("evaluate: empty data")
    metric = metric or ("accuracy" if data.is_classification else "mse")
    Y, logits = adapter.forward(data.X, values)
    if metric == "mse":
        if data.is_classification:
            raise ValueError("mse metric needs regression targets")
        return float(np.mean((Y - data.Y) ** 2))
    if metric == "accuracy":
        if logits is None:
            raise ValueError("accuracy metric needs a classification head")
        return float(np.mean(np.argmax(logits, axis=1) == data.Y.astype(np.intp)))
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------- loop


@dataclass
class RunResult:
    train_losses: list
    val_metrics: list  # (iteration, value)
    best_metric: float
    best_iteration: int
    trainable_count: int
    seconds: float
    seed: int
    metric: str
    best_params: OrderedDict = field(repr=False, default_factory=OrderedDict)
    final_params: OrderedDict = field(repr=False, default_factory=OrderedDict)
    adapter: object = field(repr=False, default=None)

    def summary(self):
        return {
            "best_metric": self.best_metric,
            "best_iteration": self.best_iteration,
            "trainable_count": self.trainable_count,
            "seed": self.seed,
            "metric": self.metric,
            "final_train_loss": self.train_losses[-1],
        }


def _clip(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def fit(adapter, train_data, val_data, cfg, names=None):
    """Optimize ``adapter``'s trainables; only names in ``names`` move (default all).

    Validation runs before the first step, every ``eval_every`` steps and after
    the last; the returned parameters are the best-validation snapshot.
    """
    start = time.perf_counter()
    val_data = train_data if val_data is None else val_data
    metric = "accuracy" if val_data.is_classification else "mse"
    better = (lambda a, b: a > b) if metric == "accuracy" else (lambda a, b: a < b)
    rng = num.RngStream(cfg.seed, (17,))
    params = OrderedDict((k, v.copy()) for k, v in adapter.init.items())
    names = list(params) if names is None else list(names)
    opt = make_optimizer(cfg)
    losses, vals = [], []

    def check(it):
        nonlocal best, best_it, best_params
        m = evaluate(adapter, val_data, params, metric)
        vals.append((it, m))
        if best is None or better(m, best):
            best, best_it = m, it
            best_params = OrderedDict((k, v.copy()) for k, v in params.items())

    best, best_it, best_params = None, 0, None
    check(0)
    S = len(train_data)
    bs = min(int(cfg.batch_size), S)
    order = np.arange(S)
    pos = S
    for t in range(int(cfg.iterations)):
        if pos + bs > S:
            order = rng.permutation(S) if S > 1 else np.arange(S)
            pos = 0
        batch = train_data.subset(order[pos : pos + bs])
        pos += bs
        nodes = OrderedDict()
        for k, v in params.items():
            nodes[k] = num.parameter(v, k) if k in names else num.constant(v)
        loss = batch_loss(adapter, nodes, batch, cfg.loss, rng.spawn(t))
        lv = float(loss.value)
        if not math.isfinite(lv):
            raise TrainingError(t + 1, f"non-finite training loss {lv} at iteration {t + 1}")
        losses.append(lv)
        grads = num.backward(loss, [nodes[k] for k in names])
        if cfg.grad_clip:
            grads = _clip(grads, cfg.grad_clip)
        moved = opt.step(OrderedDict((k, params[k]) for k in names), grads, lr_at(cfg, t))
        params.update(moved)
        if (t + 1) % int(cfg.eval_every) == 0 or t + 1 == int(cfg.iterations):
            check(t + 1)
    return RunResult(
        train_losses=losses,
        val_metrics=vals,
        best_metric=best,
        best_iteration=best_it,
        trainable_count=int(sum(adapter.init[k].size for k in names)),
        seconds=time.perf_counter() - start,
        seed=cfg.seed,
        metric=metric,
        best_params=best_params,
        final_params=params,
        adapter=adapter,
    )


def train(model, spec, data, cfg, mask=None):
    """Build the adapter for ``spec`` (SDLoRA: select a mask first if none given) and fit it."""
    train_data, val_data = data
    if spec.kind == "sdlora" and mask is None:
        from .sdlora import sdlora_select

        mask = sdlora_select(model, train_data, spec, seed=cfg.seed)
    adapter = build_adapter(model, spec, rng=num.RngStream(cfg.seed, (3,)), mask=mask)
    return fit(adapter, train_data, val_data, cfg)

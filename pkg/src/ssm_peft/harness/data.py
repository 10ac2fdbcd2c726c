"""Synthetic tasks: target matching and toy sequence classification."""

from __future__ import annotations

import numpy as np

from ..adapters import Full, build_adapter
from ..num import RngStream
from ..ssm import init_model, model_forward
from ..train import Dataset


def _inputs(rng, n, D, N, low, high):
    return rng.integers((n, D, N), low, high)


def _outputs(model, X):
    # same batched path evaluate() uses, so the generator scores exactly 0
    return build_adapter(model, Full()).forward(X)[0]


def gen_target_matching(
    seed,
    D=64,
    N=200,
    L=4,
    H=8,
    L_star=1,
    H_star=4,
    activation="linear",
    target_activation="linear",
    residual=True,
    target_residual=False,
    n=1,
    n_val=0,
    low=0,
    high=10,
    kind="s4",
    r=1,
):
    """Random target and frozen models plus integer-valued inputs and target outputs.

    Returns (train Dataset, validation Dataset or None, target, frozen).
    """
    rng = RngStream(seed)
    target = init_model(rng.spawn(1), L_star, D, H_star, activation=target_activation, residual=target_residual)
    frozen = init_model(rng.spawn(2), L, D, H, activation=activation, residual=residual, kind=kind, r=r)
    X = _inputs(rng.spawn(3), n, D, N, low, high)
    train = Dataset(X, _outputs(target, X))
    val = None
    if n_val:
        Xv = _inputs(rng.spawn(4), n_val, D, N, low, high)
        val = Dataset(Xv, _outputs(target, Xv))
    return train, val, target, frozen


def gen_toy_classification(seed, D=16, N=32, L=2, H=4, n=64, n_val=64, classes=2, activation="relu", kind="s4", r=1, low=-5, high=5):
    """Labels come from a fixed random linear functional of a reference S4 model's last-token features.

    The score is centered on its median over the generated set, so classes are balanced.
    Inputs are zero-centred integers by default; with 0..9 the shared offset dominates
    every channel and fine-tuning barely leaves chance level.
    """
    rng = RngStream(seed)
    reference = init_model(rng.spawn(1), 1, D, H, activation="linear", residual=False)
    frozen = init_model(rng.spawn(2), L, D, H, activation=activation, kind=kind, r=r, classes=classes)
    w = rng.spawn(5).normal((classes - 1 if classes > 2 else 1, D))
    X = _inputs(rng.spawn(3), n + n_val, D, N, low, high)
    feats = np.stack([model_forward(reference, x)[0][:, -1] for x in X])
    if classes == 2:
        score = feats @ w[0]
        labels = (score > np.median(score)).astype(np.float64)
    else:
        score = feats @ w.T
        edges = [np.quantile(score[:, 0], q) for q in np.linspace(0, 1, classes + 1)[1:-1]]
        labels = np.digitize(score[:, 0], edges).astype(np.float64)
    train = Dataset(X[:n], labels[:n])
    val = Dataset(X[n:], labels[n:]) if n_val else None
    return train, val, frozen

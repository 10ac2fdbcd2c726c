"""Dimension selection for SDLoRA: warmup, score, mask, revert."""

from __future__ import annotations

import numpy as np

from . import num
from .adapters import DimensionMask, Full, LayerMask, build_adapter, fraction_count
from .errors import AdapterError
from .ssm import s6_parameters


def _top(scores, k, among=None):
    """Indices of the k largest scores (stable: lower index wins ties)."""
    idx = range(len(scores)) if among is None else among
    return sorted(sorted(idx, key=lambda i: (-scores[i], i))[:k])


def select_dimensions(channel_score, state_score, channel_change, state_change, spec):
    """Pure selection step for one layer given importance scores and warmup changes."""
    channel_score = np.asarray(channel_score, dtype=np.float64)
    D, H = np.shape(state_score)
    kc = fraction_count(spec.keep_channel_fraction, D)
    ks = fraction_count(spec.keep_state_fraction, H)
    kept = _top(channel_score, kc)
    zeroed_states = {}
    kept_states = {}
    for d in kept:
        ks_d = _top(state_score[d], ks)
        kept_states[d] = ks_d
        zeroed_states[d] = [h for h in range(H) if h not in ks_d]
    tc = fraction_count(spec.update_channel_fraction, len(kept))
    trainable = _top(channel_change, tc, kept)
    trainable_states = {}
    for d in trainable:
        ts = fraction_count(spec.update_state_fraction, len(kept_states[d]))
        trainable_states[d] = _top(state_change[d], ts, kept_states[d])
    if not trainable or not any(trainable_states.values()):
        raise AdapterError("selection produced an empty trainable set")
    zeroed = [d for d in range(D) if d not in kept]
    return LayerMask(zeroed, zeroed_states, trainable, trainable_states)


def _norm(*arrays):
    return np.sqrt(sum(np.asarray(a) ** 2 for a in arrays))


def layer_scores(layer, before, X=None):
    """(channel score, state score, channel change, state change) for one layer.

    ``before`` is the same layer prior to warmup; X (S, D, N) calibrates S6 layers.
    """
    if layer.kind == "s4":
        abar = np.abs(np.exp(layer.a * np.exp(layer.log_dt)[:, None]))
        da, db, dc = layer.a - before.a, layer.b - before.b, layer.c - before.c
        dl = layer.log_dt - before.log_dt
        state_change = _norm(da, db, dc)
        channel_change = np.sqrt((state_change**2).sum(axis=1) + dl**2)
    else:
        if X is None:
            raise AdapterError("S6 scores need a calibration batch")
        abar = np.mean([np.abs(s6_parameters(layer, x)[0]).mean(axis=0) for x in X], axis=0)
        da = layer.a - before.a
        dwb = (layer.w_b - before.w_b).T  # (D, H)
        dwc = (layer.w_c - before.w_c).T
        state_change = _norm(da, dwb, dwc)
        dup = layer.w_dt_up - before.w_dt_up
        dbeta = layer.beta_dt - before.beta_dt
        channel_change = np.sqrt((state_change**2).sum(axis=1) + (dup**2).sum(axis=1) + dbeta**2)
    return abar.mean(axis=1), abar, channel_change, state_change


def sdlora_select(model, data, spec, seed=0):
    """Warm up the SSM parameters, pick dimensions per layer, and return only the mask.

    The model passed in is never modified; warmup works on copies.
    """
    from .train import Dataset, TrainConfig, fit

    if not isinstance(data, Dataset):
        data = Dataset(*data)
    adapter = build_adapter(model, Full(), rng=num.RngStream(seed, (5,)))
    names = [f"layers.{i}.{n}" for i, layer in enumerate(model.layers) for n in layer.ssm_names]
    cfg = TrainConfig(
        optimizer="adam",
        learning_rate=spec.warmup_lr,
        schedule="constant",
        iterations=int(spec.warmup_batches),
        seed=seed,
        loss="ce" if data.is_classification else "mse",
        eval_every=int(spec.warmup_batches),
    )
    res = fit(adapter, data, data, cfg, names=names)
    warmed = model.replace({k: res.final_params[k] for k in names})
    layers = []
    for layer, before in zip(warmed.layers, model.layers):
        scores = layer_scores(layer, before, data.X)
        layers.append(select_dimensions(*scores, spec))
    return DimensionMask(tuple(layers))

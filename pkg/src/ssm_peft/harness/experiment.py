"""Sweep runner: seeds x adapters x learning-rate grid, with deterministic outputs."""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor

from .. import num
from ..adapters import build_adapter
from ..errors import TrainingError
from ..sdlora import sdlora_select
from ..theory import run_oracles
from ..train import evaluate, fit
from .config import ExperimentConfig
from .data import gen_target_matching, gen_toy_classification
from .io import checkpoint_save, emit_metrics, plot_svg


def make_task(cfg: ExperimentConfig, seed):
    """(train, val or None, frozen model) for one seed."""
    d, m, t = cfg.data, cfg.model, cfg.target
    bounds = {k: v for k, v in (("low", d.low), ("high", d.high)) if v is not None}
    if cfg.task == "target-matching":
        train, val, _, frozen = gen_target_matching(
            seed,
            D=d.D,
            N=d.N,
            L=m.L,
            H=m.H,
            L_star=t.L,
            H_star=t.H,
            activation=m.activation,
            target_activation=t.activation,
            residual=m.residual,
            target_residual=t.residual,
            n=d.n_train,
            n_val=d.n_val,
            kind=m.kind,
            r=m.r,
            **bounds,
        )
    else:
        train, val, frozen = gen_toy_classification(
            seed, D=d.D, N=d.N, L=m.L, H=m.H, n=d.n_train, n_val=d.n_val, classes=d.classes,
            activation=m.activation, kind=m.kind, r=m.r, **bounds,
        )
    return train, val, frozen


def _run_one(cfg, seed, entry):
    """Train one adapter on one seed over the lr grid; returns a result dict."""
    start = time.perf_counter()
    train, val, frozen = make_task(cfg, seed)
    loss = "ce" if train.is_classification else "mse"
    tcfg = dataclasses.replace(cfg.train, seed=seed, loss=loss)
    mask = None
    if entry.spec.kind == "sdlora":
        mask = sdlora_select(frozen, train, entry.spec, seed=seed)
    adapter = build_adapter(frozen, entry.spec, rng=num.RngStream(seed, (3,)), mask=mask)
    grid = cfg.lr_grid or (tcfg.learning_rate,)
    per_lr, best = [], None
    for lr in grid:
        try:
            res = fit(adapter, train, val, dataclasses.replace(tcfg, learning_rate=lr))
        except TrainingError as exc:
            per_lr.append({"lr": lr, "error": str(exc)})
            continue
        per_lr.append({"lr": lr, "best_metric": res.best_metric, "best_iteration": res.best_iteration})
        if best is None or (res.best_metric > best[1].best_metric if res.metric == "accuracy" else res.best_metric < best[1].best_metric):
            best = (lr, res)
    out = {
        "run_id": entry.name,
        "seed": seed,
        "adapter": entry.spec.kind,
        "count": adapter.count,
        "total": frozen.num_parameters(),
        "per_lr": per_lr,
        "mask": None if mask is None else mask.to_dict(),
        "best_lr": None if best is None else best[0],
        "best_metric": float("nan") if best is None else best[1].best_metric,
        "params": None if best is None else best[1].best_params,
        "seconds": time.perf_counter() - start,
    }
    return out


def _frozen_metric(cfg, seed):
    train, val, frozen = make_task(cfg, seed)
    from ..adapters import Full

    return evaluate(build_adapter(frozen, Full()), val if val is not None else train)


def run_experiment(cfg: ExperimentConfig, output_dir=None, log=None):
    """Execute the sweep and write metrics.csv, summary.json, timing.json and checkpoints.

    Returns the list of metric rows. Everything except timing.json is a pure
    function of the config (``seconds`` is written as 0 unless timing is on).
    """
    out = output_dir or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    log = log or (lambda msg: None)
    if cfg.task == "oracle-suite":
        reports = run_oracles(seed=cfg.seeds[0], trials=cfg.oracle_trials)
        with open(os.path.join(out, "oracles.txt"), "w", encoding="utf-8") as fh:
            fh.write("".join(r.line() + "\n" for r in reports))
        rows = [
            {"run_id": r.name, "seed": cfg.seeds[0], "adapter": "oracle", "trainable_pct": 0.0, "best_metric": r.discrepancy, "seconds": 0.0, "passed": r.passed}
            for r in reports
        ]
        emit_metrics(rows, os.path.join(out, "metrics.csv"))
        return rows
    tasks = [(seed, entry) for seed in cfg.seeds for entry in cfg.adapters]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_run_one, cfg, s, e) for s, e in tasks]
            results = [f.result() for f in futures]
    else:
        results = []
        for s, e in tasks:
            results.append(_run_one(cfg, s, e))
            r = results[-1]
            log(f"seed {s} {e.name}: best {r['best_metric']:.4g} at lr {r['best_lr']} ({r['seconds']:.1f}s)")
    rows, summary, timing = [], {"config": cfg.to_dict(), "frozen_metric": {}, "runs": []}, []
    for seed in cfg.seeds:
        summary["frozen_metric"][str(seed)] = _frozen_metric(cfg, seed)
    if cfg.checkpoints:
        os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    for r in results:
        pct = 100.0 * r["count"] / r["total"]
        rows.append(
            {
                "run_id": r["run_id"],
                "seed": r["seed"],
                "adapter": r["adapter"],
                "trainable_pct": pct,
                "best_metric": r["best_metric"],
                "seconds": r["seconds"] if cfg.timing == "on" else 0.0,
            }
        )
        summary["runs"].append({k: r[k] for k in ("run_id", "seed", "adapter", "count", "total", "best_lr", "best_metric", "per_lr", "mask")})
        timing.append({"run_id": r["run_id"], "seed": r["seed"], "seconds": r["seconds"]})
        if cfg.checkpoints and r["params"] is not None:
            checkpoint_save(r["params"], os.path.join(out, "checkpoints", f"{r['run_id']}_seed{r['seed']}.ckpt"))
    emit_metrics(rows, os.path.join(out, "metrics.csv"))
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "timing.json"), "w", encoding="utf-8") as fh:
        json.dump(timing, fh, indent=2)
        fh.write("\n")
    return rows


def run_bench(cfg, output_dir=None, log=None):
    """run_experiment plus an SVG of best metric vs trainable percentage."""
    out = output_dir or cfg.output_dir
    rows = run_experiment(cfg, out, log)
    finite = [r for r in rows if r["best_metric"] == r["best_metric"]]
    if finite and cfg.task != "oracle-suite":
        y = "best accuracy" if cfg.task == "toy-classification" else "best MSE"
        plot_svg(finite, os.path.join(out, "plot.svg"), log_y=cfg.log_y and cfg.task == "target-matching", y_label=y)
    return rows

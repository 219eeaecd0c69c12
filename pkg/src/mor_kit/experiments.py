"""Experiment drivers behind the CLI: train, router-count sweep, latency bench, fault injection."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from .config import ExperimentConfig
from .layer import MoeModel
from .numeric import make_rng
from .objective import task_loss
from .telemetry import BalanceReport, LatencyReport, balance_report, bench_models
from .trainer import (Dataset, FaultSpec, SyntheticTask, TrainResult, evaluate, generate_task,
                      inject_router_fault, selection_agreement, train)


def seeded_rngs(seed: int):
    """(task, data, model, eval) generators derived from one seed."""
    return make_rng(seed).spawn(4)


def build_task(cfg: ExperimentConfig, seed: int | None = None) -> tuple[SyntheticTask, Dataset]:
    seed = cfg.train.seed if seed is None else seed
    task_rng, data_rng, _, _ = seeded_rngs(seed)
    dims = cfg.model.dims
    task = SyntheticTask.create(cfg.task, dims[0], dims[-1], task_rng)
    return task, generate_task(task, data_rng, cfg.task.n_samples)


def build_model(cfg: ExperimentConfig, task: SyntheticTask | None = None, seed: int | None = None,
                n_routers: int | None = None) -> MoeModel:
    """Model from config.  ``n_routers`` overrides the router count; 1 means a single router."""
    seed = cfg.train.seed if seed is None else seed
    _, _, model_rng, _ = seeded_rngs(seed)
    m = cfg.model
    r = m.n_routers if n_routers is None else n_routers
    mode = "single" if r == 1 else "mor"
    if n_routers is None:
        mode = m.mode
    k_routers = m.k_routers if (m.k_routers is not None and m.k_routers <= r) else None
    w0s = None
    if m.base_from_task and task is not None and len(m.dims) == 2:
        w0s = [task.base]
    return MoeModel.create(m.dims, model_rng, w0s=w0s, n_experts=m.n_experts, k_experts=m.k_experts,
                           mode=mode, n_routers=r, k_routers=k_routers, rank=m.rank, alpha=m.alpha,
                           temperature=m.temperature)


@dataclass
class TrainRun:
    model: MoeModel
    result: TrainResult
    report: BalanceReport
    summary: dict


def run_train(cfg: ExperimentConfig, n_routers: int | None = None, seed: int | None = None) -> TrainRun:
    task, data = build_task(cfg, seed)
    model = build_model(cfg, task, seed, n_routers)
    tcfg = copy.copy(cfg.train)
    if seed is not None:
        tcfg.seed = seed
    t0 = time.perf_counter()
    result = train(model, data, tcfg)
    train_seconds = time.perf_counter() - t0
    loss, stats = evaluate(model, data, tcfg.lambda_expert, tcfg.lambda_router)
    report = balance_report(stats)
    summary = {
        "n_routers": model.layers[0].router.n_routers,
        "mode": model.mode,
        "initial_task": result.epoch_log[0]["task"],
        "final_task": loss.task,
        "final_total": loss.total,
        "balance_expert": loss.balance_expert,
        "balance_router": loss.balance_router,
        "cov": float(np.mean([l.coefficient_of_variation for l in report.layers])),
        "max_min_ratio": float(np.mean([l.max_min_ratio for l in report.layers])),
        "train_seconds": train_seconds,
    }
    return TrainRun(model, result, report, summary)


def run_bench(cfg: ExperimentConfig, routers: list[int] | None = None) -> LatencyReport:
    routers = cfg.sweep.routers if routers is None else routers
    task, _ = build_task(cfg)
    models = {r: build_model(cfg, task, n_routers=r) for r in routers}
    b = cfg.bench
    return bench_models(models, b.n_tokens, b.warmup, b.repeats, seed=cfg.train.seed)


def run_sweep(cfg: ExperimentConfig, routers: list[int] | None = None) -> list[dict]:
    """One row per router count: training outcome, balance metrics and timing."""
    routers = cfg.sweep.routers if routers is None else routers
    rows = [run_train(cfg, n_routers=r).summary for r in routers]
    latency = run_bench(cfg, routers)
    for row in rows:
        e = latency.entry(row["n_routers"])
        row["forward_us_per_token"] = e.forward_us_per_token
        row["forward_overhead"] = e.overhead
        row["train_step_ms"] = e.train_step_ms
        row["train_step_overhead"] = e.train_overhead
    return rows


@dataclass
class FaultSummary:
    sigma: float
    single_agreement: float
    mor_agreement: float
    diff_mean: float
    diff_ci_low: float
    diff_ci_high: float
    single_mse_delta: float
    mor_mse_delta: float
    n_seeds: int


def fault_trial(cfg: ExperimentConfig, seed: int, sigmas, mode: str = "logit_noise",
                target_router: int = 0, n_inputs: int = 10000, train_first: bool = False,
                n_routers: int | None = None) -> list[dict]:
    """Clean vs faulted selections for a single-router and a committee model built
    from the same seed, with the same noise matrix injected into one router of each."""
    task, data = build_task(cfg, seed)
    r = max(cfg.model.n_routers if n_routers is None else n_routers, 2)
    models = {"single": build_model(cfg, task, seed, n_routers=1), "mor": build_model(cfg, task, seed, n_routers=r)}
    if train_first:
        tcfg = copy.copy(cfg.train)
        tcfg.seed = seed
        for m in models.values():
            train(m, data, tcfg)
    _, _, _, eval_rng = seeded_rngs(seed)
    probe = generate_task(task, eval_rng, n_inputs)
    rows = []
    for sigma in sigmas:
        for arch, model in models.items():
            # same child seed for both architectures -> identical noise draws
            fault_rng = make_rng(seed).spawn(2)[1]
            target = 0 if arch == "single" else target_router
            faulty = inject_router_fault(model, FaultSpec(target, sigma, mode), fault_rng)
            exact, overlap = selection_agreement(model, faulty, probe.x)
            mse_clean, _ = task_loss(model.predict(probe.x), probe.target)
            mse_faulty, _ = task_loss(faulty.predict(probe.x), probe.target)
            rows.append({"seed": seed, "sigma": sigma, "arch": arch, "agreement": exact,
                         "overlap": overlap, "mse_clean": mse_clean, "mse_faulty": mse_faulty,
                         "mse_delta": mse_faulty - mse_clean})
    return rows


def summarize_faults(rows: list[dict], confidence: float = 0.95) -> list[FaultSummary]:
    """Paired (by seed) comparison of committee vs single-router agreement, t-interval."""
    out = []
    for sigma in sorted({r["sigma"] for r in rows}):
        by = {(r["seed"], r["arch"]): r for r in rows if r["sigma"] == sigma}
        seeds = sorted({s for s, _ in by})
        single = np.array([by[s, "single"]["agreement"] for s in seeds])
        mor = np.array([by[s, "mor"]["agreement"] for s in seeds])
        diff = mor - single
        n = len(seeds)
        if n > 1:
            half = sstats.t.ppf(0.5 + confidence / 2, n - 1) * diff.std(ddof=1) / np.sqrt(n)
        else:
            half = float("nan")
        out.append(FaultSummary(
            sigma, float(single.mean()), float(mor.mean()), float(diff.mean()),
            float(diff.mean() - half), float(diff.mean() + half),
            float(np.mean([by[s, "single"]["mse_delta"] for s in seeds])),
            float(np.mean([by[s, "mor"]["mse_delta"] for s in seeds])), n,
        ))
    return out


def run_fault(cfg: ExperimentConfig, sigmas=None, n_seeds: int | None = None) -> tuple[list[dict], list[FaultSummary]]:
    f = cfg.fault
    sigmas = f.sigmas if sigmas is None else sigmas
    n_seeds = f.n_seeds if n_seeds is None else n_seeds
    rows = []
    for i in range(n_seeds):
        rows += fault_trial(cfg, cfg.train.seed + i, sigmas, f.mode, f.target_router, f.n_inputs, f.train_first)
    return rows, summarize_faults(rows)

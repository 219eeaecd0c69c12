"""Expert-allocation balance reports and forward/train-step latency benchmarks."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .layer import MoeModel
from .numeric import make_rng
from .objective import ActivationStats, gate_balance


@dataclass
class LayerBalance:
    counts: list[int]
    coefficient_of_variation: float
    max_min_ratio: float
    balance_loss: float


@dataclass
class BalanceReport:
    """Per-layer activation histograms.  ``max_min_ratio`` clamps the minimum count to 1."""

    layers: list[LayerBalance]
    token_count: int
    k: int

    def to_json(self) -> str:
        return json.dumps({"min_count_clamp": 1, **asdict(self)}, indent=2, sort_keys=True)

    def histogram_csv(self, condition: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "expert_id", "count", "condition"])
        for i, layer in enumerate(self.layers):
            for j, c in enumerate(layer.counts):
                w.writerow([i, j, c, condition])
        return buf.getvalue()


def coefficient_of_variation(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    mean = counts.mean()
    return float(np.sqrt(np.mean((counts - mean) ** 2)) / mean)


def max_min_ratio(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    return float(counts.max() / max(counts.min(), 1.0))


def balance_report(stats: ActivationStats) -> BalanceReport:
    if not stats.experts or any(s.token_count <= 0 for s in stats.experts):
        raise ValueError("balance report needs stats with recorded tokens")
    layers = [
        LayerBalance(
            counts=[int(c) for c in s.assign_counts],
            coefficient_of_variation=coefficient_of_variation(s.assign_counts),
            max_min_ratio=max_min_ratio(s.assign_counts),
            balance_loss=gate_balance(s),
        )
        for s in stats.experts
    ]
    first = stats.experts[0]
    return BalanceReport(layers, first.token_count, first.k)


@dataclass
class LatencyEntry:
    n_routers: int
    mode: str
    forward_us_per_token: float  # median over repeats
    forward_us_mean: float
    forward_us_std: float
    train_step_ms: float
    overhead: float = 0.0
    train_overhead: float = 0.0


@dataclass
class LatencyReport:
    entries: list[LatencyEntry] = field(default_factory=list)
    n_tokens: int = 0
    repeats: int = 0

    def entry(self, n_routers: int) -> LatencyEntry:
        for e in self.entries:
            if e.n_routers == n_routers:
                return e
        raise KeyError(n_routers)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(LatencyEntry.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for e in self.entries:
            w.writerow(asdict(e))
        return buf.getvalue()


def _time_forward(model: MoeModel, x: np.ndarray) -> float:
    t0 = time.perf_counter()
    model.forward(x)
    return time.perf_counter() - t0


def _time_train_step(model: MoeModel, x: np.ndarray, target: np.ndarray) -> float:
    from .trainer import loss_and_grads

    t0 = time.perf_counter()
    loss_and_grads(model, x, target)
    return time.perf_counter() - t0


def bench_forward(model: MoeModel, n_tokens: int = 2048, warmup: int = 3, repeats: int = 30,
                  seed: int = 0, baseline: LatencyEntry | None = None) -> LatencyEntry:
    """Single-model forward timing on fixed random inputs, warmup runs excluded."""
    if warmup < 1:
        raise ValueError("warmup must be at least 1")
    report = bench_models({_n_routers(model): model}, n_tokens, warmup, repeats, seed)
    entry = report.entries[0]
    if baseline is not None:
        entry.overhead = (entry.forward_us_per_token - baseline.forward_us_per_token) / baseline.forward_us_per_token
        entry.train_overhead = (entry.train_step_ms - baseline.train_step_ms) / baseline.train_step_ms
    return entry


def _n_routers(model: MoeModel) -> int:
    return model.layers[0].router.n_routers


def bench_models(models: dict[int, MoeModel], n_tokens: int = 2048, warmup: int = 3, repeats: int = 30,
                 seed: int = 0, train_batch: int = 64) -> LatencyReport:
    """Time several models on the same inputs, interleaving them round-robin so
    drift in machine load hits every configuration alike.

    Overheads are relative to the entry with the fewest routers, taken as the
    median of per-round ratios: both timings in a ratio come from the same round,
    so slow phases of the machine cancel.
    """
    if warmup < 1:
        raise ValueError("warmup must be at least 1")
    d_in = next(iter(models.values())).layers[0].d_in
    d_out = next(iter(models.values())).layers[-1].d_out
    rng = make_rng(seed)
    x = rng.standard_normal((n_tokens, d_in))
    xt = x[:train_batch]
    target = rng.standard_normal((xt.shape[0], d_out))
    keys = sorted(models)
    fwd = {r: [] for r in keys}
    step = {r: [] for r in keys}
    for rep in range(warmup + repeats):
        order = keys if rep % 2 == 0 else keys[::-1]
        for r in order:
            f = _time_forward(models[r], x)
            s = _time_train_step(models[r], xt, target)
            if rep >= warmup:
                fwd[r].append(f)
                step[r].append(s)
    entries = []
    for r in keys:
        per_token = np.asarray(fwd[r]) / n_tokens * 1e6
        entries.append(LatencyEntry(r, models[r].mode, float(np.median(per_token)), float(per_token.mean()),
                                    float(per_token.std()), float(np.median(step[r]) * 1e3)))
    base = keys[0]
    for r, e in zip(keys, entries):
        e.overhead = float(np.median(np.divide(fwd[r], fwd[base]))) - 1.0
        e.train_overhead = float(np.median(np.divide(step[r], step[base]))) - 1.0
    return LatencyReport(entries, n_tokens, repeats)

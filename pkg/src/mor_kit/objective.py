"""Task loss, load-balancing losses and their combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import DTYPE


@dataclass
class GateStats:
    """Assignment counts and summed gate probabilities for one gate (one layer).

    A token counts toward gate j when j is among its ``k`` selected gates, so
    the assignment fractions ``t`` sum to one.
    """

    n_gates: int
    k: int
    token_count: int = 0
    assign_counts: np.ndarray = field(default=None)
    prob_sums: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.assign_counts is None:
            self.assign_counts = np.zeros(self.n_gates, dtype=np.int64)
        if self.prob_sums is None:
            self.prob_sums = np.zeros(self.n_gates, dtype=DTYPE)

    def update(self, selected: np.ndarray, probs: np.ndarray) -> None:
        selected = np.atleast_2d(selected)
        probs = np.atleast_2d(probs)
        self.token_count += probs.shape[0]
        self.assign_counts += np.bincount(selected.ravel(), minlength=self.n_gates)
        self.prob_sums += probs.sum(axis=0)

    @property
    def fractions(self) -> np.ndarray:
        return self.assign_counts / (self.token_count * self.k)

    @property
    def mean_probs(self) -> np.ndarray:
        return self.prob_sums / self.token_count

    def merge(self, other: "GateStats") -> "GateStats":
        if (self.n_gates, self.k) != (other.n_gates, other.k):
            raise ValueError("cannot merge stats of different gate shapes")
        return GateStats(self.n_gates, self.k, self.token_count + other.token_count,
                         self.assign_counts + other.assign_counts, self.prob_sums + other.prob_sums)


@dataclass
class ActivationStats:
    """Per-layer expert statistics, and sub-router statistics for committee layers.

    ``routers[i]`` is ``None`` for a single-router layer.  Sub-router
    assignment is the dominant sub-router per token (k = 1).
    """

    experts: list[GateStats]
    routers: list[GateStats | None]

    @classmethod
    def empty(cls, layer_shapes: list[tuple[int, int, int | None]]) -> "ActivationStats":
        """``layer_shapes`` holds (n_experts, k_experts, n_routers or None) per layer."""
        return cls(
            [GateStats(n, k) for n, k, _ in layer_shapes],
            [None if r is None else GateStats(r, 1) for _, _, r in layer_shapes],
        )

    def record(self, layer: int, decision) -> None:
        self.experts[layer].update(decision.selected, decision.full_dist)
        if self.routers[layer] is not None:
            rho = np.atleast_2d(decision.router_weights)
            dominant = np.argmax(rho, axis=-1)[:, None]
            self.routers[layer].update(dominant, rho)

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        return ActivationStats(
            [a.merge(b) for a, b in zip(self.experts, other.experts)],
            [None if a is None else a.merge(b) for a, b in zip(self.routers, other.routers)],
        )

    @property
    def n_layers(self) -> int:
        return len(self.experts)


@dataclass
class LossBreakdown:
    task: float
    balance_expert: float
    balance_router: float
    lambda_expert: float
    lambda_router: float
    total: float = 0.0

    def __post_init__(self):
        self.total = self.task + self.lambda_expert * self.balance_expert + self.lambda_router * self.balance_router


def gate_balance(stats: GateStats) -> float:
    """N * sum_j t_j * mean_prob_j for a single layer."""
    if stats.token_count <= 0:
        raise ValueError("balance loss needs at least one recorded token")
    return float(stats.n_gates * np.dot(stats.fractions, stats.mean_probs))


def gate_balance_grad(stats: GateStats) -> np.ndarray:
    """Gradient w.r.t. each token's gate probabilities (t held constant)."""
    return stats.n_gates * stats.fractions / stats.token_count


def balance_loss(stats: ActivationStats) -> float:
    if not stats.experts:
        raise ValueError("balance loss of empty stats")
    return sum(gate_balance(s) for s in stats.experts)


def router_balance_loss(stats: ActivationStats) -> float:
    """Same form as ``balance_loss`` over sub-routers; zero when no layer has a committee."""
    return sum(gate_balance(s) for s in stats.routers if s is not None)


def task_loss(pred, target) -> tuple[float, np.ndarray]:
    """Half squared error divided by the output length, averaged over rows."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    rows = diff.shape[0] if diff.ndim == 2 else 1
    length = diff.shape[-1]
    loss = 0.5 * float(np.sum(diff * diff)) / length / rows
    return loss, diff / length / rows


def total_loss(task: float, stats: ActivationStats | None, lambda_expert: float = 0.01,
               lambda_router: float = 0.01) -> LossBreakdown:
    if lambda_expert < 0 or lambda_router < 0:
        raise ValueError("balance coefficients must be nonnegative")
    be = balance_loss(stats) if stats is not None else 0.0
    br = router_balance_loss(stats) if stats is not None else 0.0
    return LossBreakdown(task, be, br, lambda_expert, lambda_router)

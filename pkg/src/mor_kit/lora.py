"""Bank of LoRA experts: each expert i maps x to scaling * B_i @ (A_i @ x)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import DTYPE, init_kaiming

BANK_SCHEMA = "mor-kit/lora-bank/v1"


@dataclass
class LoraExpert:
    """One expert; ``a`` and ``b`` are views into the owning bank's stacked arrays."""

    a: np.ndarray  # (rank, d_in)
    b: np.ndarray  # (d_out, rank)
    scaling: float

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.scaling * ((x @ self.a.T) @ self.b.T)


class LoraExpertBank:
    """N experts sharing (d_in, d_out, rank), stored as stacked arrays.

    ``a`` has shape (N, rank, d_in) and ``b`` has shape (N, d_out, rank).
    """

    def __init__(self, a: np.ndarray, b: np.ndarray, scaling: float):
        a = np.ascontiguousarray(a, dtype=DTYPE)
        b = np.ascontiguousarray(b, dtype=DTYPE)
        if a.ndim != 3 or b.ndim != 3:
            raise ValueError(f"expected stacked 3-D arrays, got a{a.shape} b{b.shape}")
        if a.shape[0] != b.shape[0] or a.shape[0] < 1:
            raise ValueError(f"expert counts disagree or are zero: a{a.shape} b{b.shape}")
        if a.shape[1] != b.shape[2]:
            raise ValueError(f"rank mismatch: a{a.shape} b{b.shape}")
        rank, d_in, d_out = a.shape[1], a.shape[2], b.shape[1]
        if not 1 <= rank <= min(d_in, d_out):
            raise ValueError(f"rank {rank} must be in [1, min(d_in={d_in}, d_out={d_out})]")
        if not scaling > 0:
            raise ValueError(f"scaling must be positive, got {scaling}")
        self.a = a
        self.b = b
        self.scaling = float(scaling)

    @classmethod
    def create(cls, n_experts: int, d_in: int, d_out: int, rank: int = 8, alpha: float = 16.0,
               rng: np.random.Generator | None = None) -> "LoraExpertBank":
        """Kaiming-initialised A, zero B: the fresh bank contributes nothing."""
        if rng is None:
            raise ValueError("an rng is required to initialise A")
        a = np.stack([init_kaiming(rank, d_in, rng) for _ in range(n_experts)])
        b = np.zeros((n_experts, d_out, rank), dtype=DTYPE)
        return cls(a, b, alpha / rank)

    @property
    def n_experts(self) -> int:
        return self.a.shape[0]

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def d_in(self) -> int:
        return self.a.shape[2]

    @property
    def d_out(self) -> int:
        return self.b.shape[1]

    @property
    def experts(self) -> list[LoraExpert]:
        return [self[i] for i in range(self.n_experts)]

    def __len__(self) -> int:
        return self.n_experts

    def __getitem__(self, i: int) -> LoraExpert:
        self._check_index(i)
        return LoraExpert(self.a[i], self.b[i], self.scaling)

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.n_experts:
            raise IndexError(f"expert index {i} out of range for {self.n_experts} experts")

    def copy(self) -> "LoraExpertBank":
        return LoraExpertBank(self.a.copy(), self.b.copy(), self.scaling)

    def to_dict(self) -> dict:
        return {
            "schema": BANK_SCHEMA,
            "d_in": self.d_in,
            "d_out": self.d_out,
            "rank": self.rank,
            "n_experts": self.n_experts,
            "scaling": self.scaling,
            "a": self.a.reshape(self.n_experts, -1).tolist(),
            "b": self.b.reshape(self.n_experts, -1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoraExpertBank":
        if d.get("schema") != BANK_SCHEMA:
            raise ValueError(f"unsupported bank schema {d.get('schema')!r}")
        n, r, d_in, d_out = d["n_experts"], d["rank"], d["d_in"], d["d_out"]
        a = np.asarray(d["a"], dtype=DTYPE).reshape(n, r, d_in)
        b = np.asarray(d["b"], dtype=DTYPE).reshape(n, d_out, r)
        return cls(a, b, d["scaling"])


def expert_forward(bank: LoraExpertBank, i: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    bank._check_index(i)
    if x.shape[-1] != bank.d_in:
        raise ValueError(f"input length {x.shape[-1]} != d_in {bank.d_in}")
    return bank[i](x)


def weighted_expert_delta(bank: LoraExpertBank, decision, x) -> np.ndarray:
    """Weighted sum of the selected experts' outputs; unselected experts are never evaluated."""
    x = np.asarray(x, dtype=DTYPE)
    selected = np.asarray(decision.selected)
    weights = np.asarray(decision.weights, dtype=DTYPE)
    if x.shape[-1] != bank.d_in:
        raise ValueError(f"input length {x.shape[-1]} != d_in {bank.d_in}")
    if selected.shape != weights.shape or selected.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"decision shapes {selected.shape}/{weights.shape} do not match input {x.shape}")
    if selected.size and (selected.min() < 0 or selected.max() >= bank.n_experts):
        raise ValueError("decision references an expert outside the bank")
    if not np.allclose(weights.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("decision weights do not sum to 1")
    delta, _ = sparse_delta(bank, np.atleast_2d(x), np.atleast_2d(selected), np.atleast_2d(weights))
    return delta if x.ndim == 2 else delta[0]


def expert_param_grads(bank: LoraExpertBank, i: int, x, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dA_i, dB_i) of <upstream, expert_i(x)>, summed over batch rows."""
    bank._check_index(i)
    x = np.atleast_2d(np.asarray(x, dtype=DTYPE))
    g = np.atleast_2d(np.asarray(upstream, dtype=DTYPE))
    if x.shape[-1] != bank.d_in or g.shape[-1] != bank.d_out or x.shape[0] != g.shape[0]:
        raise ValueError(f"shape mismatch: x{x.shape} upstream{g.shape} for bank ({bank.d_in}->{bank.d_out})")
    s = bank.scaling
    h = x @ bank.a[i].T
    grad_b = s * g.T @ h
    grad_a = s * (g @ bank.b[i]).T @ x
    return grad_a, grad_b


@dataclass
class DeltaCache:
    rows: list[np.ndarray]  # token rows routed to each expert
    slots: list[np.ndarray]  # position of that expert in each row's top-k list
    hidden: list[np.ndarray]  # A_e x for those rows


def sparse_delta(bank: LoraExpertBank, x: np.ndarray, selected: np.ndarray,
                 weights: np.ndarray) -> tuple[np.ndarray, DeltaCache]:
    """Batched weighted expert sum; each expert only sees the rows that selected it."""
    out = np.zeros((x.shape[0], bank.d_out), dtype=DTYPE)
    cache = DeltaCache([], [], [])
    for e in range(bank.n_experts):
        rows, slots = np.nonzero(selected == e)
        h = x[rows] @ bank.a[e].T
        if rows.size:
            # gate weight and scaling applied in rank space, the narrow side
            out[rows] += (h * (bank.scaling * weights[rows, slots])[:, None]) @ bank.b[e].T
        cache.rows.append(rows)
        cache.slots.append(slots)
        cache.hidden.append(h)
    return out, cache


def sparse_delta_backward(bank: LoraExpertBank, x: np.ndarray, weights: np.ndarray, cache: DeltaCache,
                          grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_a, grad_b, grad_weights, grad_x); unselected experts get exact zeros."""
    s = bank.scaling
    grad_a = np.zeros_like(bank.a)
    grad_b = np.zeros_like(bank.b)
    grad_w = np.zeros_like(weights)
    grad_x = np.zeros_like(x)
    for e in range(bank.n_experts):
        rows, slots = cache.rows[e], cache.slots[e]
        if not rows.size:
            continue
        g = grad_out[rows]
        h = cache.hidden[e]
        gb = g @ bank.b[e]
        # <g, s B h> = s <B^T g, h>
        grad_w[rows, slots] = s * np.sum(gb * h, axis=1)
        sw = s * weights[rows, slots][:, None]
        grad_b[e] = g.T @ (sw * h)
        u = sw * gb
        grad_a[e] = u.T @ x[rows]
        grad_x[rows] += u @ bank.a[e]
    return grad_a, grad_b, grad_w, grad_x

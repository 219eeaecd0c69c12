"""Synthetic clustered regression task, optimisers, training loop, gradient oracle
and router fault injection."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .layer import MoeModel
from .numeric import DTYPE
from .objective import LossBreakdown, gate_balance_grad, task_loss, total_loss


class DivergenceError(FloatingPointError):
    """Raised when a training step produces a non-finite loss or gradient."""


# --------------------------------------------------------------------------- task


@dataclass
class TaskSpec:
    n_clusters: int = 8
    center_scale: float = 5.0
    offset_scale: float = 2.0
    delta_rank: int = 4
    delta_scale: float = 0.2
    shared_scale: float = 1.0
    noise_sigma: float = 0.01
    n_samples: int = 4096


@dataclass
class SyntheticTask:
    """Inputs x ~ centers[g] + N(0, I); targets generators[g] @ x + N(0, noise_sigma^2).

    ``base`` is the shared part of all generators; it doubles as the frozen
    base weight of a one-layer model so the adapters only have to learn the
    per-cluster low-rank offsets.
    """

    centers: np.ndarray  # (G, d_in)
    generators: np.ndarray  # (G, d_out, d_in)
    noise_sigma: float = 0.0
    base: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=DTYPE))
        self.generators = np.asarray(self.generators, dtype=DTYPE)
        if self.generators.ndim == 2:
            self.generators = self.generators[None]
        g = self.centers.shape[0]
        if self.generators.shape[0] != g or self.generators.shape[2] != self.centers.shape[1]:
            raise ValueError(f"generators {self.generators.shape} do not match centers {self.centers.shape}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if g > 1:
            diff = self.centers[:, None, :] - self.centers[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            if np.min(dist[~np.eye(g, dtype=bool)]) < 2.0:
                raise ValueError("cluster centers must be pairwise at least 2 apart")

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def d_in(self) -> int:
        return self.centers.shape[1]

    @property
    def d_out(self) -> int:
        return self.generators.shape[1]

    @classmethod
    def create(cls, spec: TaskSpec, d_in: int, d_out: int, rng: np.random.Generator) -> "SyntheticTask":
        g = spec.n_clusters
        if g < 1 or spec.delta_rank < 1:
            raise ValueError("degenerate task spec")
        if g <= d_in:
            q, _ = np.linalg.qr(rng.standard_normal((d_in, g)))
            centers = spec.center_scale * q.T
        else:
            dirs = rng.standard_normal((g, d_in))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            # too many clusters for orthogonal centres: widen the sphere until they are 2 apart
            gap = np.linalg.norm(dirs[:, None] - dirs[None], axis=-1)[~np.eye(g, dtype=bool)].min()
            if gap == 0:
                raise ValueError("degenerate task spec: coincident cluster directions")
            centers = max(spec.center_scale, 2.0 * (1 + 1e-9) / gap) * dirs
        # common component shared by every cluster, as in anisotropic hidden states
        offset = rng.standard_normal(d_in)
        centers = centers + spec.offset_scale * offset / np.linalg.norm(offset)
        base = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        r = spec.delta_rank
        u = rng.standard_normal((g, d_out, r))
        v = rng.standard_normal((g, r, d_in))
        deltas = spec.delta_scale * (u @ v) / np.sqrt(r * d_in)
        if spec.shared_scale:
            # low-rank update common to every cluster; any expert can learn it
            shared = rng.standard_normal((d_out, r)) @ rng.standard_normal((r, d_in))
            deltas = deltas + spec.shared_scale * shared / np.sqrt(r * d_in)
        return cls(centers, base[None] + deltas, spec.noise_sigma, base)


@dataclass
class Dataset:
    x: np.ndarray
    target: np.ndarray
    cluster: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.target[idx], self.cluster[idx])


def generate_task(task: SyntheticTask, rng: np.random.Generator, n_samples: int) -> Dataset:
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    cluster = rng.integers(0, task.n_clusters, size=n_samples)
    x = task.centers[cluster] + rng.standard_normal((n_samples, task.d_in))
    target = np.einsum("noi,ni->no", task.generators[cluster], x)
    if task.noise_sigma > 0:
        target = target + task.noise_sigma * rng.standard_normal(target.shape)
    return Dataset(x, target, cluster)


def save_dataset(path, data: Dataset, header: dict) -> None:
    """Binary record file: arrays plus a JSON header (seed, task spec)."""
    with open(path, "wb") as f:
        np.savez(f, x=data.x, target=data.target, cluster=data.cluster,
                 header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8))


def load_dataset(path) -> tuple[Dataset, dict]:
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode())
        return Dataset(z["x"], z["target"], z["cluster"]), header


# ---------------------------------------------------------------------- optimisers


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            p -= self.lr * grads[name]


class Adam:
    """Adam; a nonzero ``weight_decay`` is applied decoupled (AdamW style)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 0.01
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lambda_expert: float = 0.01
    lambda_router: float = 0.01
    seed: int = 0

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return Sgd(self.lr)
        if self.optimizer == "adam":
            return Adam(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)
        raise ValueError(f"unknown optimizer {self.optimizer!r}")


# ------------------------------------------------------------------------ training


def loss_and_grads(model: MoeModel, x, target, lambda_expert: float = 0.01, lambda_router: float = 0.01,
                   frozen=None, with_grads: bool = True):
    """Total loss on one batch and gradients for every trainable array.

    Balance losses use batch statistics; assignment fractions are constants
    in the backward pass.  Returns (LossBreakdown, grads or None, traces).
    """
    stats = model.new_stats()
    pred, traces = model.forward(x, stats, frozen)
    task, g = task_loss(pred, np.atleast_2d(target))
    loss = total_loss(task, stats, lambda_expert, lambda_router)
    if not with_grads:
        return loss, None, traces
    balance = []
    for es, rs in zip(stats.experts, stats.routers):
        gf = lambda_expert * gate_balance_grad(es) if lambda_expert else None
        gr = lambda_router * gate_balance_grad(rs) if (lambda_router and rs is not None) else None
        balance.append((gf, gr))
    return loss, model.backward(traces, g, balance), traces


def evaluate(model: MoeModel, data: Dataset, lambda_expert: float = 0.01,
             lambda_router: float = 0.01):
    """Full-dataset loss and the activation statistics behind it."""
    stats = model.new_stats()
    pred, _ = model.forward(data.x, stats)
    task, _ = task_loss(pred, data.target)
    return total_loss(task, stats, lambda_expert, lambda_router), stats


@dataclass
class TrainResult:
    model: MoeModel
    step_log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)


def train(model: MoeModel, data: Dataset, config: TrainConfig) -> TrainResult:
    """Mini-batch training in place.  Epoch 0 of ``epoch_log`` is the untrained model."""
    if config.lr < 0:
        raise ValueError("lr must be nonnegative")
    if config.epochs < 0 or config.batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    rng = np.random.Generator(np.random.Philox(config.seed)).spawn(1)[0]
    opt = config.make_optimizer()
    params = model.parameters()
    result = TrainResult(model)

    def log_epoch(epoch: int) -> None:
        loss, _ = evaluate(model, data, config.lambda_expert, config.lambda_router)
        result.epoch_log.append({"epoch": epoch, **_loss_row(loss)})

    log_epoch(0)
    step = 0
    n = len(data)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            t0 = time.perf_counter()
            idx = order[start:start + config.batch_size]
            loss, grads, _ = loss_and_grads(model, data.x[idx], data.target[idx],
                                            config.lambda_expert, config.lambda_router)
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if not np.isfinite(loss.total) or bad:
                raise DivergenceError(f"non-finite loss/gradient at epoch {epoch} step {step}: "
                                      f"loss={loss.total!r}, bad grads={bad}")
            opt.step(params, grads)
            step += 1
            result.step_log.append({"step": step, "epoch": epoch, **_loss_row(loss),
                                    "wall_ms": (time.perf_counter() - t0) * 1e3})
        log_epoch(epoch)
    return result


def _loss_row(loss: LossBreakdown) -> dict:
    return {"task": loss.task, "balance_expert": loss.balance_expert,
            "balance_router": loss.balance_router, "total": loss.total}


# ------------------------------------------------------------- finite differences


def finite_diff_gradient(loss_fn, params: dict[str, np.ndarray], eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. every entry of every array in ``params``.

    Arrays are perturbed in place and restored exactly.  Callers freeze any
    discrete routing choices inside ``loss_fn``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = loss_fn()
            flat[j] = orig - eps
            fm = loss_fn()
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * eps)
        grads[name] = g
    return grads


def frozen_loss_fn(model: MoeModel, x, target, lambda_expert: float = 0.01, lambda_router: float = 0.01):
    """Loss closure whose top-k selections are pinned to those at the current parameters."""
    _, _, traces = loss_and_grads(model, x, target, lambda_expert, lambda_router, with_grads=False)

    def fn() -> float:
        loss, _, _ = loss_and_grads(model, x, target, lambda_expert, lambda_router, frozen=traces,
                                    with_grads=False)
        return loss.total

    return fn, traces


# ----------------------------------------------------------------- fault injection


FAULT_MODES = ("logit_noise", "weight_zero")


@dataclass
class FaultSpec:
    target_router: int = 0
    noise_sigma: float = 0.0
    mode: str = "logit_noise"

    def __post_init__(self):
        if self.mode not in FAULT_MODES:
            raise ValueError(f"unknown fault mode {self.mode!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.target_router < 0:
            raise ValueError("target_router must be nonnegative")


def inject_router_fault(model: MoeModel, fault: FaultSpec, rng: np.random.Generator) -> MoeModel:
    """Copy of ``model`` with one sub-router corrupted in every layer."""
    faulty = model.copy()
    for layer in faulty.layers:
        if fault.target_router >= layer.router.n_routers:
            raise ValueError(f"target router {fault.target_router} out of range "
                             f"for {layer.router.n_routers} router(s)")
        w = layer.router.subs[fault.target_router]
        if fault.mode == "weight_zero":
            w[...] = 0.0
        elif fault.noise_sigma > 0:
            w += fault.noise_sigma * rng.standard_normal(w.shape)
    return faulty


def selections(model: MoeModel, x) -> list[np.ndarray]:
    """Sorted selected-expert sets per layer, one row per input."""
    _, traces = model.forward(x)
    return [np.sort(t.decision.selected, axis=-1) for t in traces]


def selection_agreement(clean: MoeModel, faulty: MoeModel, x) -> tuple[float, float]:
    """(exact, overlap) agreement of expert selections over inputs.

    exact: fraction of inputs whose selected set matches in every layer.
    overlap: mean fraction of each clean set that the faulty model also picks.
    """
    a = selections(clean, x)
    b = selections(faulty, x)
    exact = np.ones(a[0].shape[0], dtype=bool)
    overlaps = []
    for sa, sb in zip(a, b):
        exact &= np.all(sa == sb, axis=-1)
        hits = (sa[:, :, None] == sb[:, None, :]).any(axis=-1).sum(axis=-1)
        overlaps.append(hits / sa.shape[1])
    return float(exact.mean()), float(np.mean(overlaps))

"""Top-k gating with one router or with a committee of sub-routers.

In committee ("mor") mode every sub-router emits a softmax over experts, a main
router emits a softmax over the sub-routers, and the expert scores are the
convex combination of the sub-router distributions.  Expert-level top-k and
renormalisation are applied after that aggregation.  With one sub-router this
reduces exactly to single-router gating.

All functions accept a single input vector or a 2-D batch of row vectors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numeric import DTYPE, init_kaiming, softmax, softmax_backward, top_k_indices

ROUTER_SCHEMA = "mor-kit/router/v1"
MODES = ("single", "mor")


class RouterParams:
    """Sub-router matrices stacked as (n_routers, n_experts, d_in), plus a main router.

    ``main`` is (n_routers, d_in) in "mor" mode and ``None`` in "single" mode,
    where ``subs`` holds exactly one router.
    """

    def __init__(self, subs: np.ndarray, main: np.ndarray | None = None):
        subs = np.ascontiguousarray(subs, dtype=DTYPE)
        if subs.ndim == 2:
            subs = subs[None]
        if subs.ndim != 3 or subs.shape[0] < 1:
            raise ValueError(f"subs must be a nonempty stack of matrices, got shape {subs.shape}")
        if main is not None:
            main = np.ascontiguousarray(main, dtype=DTYPE)
            if main.shape != (subs.shape[0], subs.shape[2]):
                raise ValueError(f"main router shape {main.shape} != ({subs.shape[0]}, {subs.shape[2]})")
        elif subs.shape[0] != 1:
            raise ValueError("single-router params must hold exactly one router")
        self.subs = subs
        self.main = main

    @classmethod
    def create(cls, mode: str, n_routers: int, n_experts: int, d_in: int,
               rng: np.random.Generator) -> "RouterParams":
        if mode not in MODES:
            raise ValueError(f"unknown routing mode {mode!r}")
        if mode == "single" and n_routers != 1:
            raise ValueError("single mode uses exactly one router")
        # draw order: sub-routers first, then main, so the first sub-router of a
        # committee matches a single router built from the same seed
        subs = np.stack([init_kaiming(n_experts, d_in, rng) for _ in range(n_routers)])
        main = init_kaiming(n_routers, d_in, rng) if mode == "mor" else None
        return cls(subs, main)

    @property
    def mode(self) -> str:
        return "single" if self.main is None else "mor"

    @property
    def n_routers(self) -> int:
        return self.subs.shape[0]

    @property
    def n_experts(self) -> int:
        return self.subs.shape[1]

    @property
    def d_in(self) -> int:
        return self.subs.shape[2]

    def arrays(self) -> list[np.ndarray]:
        return [self.subs] if self.main is None else [self.subs, self.main]

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def copy(self) -> "RouterParams":
        return RouterParams(self.subs.copy(), None if self.main is None else self.main.copy())

    def to_dict(self) -> dict:
        return {
            "schema": ROUTER_SCHEMA,
            "mode": self.mode,
            "n_routers": self.n_routers,
            "n_experts": self.n_experts,
            "d_in": self.d_in,
            "subs": self.subs.reshape(self.n_routers, -1).tolist(),
            "main": None if self.main is None else self.main.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouterParams":
        if d.get("schema") != ROUTER_SCHEMA:
            raise ValueError(f"unsupported router schema {d.get('schema')!r}")
        subs = np.asarray(d["subs"], dtype=DTYPE).reshape(d["n_routers"], d["n_experts"], d["d_in"])
        main = None if d["main"] is None else np.asarray(d["main"], dtype=DTYPE)
        params = cls(subs, main)
        if params.mode != d["mode"]:
            raise ValueError(f"router mode {d['mode']!r} inconsistent with stored matrices")
        return params


@dataclass
class RoutingDecision:
    """Gate output for one input (1-D fields) or a batch (leading row axis).

    ``selected``/``weights`` have k entries per input, ``full_dist`` covers all
    experts before top-k, ``router_weights`` covers the sub-routers ([1.0] for a
    single router).  The remaining fields cache intermediates for backprop.
    """

    selected: np.ndarray
    weights: np.ndarray
    full_dist: np.ndarray
    router_weights: np.ndarray
    sub_probs: np.ndarray | None = field(default=None, repr=False)
    main_probs: np.ndarray | None = field(default=None, repr=False)
    router_selected: np.ndarray | None = field(default=None, repr=False)
    temperature: float = 1.0
    stamp: tuple | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.selected.shape[-1]

    @property
    def batched(self) -> bool:
        return self.selected.ndim == 2

    def row(self, i: int) -> "RoutingDecision":
        """Decision for a single row of a batched decision."""
        return RoutingDecision(
            self.selected[i], self.weights[i], self.full_dist[i], self.router_weights[i],
            None if self.sub_probs is None else self.sub_probs[i],
            None if self.main_probs is None else self.main_probs[i],
            None if self.router_selected is None else self.router_selected[i],
            self.temperature,
        )

    def dense_weights(self) -> np.ndarray:
        """Expert weights scattered over all experts, zero where not selected."""
        sel = np.atleast_2d(self.selected)
        dense = np.zeros(np.atleast_2d(self.full_dist).shape, dtype=DTYPE)
        np.put_along_axis(dense, sel, np.atleast_2d(self.weights), axis=-1)
        return dense if self.batched else dense[0]


def _renormalize(p: np.ndarray, selected: np.ndarray) -> np.ndarray:
    kept = np.take_along_axis(p, selected, axis=-1)
    return kept / kept.sum(axis=-1, keepdims=True)


def _renormalize_backward(p: np.ndarray, selected: np.ndarray, weights: np.ndarray,
                          grad_weights: np.ndarray) -> np.ndarray:
    """Gradient on the full probability vector from a gradient on the kept weights."""
    total = np.take_along_axis(p, selected, axis=-1).sum(axis=-1, keepdims=True)
    inner = np.sum(grad_weights * weights, axis=-1, keepdims=True)
    grad_p = np.zeros_like(p)
    np.put_along_axis(grad_p, selected, (grad_weights - inner) / total, axis=-1)
    return grad_p


def _check_selection(selected: np.ndarray, n: int, k: int, rows: int) -> np.ndarray:
    selected = np.atleast_2d(np.asarray(selected, dtype=np.intp))
    if selected.shape != (rows, k):
        raise ValueError(f"frozen selection shape {selected.shape} != ({rows}, {k})")
    if selected.min() < 0 or selected.max() >= n:
        raise ValueError("frozen selection out of range")
    return selected


def topk_renormalize(p, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the k largest probabilities (lowest index wins ties) and rescale them to sum to 1."""
    p = np.asarray(p, dtype=DTYPE)
    if not np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-6) or np.any(p < 0):
        raise ValueError("input is not a probability vector")
    selected = top_k_indices(p, k)
    return selected, _renormalize(p, selected)


def _softmax_inplace(z: np.ndarray, temperature: float, axis: int) -> np.ndarray:
    """Softmax computed in place on a scratch logits buffer."""
    if temperature != 1.0:
        z /= temperature
    z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def _as_batch(x, d_in: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim not in (1, 2) or x.shape[-1] != d_in:
        raise ValueError(f"input shape {x.shape} incompatible with router input size {d_in}")
    return np.atleast_2d(x), x.ndim == 1


def _stamp(params: RouterParams, n: int) -> tuple:
    return (params.mode, params.subs.shape, params.checksum(), n)


def _unbatch(decision: RoutingDecision) -> RoutingDecision:
    d = decision.row(0)
    d.stamp = decision.stamp
    return d


def single_route(w_r, x, k: int, temperature: float = 1.0, selected=None) -> RoutingDecision:
    """Softmax over expert logits, then top-k renormalisation."""
    w_r = np.asarray(w_r, dtype=DTYPE)
    return route(RouterParams(w_r), x, k, temperature=temperature, selected=selected)


def main_router_weights(main, x, k_routers: int | None = None, temperature: float = 1.0,
                        router_selected=None) -> np.ndarray:
    """Dense weights over sub-routers: softmax of main logits, top-k renormalised.

    Dropped sub-routers get exactly zero.
    """
    main = np.asarray(main, dtype=DTYPE)
    xb, single = _as_batch(x, main.shape[1])
    weights, _, _ = _main_weights(main, xb, k_routers, temperature, router_selected)
    return weights[0] if single else weights


def _main_weights(main, xb, k_routers, temperature, router_selected):
    return _select_routers(softmax(xb @ main.T, temperature), k_routers, router_selected)


def _select_routers(q, k_routers, router_selected):
    """(dense weights, main probabilities, kept router ids) from main-router probabilities."""
    n, n_routers = q.shape
    k_routers = n_routers if k_routers is None else k_routers
    if not 1 <= k_routers <= n_routers:
        raise ValueError(f"k_routers must be in [1, {n_routers}], got {k_routers}")
    if router_selected is None and k_routers == n_routers:
        # no router dropped: weights are q itself
        return q, q, np.broadcast_to(np.arange(n_routers), q.shape)
    if router_selected is None:
        router_selected = top_k_indices(q, k_routers)
    else:
        router_selected = _check_selection(router_selected, n_routers, k_routers, n)
    weights = np.zeros_like(q)
    np.put_along_axis(weights, router_selected, _renormalize(q, router_selected), axis=-1)
    return weights, q, router_selected


def mor_route(params: RouterParams, x, k_experts: int, k_routers: int | None = None,
              temperature: float = 1.0, selected=None, router_selected=None) -> RoutingDecision:
    if params.mode != "mor":
        raise ValueError("mor_route needs committee params with a main router")
    return route(params, x, k_experts, k_routers, temperature, selected, router_selected)


def route(params: RouterParams, x, k_experts: int, k_routers: int | None = None,
          temperature: float = 1.0, selected=None, router_selected=None) -> RoutingDecision:
    """Route in whichever mode ``params`` is in.

    ``selected``/``router_selected`` freeze the discrete top-k choices (used by
    finite-difference checks); by default they are computed from the scores.
    """
    xb, single = _as_batch(x, params.d_in)
    n_experts = params.n_experts
    if not 1 <= k_experts <= n_experts:
        raise ValueError(f"k_experts must be in [1, {n_experts}], got {k_experts}")
    n = xb.shape[0]
    n_routers = params.n_routers
    # logits are computed feature-major (one row per expert / router) so every
    # softmax reduces across contiguous rows
    if params.main is None:
        full = np.ascontiguousarray(_softmax_inplace(params.subs[0] @ xb.T, temperature, axis=0).T)
        sub_probs = full[:, None, :]
        rho = np.ones((n, 1), dtype=DTYPE)
        q = None
        rsel = None
    else:
        stacked = np.concatenate([params.subs.reshape(-1, params.d_in), params.main])
        logits = stacked @ xb.T
        if temperature != 1.0:
            logits /= temperature
        sub_t = _softmax_inplace(logits[:-n_routers].reshape(n_routers, n_experts, n), 1.0, axis=1)
        q_t = _softmax_inplace(logits[-n_routers:], 1.0, axis=0)
        sub_probs = sub_t.transpose(2, 0, 1)
        if router_selected is None and k_routers in (None, n_routers):
            rho_t = q_t
            rsel = np.broadcast_to(np.arange(n_routers), (n, n_routers))
            rho = q = q_t.T
        else:
            rho, q, rsel = _select_routers(q_t.T, k_routers, router_selected)
            rho_t = rho.T
        full = np.ascontiguousarray(np.einsum("sn,sen->en", rho_t, sub_t).T)
    if selected is None:
        selected = top_k_indices(full, k_experts)
    else:
        selected = _check_selection(selected, n_experts, k_experts, n)
    decision = RoutingDecision(
        selected, _renormalize(full, selected), full, rho, sub_probs, q, rsel, temperature,
        stamp=_stamp(params, n),
    )
    return _unbatch(decision) if single else decision


@dataclass
class RouterGrads:
    subs: np.ndarray
    main: np.ndarray | None
    x: np.ndarray


def routing_grads(params: RouterParams, x, decision: RoutingDecision, grad_weights=None,
                  grad_full_dist=None, grad_router_weights=None) -> RouterGrads:
    """Backprop through the gate with the top-k choices held fixed.

    Upstream gradients may be given on the renormalised expert weights, on the
    pre-top-k expert distribution (balance loss) and on the dense sub-router
    weights (router balance loss).  Parameter gradients are summed over rows.
    """
    xb, single = _as_batch(x, params.d_in)
    n = xb.shape[0]
    if decision.stamp != _stamp(params, n):
        raise ValueError("stale routing cache: decision was not computed from these params and inputs")
    sel = np.atleast_2d(decision.selected)
    w = np.atleast_2d(decision.weights)
    full = np.atleast_2d(decision.full_dist)
    sub_probs = decision.sub_probs if decision.sub_probs.ndim == 3 else decision.sub_probs[None]
    rho = np.atleast_2d(decision.router_weights)
    temp = decision.temperature

    grad_full = np.zeros_like(full)
    if grad_weights is not None:
        grad_full += _renormalize_backward(full, sel, w, np.atleast_2d(grad_weights))
    if grad_full_dist is not None:
        grad_full += np.atleast_2d(grad_full_dist)

    if params.main is None:
        g_logits = softmax_backward(full, grad_full, temp)
        grad_subs = (g_logits.T @ xb)[None]
        grad_x = g_logits @ params.subs[0]
        return RouterGrads(grad_subs, None, grad_x[0] if single else grad_x)

    # full = sum_s rho_s * p_s
    grad_rho = np.einsum("nj,nsj->ns", grad_full, sub_probs)
    if grad_router_weights is not None:
        grad_rho = grad_rho + np.atleast_2d(grad_router_weights)
    grad_p = rho[:, :, None] * grad_full[:, None, :]
    g_sub_logits = softmax_backward(sub_probs, grad_p, temp)
    grad_subs = np.einsum("nsj,nd->sjd", g_sub_logits, xb)
    grad_x = np.einsum("nsj,sjd->nd", g_sub_logits, params.subs)

    q = np.atleast_2d(decision.main_probs)
    rsel = np.atleast_2d(decision.router_selected)
    rho_kept = np.take_along_axis(rho, rsel, axis=-1)
    grad_q = _renormalize_backward(q, rsel, rho_kept, np.take_along_axis(grad_rho, rsel, axis=-1))
    g_main_logits = softmax_backward(q, grad_q, temp)
    grad_main = g_main_logits.T @ xb
    grad_x = grad_x + g_main_logits @ params.main
    return RouterGrads(grad_subs, grad_main, grad_x[0] if single else grad_x)

"""MoE-LoRA layer (frozen base weight + gated LoRA experts) and a stack of them."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .lora import DeltaCache, LoraExpertBank, sparse_delta, sparse_delta_backward
from .numeric import DTYPE
from .objective import ActivationStats
from .routing import RouterParams, RoutingDecision, route, routing_grads

LAYER_SCHEMA = "mor-kit/layer/v1"
CHECKPOINT_SCHEMA = "mor-kit/checkpoint/v1"


class MoeLoraLayer:
    def __init__(self, w0, bank: LoraExpertBank, router: RouterParams, k_experts: int = 2,
                 k_routers: int | None = None, temperature: float = 1.0):
        w0 = np.array(w0, dtype=DTYPE)
        if w0.shape != (bank.d_out, bank.d_in):
            raise ValueError(f"base weight shape {w0.shape} != ({bank.d_out}, {bank.d_in})")
        if router.n_experts != bank.n_experts or router.d_in != bank.d_in:
            raise ValueError(f"router ({router.n_experts} experts, d_in {router.d_in}) does not match "
                             f"bank ({bank.n_experts} experts, d_in {bank.d_in})")
        if not 1 <= k_experts <= bank.n_experts:
            raise ValueError(f"k_experts must be in [1, {bank.n_experts}], got {k_experts}")
        if k_routers is None:
            k_routers = router.n_routers
        if not 1 <= k_routers <= router.n_routers:
            raise ValueError(f"k_routers must be in [1, {router.n_routers}], got {k_routers}")
        w0.setflags(write=False)
        self.w0 = w0
        self.bank = bank
        self.router = router
        self.k_experts = k_experts
        self.k_routers = k_routers
        self.temperature = temperature

    @classmethod
    def create(cls, d_in: int, d_out: int, n_experts: int = 8, k_experts: int = 2, mode: str = "mor",
               n_routers: int = 2, k_routers: int | None = None, rank: int = 8, alpha: float = 16.0,
               rng: np.random.Generator | None = None, w0=None, temperature: float = 1.0) -> "MoeLoraLayer":
        if rng is None:
            raise ValueError("an rng is required")
        if w0 is None:
            w0 = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        if mode == "single":
            n_routers = k_routers = 1
        # routers are drawn last so single and committee layers built from one
        # seed share w0, the expert bank and the first sub-router
        bank = LoraExpertBank.create(n_experts, d_in, d_out, rank, alpha, rng)
        router = RouterParams.create(mode, n_routers, n_experts, d_in, rng)
        return cls(w0, bank, router, k_experts, k_routers, temperature)

    @property
    def mode(self) -> str:
        return self.router.mode

    @property
    def d_in(self) -> int:
        return self.bank.d_in

    @property
    def d_out(self) -> int:
        return self.bank.d_out

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"a": self.bank.a, "b": self.bank.b, "subs": self.router.subs}
        if self.router.main is not None:
            params["main"] = self.router.main
        return params

    def copy(self) -> "MoeLoraLayer":
        return MoeLoraLayer(self.w0, self.bank.copy(), self.router.copy(), self.k_experts,
                            self.k_routers, self.temperature)

    def to_dict(self) -> dict:
        return {
            "schema": LAYER_SCHEMA,
            "mode": self.mode,
            "k_experts": self.k_experts,
            "k_routers": self.k_routers,
            "temperature": self.temperature,
            "w0": self.w0.tolist(),
            "bank": self.bank.to_dict(),
            "router": self.router.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MoeLoraLayer":
        if d.get("schema") != LAYER_SCHEMA:
            raise ValueError(f"unsupported layer schema {d.get('schema')!r}")
        layer = cls(d["w0"], LoraExpertBank.from_dict(d["bank"]), RouterParams.from_dict(d["router"]),
                    d["k_experts"], d["k_routers"], d["temperature"])
        if layer.mode != d["mode"]:
            raise ValueError(f"layer mode {d['mode']!r} inconsistent with router")
        return layer


@dataclass
class LayerTrace:
    decision: RoutingDecision
    input: np.ndarray
    output: np.ndarray
    delta_cache: DeltaCache


@dataclass
class LayerGrads:
    a: np.ndarray
    b: np.ndarray
    subs: np.ndarray
    main: np.ndarray | None
    x: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        grads = {"a": self.a, "b": self.b, "subs": self.subs}
        if self.main is not None:
            grads["main"] = self.main
        return grads


def layer_forward(layer: MoeLoraLayer, x, stats: ActivationStats | None = None, layer_index: int = 0,
                  selected=None, router_selected=None) -> tuple[np.ndarray, LayerTrace]:
    """y = w0 x + sum over selected experts of weight * expert(x).

    Passing ``selected``/``router_selected`` freezes the top-k choices.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != layer.d_in:
        raise ValueError(f"input length {x.shape[-1]} != d_in {layer.d_in}")
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    decision = route(layer.router, xb, layer.k_experts, layer.k_routers, layer.temperature,
                     selected, router_selected)
    delta, cache = sparse_delta(layer.bank, xb, decision.selected, decision.weights)
    y = xb @ layer.w0.T + delta
    if stats is not None:
        stats.record(layer_index, decision)
    trace = LayerTrace(decision, xb, y, cache)
    return (y[0] if single else y), trace


def layer_backward(layer: MoeLoraLayer, trace: LayerTrace, upstream, grad_full_dist=None,
                   grad_router_weights=None) -> LayerGrads:
    """Gradients for A, B, routers and the input; the base weight gets none.

    ``grad_full_dist``/``grad_router_weights`` carry balance-loss gradients
    (per row, or one vector broadcast over rows).
    """
    g = np.asarray(upstream, dtype=DTYPE)
    single = g.ndim == 1
    g = np.atleast_2d(g)
    if g.shape != trace.output.shape or trace.input.shape[1] != layer.d_in:
        raise ValueError("trace does not match this layer or upstream gradient")
    decision = trace.decision
    grad_a, grad_b, grad_w, grad_x = sparse_delta_backward(layer.bank, trace.input, decision.weights,
                                                           trace.delta_cache, g)
    grad_x += g @ layer.w0
    rg = routing_grads(layer.router, trace.input, decision, grad_w, grad_full_dist, grad_router_weights)
    grad_x += rg.x
    return LayerGrads(grad_a, grad_b, rg.subs, rg.main, grad_x[0] if single else grad_x)


class MoeModel:
    """Stack of MoE-LoRA layers with tanh between consecutive layers."""

    def __init__(self, layers: list[MoeLoraLayer]):
        if not layers:
            raise ValueError("a model needs at least one layer")
        for lo, hi in zip(layers, layers[1:]):
            if lo.d_out != hi.d_in:
                raise ValueError(f"layer widths do not chain: {lo.d_out} -> {hi.d_in}")
        self.layers = layers

    @classmethod
    def create(cls, dims: list[int], rng: np.random.Generator, w0s=None, **layer_kwargs) -> "MoeModel":
        if len(dims) < 2:
            raise ValueError("dims needs at least input and output widths")
        w0s = w0s or [None] * (len(dims) - 1)
        return cls([MoeLoraLayer.create(d_in, d_out, rng=rng, w0=w0, **layer_kwargs)
                    for d_in, d_out, w0 in zip(dims, dims[1:], w0s)])

    @property
    def mode(self) -> str:
        return self.layers[0].mode

    def new_stats(self) -> ActivationStats:
        return ActivationStats.empty([
            (l.bank.n_experts, l.k_experts, None if l.mode == "single" else l.router.n_routers)
            for l in self.layers
        ])

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"layers.{i}.{name}": arr
                for i, layer in enumerate(self.layers) for name, arr in layer.parameters().items()}

    def forward(self, x, stats: ActivationStats | None = None, frozen=None) -> tuple[np.ndarray, list[LayerTrace]]:
        """``frozen`` is a list of traces whose top-k choices are reused layer by layer."""
        h = np.atleast_2d(np.asarray(x, dtype=DTYPE))
        traces = []
        for i, layer in enumerate(self.layers):
            sel = rsel = None
            if frozen is not None:
                sel = frozen[i].decision.selected
                rsel = frozen[i].decision.router_selected
            y, trace = layer_forward(layer, h, stats, i, sel, rsel)
            traces.append(trace)
            h = np.tanh(y) if i < len(self.layers) - 1 else y
        return h, traces

    def predict(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, traces: list[LayerTrace], upstream, balance_grads=None) -> dict[str, np.ndarray]:
        """``balance_grads[i]`` is an optional (grad_full_dist, grad_router_weights) pair for layer i."""
        grads: dict[str, np.ndarray] = {}
        g = np.atleast_2d(np.asarray(upstream, dtype=DTYPE))
        for i in reversed(range(len(self.layers))):
            if i < len(self.layers) - 1:
                g = g * (1.0 - np.tanh(traces[i].output) ** 2)
            gf, gr = balance_grads[i] if balance_grads is not None else (None, None)
            lg = layer_backward(self.layers[i], traces[i], g, gf, gr)
            for name, arr in lg.as_dict().items():
                grads[f"layers.{i}.{name}"] = arr
            g = lg.x
        return grads

    def copy(self) -> "MoeModel":
        return MoeModel([layer.copy() for layer in self.layers])

    def to_dict(self) -> dict:
        return {"schema": CHECKPOINT_SCHEMA, "layers": [layer.to_dict() for layer in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "MoeModel":
        if d.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {d.get('schema')!r}")
        return cls([MoeLoraLayer.from_dict(layer) for layer in d["layers"]])


def save_checkpoint(model: MoeModel, path) -> None:
    with open(path, "w") as f:
        json.dump(model.to_dict(), f, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> MoeModel:
    """Raises ``ValueError`` for malformed JSON (with byte offset) or a bad schema."""
    with open(path) as f:
        text = f.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt checkpoint at offset {e.pos}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ValueError("corrupt checkpoint at offset 0: top level is not an object")
    try:
        return MoeModel.from_dict(data)
    except (KeyError, TypeError) as e:
        raise ValueError(f"checkpoint missing or malformed field: {e}") from e

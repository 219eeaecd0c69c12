"""Mixture-of-routers gating for MoE-LoRA layers, in plain numpy."""

from .layer import MoeLoraLayer, MoeModel, layer_backward, layer_forward
from .lora import LoraExpert, LoraExpertBank, expert_forward, expert_param_grads, weighted_expert_delta
from .numeric import init_kaiming, init_zeros, make_rng, matmul, softmax, top_k_indices
from .objective import (ActivationStats, GateStats, LossBreakdown, balance_loss, router_balance_loss,
                        task_loss, total_loss)
from .routing import (RouterParams, RoutingDecision, main_router_weights, mor_route, route, routing_grads,
                      single_route, topk_renormalize)

__version__ = "0.1.0"

"""moelab: a desk-scale laboratory contrasting two MoE structures.

fine_grained dispatches full-width tokens to many small experts; bigmac
shrinks tokens through shared outer projections before the all-to-all and
runs experts with the same two matrix shapes in swapped order, cutting
communication to a fraction r of the fine-grained volume at unchanged
per-expert parameter and multiply-add counts. The package provides the
differentiable blocks, closed-form accounting, and an expert-parallelism
simulator to measure exactly that trade.
"""

from .config import (BIGMAC, FINE_GRAINED, VANILLA, VARIANTS, ConfigError,
                     CostModel, ModelConfig, load_config)
from .moe_block import (MoEParams, RoutingPlan, apply_capacity,
                        aux_load_balance_loss, expert_capacity,
                        expert_forward, init_params, load_params,
                        moe_forward, param_count_constructed, route,
                        save_params)
from .tensor_core import Tensor, finite_diff_grad

__version__ = "0.1.0"

__all__ = [
    "BIGMAC", "FINE_GRAINED", "VANILLA", "VARIANTS",
    "ConfigError", "CostModel", "ModelConfig", "load_config",
    "MoEParams", "RoutingPlan", "apply_capacity", "aux_load_balance_loss",
    "expert_capacity", "expert_forward", "init_params", "load_params",
    "moe_forward", "param_count_constructed", "route", "save_params",
    "Tensor", "finite_diff_grad",
    "__version__",
]

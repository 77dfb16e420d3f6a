"""Differentiable MoE block in three structural variants.

Shared skeleton: a softmax router picks top_k experts per token, selected
probabilities renormalize to gates that sum to one, expert outputs combine
as a gate-weighted sum. The variants differ only in where the wide and
narrow projections sit:

- fine_grained: each expert maps h -> r*h -> h; tokens travel at width h.
- bigmac: shared outer projections shrink tokens to r*h before dispatch
  and restore h after combine; each expert maps r*h -> h -> r*h, the same
  two matrix shapes in swapped order, so per-expert parameter and
  multiply-add counts match fine_grained exactly.
- vanilla: e/8 experts (at least one) with the inner width scaled up so
  total expert parameters match fine_grained at the same (h, r, e).

Routing always reads the full-width token, including for bigmac, so every
variant shares one routing decision for identical weights. Gradients flow
through gate values and expert weights but never through the discrete
selection, and dropped slots contribute zero without their gate being
redistributed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from . import tensor_core as tc
from .config import BIGMAC, FINE_GRAINED, VANILLA, VARIANTS, ConfigError, ModelConfig
from .tensor_core import Tensor


class ContractError(ValueError):
    """Plan, params, and inputs do not belong to the same block."""


def vanilla_expert_count(e: int) -> int:
    return max(1, e // 8)


def vanilla_hidden(h: int, rh: int, e: int) -> int:
    """Inner width giving vanilla the same expert-parameter total."""
    e_v = vanilla_expert_count(e)
    return rh * e // e_v


def expert_param_count(h: int, rh: int) -> int:
    """Parameters of one expert; identical for all variants by design."""
    return 2 * h * rh


def expert_mac_count(h: int, rh: int) -> int:
    """Multiply-adds one expert spends on one token; variant-independent."""
    return 2 * h * rh


@dataclass
class MoEParams:
    """Weights of one block. All matrices are bias-free by design."""

    variant: str
    router_weight: Tensor                 # h x num_experts
    experts: list[tuple[Tensor, Tensor]]  # (first, second) per expert
    outer_down: Tensor | None = None      # h x rh, bigmac only
    outer_up: Tensor | None = None        # rh x h, bigmac only

    @property
    def h(self) -> int:
        return self.router_weight.shape[0]

    @property
    def num_experts(self) -> int:
        return self.router_weight.shape[1]

    def trainables(self) -> list[Tensor]:
        out = [self.router_weight]
        if self.outer_down is not None:
            out.append(self.outer_down)
        if self.outer_up is not None:
            out.append(self.outer_up)
        for first, second in self.experts:
            out.append(first)
            out.append(second)
        return out


def init_params(cfg: ModelConfig, variant: str,
                rng: np.random.Generator) -> MoEParams:
    """Random block weights, each matrix scaled by 1/sqrt(fan_in)."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    h, rh, e = cfg.h, cfg.rh, cfg.e

    def mat(rows: int, cols: int) -> Tensor:
        return Tensor(rng.normal(0.0, rows ** -0.5, size=(rows, cols)),
                      requires_grad=True)

    if variant == VANILLA:
        e_v = vanilla_expert_count(e)
        h_f = vanilla_hidden(h, rh, e)
        router = mat(h, e_v)
        experts = [(mat(h, h_f), mat(h_f, h)) for _ in range(e_v)]
        return MoEParams(variant, router, experts)
    if variant == FINE_GRAINED:
        router = mat(h, e)
        experts = [(mat(h, rh), mat(rh, h)) for _ in range(e)]
        return MoEParams(variant, router, experts)
    router = mat(h, e)
    experts = [(mat(rh, h), mat(h, rh)) for _ in range(e)]
    return MoEParams(variant, router, experts,
                     outer_down=mat(h, rh), outer_up=mat(rh, h))


def param_count_constructed(params: MoEParams) -> int:
    """Count actual weight elements, independent of any closed form."""
    return sum(int(t.data.size) for t in params.trainables())


@dataclass
class RoutingPlan:
    """Per-token routing decisions, slot-ordered by descending gate.

    ``expert_idx`` and ``gates`` are tokens x top_k; gate values of a
    token's slots sum to one before any drops. ``dropped`` marks slots
    suppressed by capacity. ``full_probs`` keeps the complete softmax row
    per token for the balance loss; synthetic plans built without a router
    carry None there.
    """

    expert_idx: np.ndarray
    gates: np.ndarray
    dropped: np.ndarray
    num_experts: int
    full_probs: np.ndarray | None = None

    @property
    def num_tokens(self) -> int:
        return self.expert_idx.shape[0]

    @property
    def top_k(self) -> int:
        return self.expert_idx.shape[1]

    @property
    def assignments(self) -> int:
        return int(self.expert_idx.size)

    @property
    def drop_count(self) -> int:
        return int(self.dropped.sum())


def route(x: np.ndarray, params: MoEParams, top_k: int) -> RoutingPlan:
    """Score every expert, keep the top_k largest, renormalize their gates.

    Reads only the token inputs and the router weight, so the plan is
    bitwise invariant to every other weight in the block. Ties between
    probabilities resolve to the lower expert index.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.h:
        raise ContractError(f"route: inputs {x.shape} do not match "
                            f"router {params.router_weight.shape}")
    e = params.num_experts
    if not (1 <= top_k <= e):
        raise ConfigError(f"top_k={top_k} must lie in [1, {e}]")
    probs = tc.softmax_rows_np(x @ params.router_weight.data)
    idx = kernels.topk_desc(probs, top_k)
    selected = np.take_along_axis(probs, idx, axis=1)
    gates = selected / selected.sum(axis=1, keepdims=True)
    dropped = np.zeros_like(idx, dtype=bool)
    return RoutingPlan(idx, gates, dropped, num_experts=e, full_probs=probs)


def expert_capacity(f: float, tokens: int, top_k: int, e: int) -> int | None:
    """Per-expert assignment budget; None means dropless."""
    if math.isinf(f):
        return None
    return math.ceil(f * tokens * top_k / e)


def apply_capacity(plan: RoutingPlan, cfg: ModelConfig) -> RoutingPlan:
    """Mark assignments beyond each expert's capacity as dropped.

    Assignments survive in ascending token order, then slot order, so the
    drop set can only grow as the capacity factor shrinks.
    """
    cap = expert_capacity(cfg.f, plan.num_tokens, plan.top_k,
                          plan.num_experts)
    if cap is None:
        return replace(plan, dropped=plan.dropped.copy())
    over = kernels.capacity_drop_mask(plan.expert_idx.reshape(-1),
                                      plan.num_experts, cap)
    dropped = plan.dropped | over.reshape(plan.dropped.shape)
    return replace(plan, dropped=dropped)


def expert_forward(x: Tensor, params: MoEParams, index: int) -> Tensor:
    """One expert: second(relu(first(x))). Width contract set by variant."""
    first, second = params.experts[index]
    if x.data.ndim != 2 or x.shape[1] != first.shape[0]:
        raise ContractError(
            f"expert_forward: {params.variant} expert {index} expects "
            f"width {first.shape[0]}, got inputs {x.shape}")
    return tc.matmul(tc.relu(tc.matmul(x, first)), second)


def _check_plan(x: Tensor, params: MoEParams, plan: RoutingPlan) -> None:
    if plan.num_experts != params.num_experts:
        raise ContractError(f"plan routes over {plan.num_experts} experts, "
                            f"params have {params.num_experts}")
    if x.data.ndim != 2 or x.shape[0] != plan.num_tokens:
        raise ContractError(f"inputs {x.shape} do not cover the plan's "
                            f"{plan.num_tokens} tokens")
    if x.shape[1] != params.h:
        raise ContractError(f"inputs {x.shape} do not match hidden "
                            f"width {params.h}")
    if params.variant == BIGMAC and (params.outer_down is None
                                     or params.outer_up is None):
        raise ContractError("bigmac params are missing outer projections")


def _forward_parts(x: Tensor, params: MoEParams,
                   plan: RoutingPlan) -> tuple[Tensor, Tensor]:
    """Block output plus the router probability tensor (for the balance
    loss); both live on the same graph."""
    _check_plan(x, params, plan)
    n, k = plan.num_tokens, plan.top_k

    probs = tc.softmax_rows(tc.matmul(x, params.router_weight))
    selected = tc.take_per_row(probs, plan.expert_idx)
    denom = tc.sum_rows(selected)
    inv = tc.div(tc.const(np.ones_like(denom.data)), denom)
    gates = tc.scale_rows(selected, inv)

    if params.variant == BIGMAC:
        base = tc.matmul(x, params.outer_down)
    else:
        base = x
    inner_width = base.shape[1]

    flat_expert = plan.expert_idx.reshape(-1)
    keep = ~plan.dropped.reshape(-1)
    y: Tensor | None = None
    for i in range(params.num_experts):
        sel = np.nonzero((flat_expert == i) & keep)[0]
        if sel.size == 0:
            continue
        t_idx = sel // k
        j_idx = sel % k
        out_i = expert_forward(tc.gather_rows(base, t_idx), params, i)
        weighted = tc.scale_rows(out_i, tc.take_pairs(gates, t_idx, j_idx))
        contrib = tc.scatter_rows(weighted, t_idx, n)
        y = contrib if y is None else tc.add(y, contrib)
    if y is None:
        y = tc.const(np.zeros((n, inner_width)))

    if params.variant == BIGMAC:
        y = tc.matmul(y, params.outer_up)
    return y, probs


def moe_forward(x: Tensor, params: MoEParams, plan: RoutingPlan) -> Tensor:
    """Full block forward for a plan produced by ``route`` on the same x."""
    y, _ = _forward_parts(x, params, plan)
    return y


def aux_load_balance_loss(plan: RoutingPlan, alpha: float) -> float:
    """Balance penalty alpha * e * sum_i f_i * P_i.

    f_i is the fraction of token-slot assignments (drops included) hitting
    expert i; P_i is the mean router probability of expert i. Uniform
    routing with uniform probabilities gives exactly alpha.
    """
    if plan.full_probs is None:
        raise ContractError("plan carries no router probabilities "
                            "(synthetic routing mode)")
    e = plan.num_experts
    counts = np.bincount(plan.expert_idx.reshape(-1), minlength=e)
    frac = counts / plan.assignments
    mean_probs = plan.full_probs.mean(axis=0)
    return float(alpha * e * np.dot(frac, mean_probs))


def aux_loss_tensor(probs: Tensor, plan: RoutingPlan, alpha: float) -> Tensor:
    """Differentiable balance penalty; gradient flows through the mean
    probabilities only, the assignment fractions enter as constants."""
    e = plan.num_experts
    counts = np.bincount(plan.expert_idx.reshape(-1), minlength=e)
    frac = counts / plan.assignments
    weights = tc.const(np.broadcast_to(frac, probs.shape).copy())
    return tc.scale(tc.sum_all(tc.mul(probs, weights)),
                    alpha * e / plan.num_tokens)


def save_params(params: MoEParams, path: str) -> None:
    """Write a one-line JSON header plus flat little-endian float64 data.

    Offsets in the header count elements into the flat buffer, one entry
    per matrix in serialization order.
    """
    named: list[tuple[str, Tensor]] = [("router_weight", params.router_weight)]
    if params.outer_down is not None:
        named.append(("outer_down", params.outer_down))
    if params.outer_up is not None:
        named.append(("outer_up", params.outer_up))
    for i, (first, second) in enumerate(params.experts):
        named.append((f"expert_{i}_first", first))
        named.append((f"expert_{i}_second", second))

    matrices = []
    offset = 0
    for name, t in named:
        matrices.append({"name": name, "shape": list(t.shape),
                         "offset": offset})
        offset += int(t.data.size)
    header = {
        "format": "moelab-weights",
        "version": 1,
        "variant": params.variant,
        "h": params.h,
        "num_experts": params.num_experts,
        "matrices": matrices,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path: str) -> MoEParams:
    """Inverse of ``save_params``; weights round-trip bitwise."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("ascii"))
    if header.get("format") != "moelab-weights":
        raise ValueError(f"{path}: not a weight snapshot")
    flat = np.frombuffer(blob, dtype="<f8")
    mats: dict[str, Tensor] = {}
    for entry in header["matrices"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        start = entry["offset"]
        if start + size > flat.size:
            raise ValueError(f"{path}: matrix {entry['name']} overruns "
                             f"the data section")
        data = flat[start:start + size].reshape(shape).astype(np.float64)
        mats[entry["name"]] = Tensor(data, requires_grad=True)
    experts = []
    for i in range(header["num_experts"]):
        if f"expert_{i}_first" not in mats:
            break
        experts.append((mats[f"expert_{i}_first"], mats[f"expert_{i}_second"]))
    return MoEParams(header["variant"], mats["router_weight"], experts,
                     outer_down=mats.get("outer_down"),
                     outer_up=mats.get("outer_up"))


def gradcheck_block(cfg: ModelConfig, variant: str, seed: int = 0,
                    n_tokens: int = 6, eps: float = 1e-5) -> float:
    """Worst relative error between autodiff and central differences over
    every weight of one randomly initialized block.

    The loss is the plain sum of the block output. The numerical path
    reruns routing and the forward pass per probe, so it exercises the
    complete pipeline, not a frozen subgraph.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, variant, rng)
    k = min(cfg.top_k, params.num_experts)
    x = tc.const(rng.uniform(-1.0, 1.0, size=(n_tokens, cfg.h)))

    def loss_value(_arr: np.ndarray | None = None) -> float:
        plan = route(x.data, params, k)
        y = moe_forward(x, params, plan)
        return float(y.data.sum())

    plan = route(x.data, params, k)
    loss = tc.sum_all(moe_forward(x, params, plan))
    for t in params.trainables():
        t.zero_grad()
    loss.backward()

    worst = 0.0
    for t in params.trainables():
        numeric = tc.finite_diff_grad(loss_value, t.data, eps=eps)
        worst = max(worst, tc.max_rel_error(t.grad, numeric))
    return worst

"""Expert-parallelism simulator: placement, traffic manifests, alpha-beta
latency.

The simulator never materializes expert compute. It builds a routing plan,
counts which (source device, destination device) pairs exchange tokens in
the dispatch and combine all-to-all phases, and prices the result under an
alpha-beta network model plus an aggregate FLOP throughput term. Tokens
travel at width h for fine_grained and width r*h for bigmac; the plan
itself is variant-independent, which is what makes the byte ratio between
the variants exactly r for identical seeds.

Per-phase latency is alpha + max-device-egress / beta, the bottleneck
device paying for the whole phase; a phase with no cross-device traffic
costs nothing. Training totals double communication (gradients retrace
both all-to-alls) and triple compute (forward plus both backward matmuls).
Compute covers the expert matmuls, the router scoring pass, and for bigmac
the shared outer projections; everything is divided by the aggregate
throughput ep * device_flops.

All randomness flows through one seeded generator per call, so identical
(cfg, variant, mode, seed) always reproduce the identical report. Pure
functions throughout; fan-out across processes is safe but not built in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from . import tensor_core as tc
from .config import BIGMAC, FINE_GRAINED, ConfigError, CostModel, ModelConfig
from .moe_block import RoutingPlan, apply_capacity

ROUTING_MODES = ("learned", "uniform_random", "local_only", "single_expert")
SIM_VARIANTS = (FINE_GRAINED, BIGMAC)

# CSV schema for serialized reports, in emission order.
CSV_COLUMNS = ("variant", "top_k", "ep", "r", "mode", "a2a_bytes_fwd",
               "a2a_bytes_bwd", "a2a_latency_s", "compute_s", "total_s",
               "drops")

_LEARNED_CHUNK = 8192
_SCORE_CHUNK = 65536


@dataclass(frozen=True)
class Placement:
    """Contiguous expert and token shards over ep devices."""

    ep: int
    expert_device: np.ndarray  # device index per expert
    tokens_per_device: int

    def token_device(self, token_idx: np.ndarray) -> np.ndarray:
        return token_idx // self.tokens_per_device


def build_placement(cfg: ModelConfig, n_tokens: int | None = None) -> Placement:
    """Expert i lives on device i // (e/ep); token shards are contiguous."""
    n = cfg.b_tokens if n_tokens is None else n_tokens
    if n % cfg.ep != 0:
        raise ConfigError(f"{n} tokens do not shard evenly over "
                          f"ep={cfg.ep} devices")
    per_dev = cfg.e // cfg.ep
    expert_device = np.arange(cfg.e, dtype=np.int64) // per_dev
    return Placement(cfg.ep, expert_device, n // cfg.ep)


@dataclass(frozen=True)
class DispatchManifest:
    """Assignment counts per (source device, destination device) for one
    all-to-all phase, plus the width of each transferred element."""

    phase: str
    counts: np.ndarray  # ep x ep, int64
    element_dim: int
    bytes_per_element: int


def build_manifest(plan: RoutingPlan, placement: Placement, cfg: ModelConfig,
                   variant: str, phase: str = "dispatch") -> DispatchManifest:
    """Count surviving assignments crossing each device pair.

    The combine phase is the exact transpose of dispatch: every token that
    traveled to an expert travels back.
    """
    if variant not in SIM_VARIANTS:
        raise ConfigError(f"simulator models {SIM_VARIANTS}, got {variant!r}")
    if phase not in ("dispatch", "combine"):
        raise ConfigError(f"unknown phase {phase!r}")
    n, k = plan.num_tokens, plan.top_k
    token_idx = np.repeat(np.arange(n, dtype=np.int64), k)
    src = placement.token_device(token_idx)
    dst = placement.expert_device[plan.expert_idx.reshape(-1)]
    keep = ~plan.dropped.reshape(-1)
    counts = kernels.pair_counts(src, dst, keep, placement.ep)
    if phase == "combine":
        counts = counts.T.copy()
    element_dim = cfg.rh if variant == BIGMAC else cfg.h
    return DispatchManifest(phase, counts, element_dim, cfg.bytes_per_element)


def a2a_bytes(manifest: DispatchManifest) -> tuple[int, np.ndarray]:
    """Total cross-device bytes and the per-device egress byte vector.

    Diagonal (device-local) assignments move no bytes.
    """
    cross = manifest.counts.copy()
    np.fill_diagonal(cross, 0)
    per_element = manifest.element_dim * manifest.bytes_per_element
    egress = cross.sum(axis=1) * per_element
    return int(egress.sum()), egress


@dataclass(frozen=True)
class SimReport:
    """Priced outcome of one simulated MoE layer iteration."""

    variant: str
    top_k: int
    ep: int
    r: float
    mode: str
    a2a_bytes_fwd: int
    a2a_bytes_bwd: int
    a2a_latency_s: float
    compute_s: float
    total_s: float
    drops: int
    egress_dispatch: tuple[int, ...]
    egress_combine: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "top_k": self.top_k,
            "ep": self.ep,
            "r": self.r,
            "mode": self.mode,
            "a2a_bytes_fwd": self.a2a_bytes_fwd,
            "a2a_bytes_bwd": self.a2a_bytes_bwd,
            "a2a_latency_s": self.a2a_latency_s,
            "compute_s": self.compute_s,
            "total_s": self.total_s,
            "drops": self.drops,
            "egress_dispatch": list(self.egress_dispatch),
            "egress_combine": list(self.egress_combine),
        }


def _phase_time(total_bytes: int, egress: np.ndarray, cost: CostModel) -> float:
    if total_bytes == 0:
        return 0.0
    return cost.alpha_s + float(egress.max()) / cost.beta_Bps


def estimate_latency(dispatch: DispatchManifest, combine: DispatchManifest,
                     cost: CostModel, cfg: ModelConfig, variant: str, *,
                     mode: str, top_k: int, n_tokens: int,
                     drop_count: int) -> SimReport:
    """Price one training iteration of one MoE layer from its manifests."""
    bytes_d, egress_d = a2a_bytes(dispatch)
    bytes_c, egress_c = a2a_bytes(combine)
    fwd = bytes_d + bytes_c
    latency = 2.0 * (_phase_time(bytes_d, egress_d, cost)
                     + _phase_time(bytes_c, egress_c, cost))

    survivors = int(dispatch.counts.sum())
    expert_macs = 2 * cfg.rh * cfg.h  # per surviving assignment
    flops = 2.0 * survivors * expert_macs
    flops += 2.0 * n_tokens * cfg.h * cfg.e  # router scoring, top_k-free
    if variant == BIGMAC:
        flops += 2.0 * n_tokens * expert_macs  # shared outer projections
    compute = 3.0 * flops / (cfg.ep * cost.device_flops)

    return SimReport(
        variant=variant, top_k=top_k, ep=cfg.ep, r=cfg.r, mode=mode,
        a2a_bytes_fwd=fwd, a2a_bytes_bwd=fwd,
        a2a_latency_s=latency, compute_s=compute,
        total_s=latency + compute, drops=drop_count,
        egress_dispatch=tuple(int(b) for b in egress_d),
        egress_combine=tuple(int(b) for b in egress_c),
    )


def synthetic_plan(cfg: ModelConfig, mode: str, seed: int,
                   n_tokens: int | None = None) -> RoutingPlan:
    """Build a routing plan without running a real model.

    learned draws a random router and random token activations and routes
    through the usual softmax top-k; the other modes place assignments
    directly. Gates are uniform 1/top_k for the synthetic modes and only
    the learned mode is input-dependent. Capacity is not applied here.
    """
    if mode not in ROUTING_MODES:
        raise ConfigError(f"unknown routing mode {mode!r}")
    n = cfg.b_tokens if n_tokens is None else n_tokens
    e, k = cfg.e, cfg.top_k
    rng = np.random.default_rng(seed)

    if mode == "learned":
        router = rng.normal(0.0, cfg.h ** -0.5, size=(cfg.h, e))
        chunks_idx = []
        chunks_gate = []
        for start in range(0, n, _LEARNED_CHUNK):
            m = min(_LEARNED_CHUNK, n - start)
            x = rng.normal(0.0, 1.0, size=(m, cfg.h))
            probs = tc.softmax_rows_np(x @ router)
            idx = kernels.topk_desc(probs, k)
            selected = np.take_along_axis(probs, idx, axis=1)
            chunks_idx.append(idx)
            chunks_gate.append(selected / selected.sum(axis=1, keepdims=True))
        expert_idx = np.concatenate(chunks_idx, axis=0)
        gates = np.concatenate(chunks_gate, axis=0)
    elif mode == "uniform_random":
        chunks_idx = []
        for start in range(0, n, _SCORE_CHUNK):
            m = min(_SCORE_CHUNK, n - start)
            scores = rng.random((m, e))
            chunks_idx.append(kernels.topk_desc(scores, k))
        expert_idx = np.concatenate(chunks_idx, axis=0)
        gates = np.full((n, k), 1.0 / k)
    elif mode == "local_only":
        per_dev = cfg.e // cfg.ep
        if k > per_dev:
            raise ConfigError(f"local_only needs top_k <= e/ep "
                              f"({per_dev}), got top_k={k}")
        if n % cfg.ep != 0:
            raise ConfigError(f"{n} tokens do not shard evenly over "
                              f"ep={cfg.ep} devices")
        dev = np.arange(n, dtype=np.int64) // (n // cfg.ep)
        expert_idx = dev[:, None] * per_dev + np.arange(k, dtype=np.int64)
        gates = np.full((n, k), 1.0 / k)
    else:  # single_expert: every token piles onto the first k experts
        expert_idx = np.broadcast_to(np.arange(k, dtype=np.int64),
                                     (n, k)).copy()
        gates = np.full((n, k), 1.0 / k)

    dropped = np.zeros((n, k), dtype=bool)
    return RoutingPlan(expert_idx, gates, dropped, num_experts=e,
                       full_probs=None)


def report_for_plan(plan: RoutingPlan, cfg: ModelConfig, variant: str,
                    cost: CostModel, mode: str) -> SimReport:
    """Capacity, manifests, and pricing for an already-built plan."""
    plan = apply_capacity(plan, cfg)
    placement = build_placement(cfg, n_tokens=plan.num_tokens)
    dispatch = build_manifest(plan, placement, cfg, variant, "dispatch")
    combine = build_manifest(plan, placement, cfg, variant, "combine")
    return estimate_latency(dispatch, combine, cost, cfg, variant,
                            mode=mode, top_k=plan.top_k,
                            n_tokens=plan.num_tokens,
                            drop_count=plan.drop_count)


def simulate_layer(cfg: ModelConfig, variant: str, mode: str, seed: int,
                   cost: CostModel) -> SimReport:
    """One layer, one iteration, one variant, fully determined by seed."""
    if variant not in SIM_VARIANTS:
        raise ConfigError(f"simulator models {SIM_VARIANTS}, got {variant!r}")
    plan = synthetic_plan(cfg, mode, seed)
    return report_for_plan(plan, cfg, variant, cost, mode)


def sweep_topk(cfg: ModelConfig, cost: CostModel, topk_list: list[int],
               mode: str = "uniform_random", seed: int = 0,
               variants: tuple[str, ...] = SIM_VARIANTS) -> list[SimReport]:
    """Reports for every (top_k, variant) pair.

    The plan is built once per top_k and shared across variants, so paired
    rows differ only in element width.
    """
    reports = []
    for k in topk_list:
        cfg_k = replace(cfg, top_k=k)
        cfg_k.validate()
        plan = synthetic_plan(cfg_k, mode, seed)
        for variant in variants:
            reports.append(report_for_plan(plan, cfg_k, variant, cost, mode))
    return reports


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def reports_to_csv(reports: list[SimReport],
                   extra: list[dict] | None = None) -> str:
    """Flat CSV, one row per report; floats use round-trip repr.

    ``extra`` optionally appends per-report columns (same order as
    reports); every extra dict must share one key set.
    """
    columns = list(CSV_COLUMNS)
    extras = extra or [{} for _ in reports]
    if extras and extras[0]:
        columns += list(extras[0].keys())
    lines = [",".join(columns)]
    for rep, ext in zip(reports, extras):
        row = rep.to_dict()
        row.update(ext)
        lines.append(",".join(_format_cell(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def reports_to_json(reports: list[SimReport],
                    extra: list[dict] | None = None) -> str:
    extras = extra or [{} for _ in reports]
    payload = []
    for rep, ext in zip(reports, extras):
        row = rep.to_dict()
        row.update(ext)
        payload.append(row)
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"

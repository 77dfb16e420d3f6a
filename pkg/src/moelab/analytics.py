"""Closed-form parameter, FLOP, and all-to-all accounting.

Whole-model counts for a transformer stack whose FFNs are MoE layers, in
the fine_grained and bigmac structural variants. The formulas are kept in
their published accounting convention even where that convention differs
from what a constructed bias-free block would count; the differences are
small, systematic, and called out in the report footnotes rather than
silently repaired, so formula outputs stay comparable with the reference
numbers they reproduce.

Conventions worth knowing before reading the code:

- params: attention contributes 4h^2 + 8h per layer; each expert counts
  2*r*h^2 + 2*r*h (the 2*r*h rider is the convention noted above); the
  embedding-style term (v + e + 2) * h is counted once, outside the layer
  factor. bigmac adds the shared outer projections, 2*r*h^2 per layer.
- flops: 12 * tokens * l * h^2 * (2 + s/h + v/(2*l*h) + r*top_k), with
  bigmac adding 12 * r * tokens * l * h^2 for the outer projections.
- a2a: each routed token crosses devices with probability (ep-1)/ep; two
  phases per direction, forward and backward, at bytes_per_element per
  element. bigmac moves r*h-wide elements instead of h-wide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .config import BIGMAC, FINE_GRAINED, ConfigError, ModelConfig

GIB = 1024 ** 3


def _check_variant(variant: str) -> None:
    if variant not in (FINE_GRAINED, BIGMAC):
        raise ConfigError(f"accounting covers {FINE_GRAINED!r} and "
                          f"{BIGMAC!r}, got {variant!r}")


def param_count_formula(cfg: ModelConfig, variant: str) -> int:
    """Whole-model parameter count, exact integer."""
    _check_variant(variant)
    h, rh, e, l, v = cfg.h, cfg.rh, cfg.e, cfg.l, cfg.v
    per_layer = 4 * h * h + 8 * h + (2 * rh * h + 2 * rh) * e
    if variant == BIGMAC:
        per_layer += 2 * rh * h
    return per_layer * l + (v + e + 2) * h


def flops_base(cfg: ModelConfig) -> float:
    """Training FLOPs of everything except the expert matmuls."""
    coef = 12.0 * cfg.b_tokens * cfg.l * cfg.h * cfg.h
    return coef * (2.0 + cfg.s / cfg.h + cfg.v / (2.0 * cfg.l * cfg.h))


def flops_formula(cfg: ModelConfig, variant: str) -> float:
    """Whole-model training FLOPs per iteration."""
    _check_variant(variant)
    coef = 12.0 * cfg.b_tokens * cfg.l * cfg.h * cfg.h
    total = flops_base(cfg) + coef * (cfg.r * cfg.top_k)
    if variant == BIGMAC:
        total += coef * cfg.r
    return total


def a2a_volume(cfg: ModelConfig, variant: str = FINE_GRAINED) -> int:
    """Cross-device element count of one layer, one direction.

    Two all-to-all phases (dispatch and combine), top_k slots per token, a
    (ep-1)/ep chance of leaving the device, element width h (or r*h for
    bigmac). Exact integer because b_tokens shards evenly over ep.
    """
    _check_variant(variant)
    width = cfg.rh if variant == BIGMAC else cfg.h
    return 2 * cfg.top_k * (cfg.b_tokens // cfg.ep) * (cfg.ep - 1) * width


def a2a_transfer_formula(cfg: ModelConfig, variant: str) -> int:
    """Whole-model all-to-all bytes per training iteration.

    Equals a2a_volume * bytes_per_element * l layers * 2 directions; the
    classic leading 8 is 2 phases * 2 directions * 2 bytes at the default
    precision, so other precisions rescale through bytes_per_element.
    """
    return a2a_volume(cfg, variant) * cfg.bytes_per_element * cfg.l * 2


@dataclass(frozen=True)
class AnalyticsReport:
    """Side-by-side accounting for both variants under one config."""

    cfg: ModelConfig
    params: dict
    flops: dict
    a2a_bytes: dict
    deltas: dict
    footnotes: tuple


def _delta(fg, bm) -> float:
    return (bm - fg) / fg


def analyze(cfg: ModelConfig) -> AnalyticsReport:
    params = {v: param_count_formula(cfg, v) for v in (FINE_GRAINED, BIGMAC)}
    flops = {v: flops_formula(cfg, v) for v in (FINE_GRAINED, BIGMAC)}
    bytes_ = {v: a2a_transfer_formula(cfg, v) for v in (FINE_GRAINED, BIGMAC)}
    deltas = {
        "params": _delta(params[FINE_GRAINED], params[BIGMAC]),
        "flops": _delta(flops[FINE_GRAINED], flops[BIGMAC]),
        "a2a_bytes": _delta(bytes_[FINE_GRAINED], bytes_[BIGMAC]),
    }
    rh = cfg.rh
    footnotes = (
        f"params counts the embedding-style term (v+e+2)*h once, outside "
        f"the per-layer factor.",
        f"params grants each expert 2*r*h^2 + 2*r*h; constructed blocks "
        f"are bias-free, so an actual expert holds 2*r*h^2 = {2 * rh * cfg.h} "
        f"weights and the 2*r*h = {2 * rh} rider is accounting convention.",
    )
    return AnalyticsReport(cfg, params, flops, bytes_, deltas, footnotes)


def report_to_json(report: AnalyticsReport) -> str:
    payload = {
        "config": {
            "b_tokens": report.cfg.b_tokens, "s": report.cfg.s,
            "h": report.cfg.h, "e": report.cfg.e, "top_k": report.cfg.top_k,
            "f": report.cfg.f, "ep": report.cfg.ep, "r": report.cfg.r,
            "l": report.cfg.l, "v": report.cfg.v,
            "bytes_per_element": report.cfg.bytes_per_element,
        },
        "params": report.params,
        "flops": report.flops,
        "a2a_bytes": report.a2a_bytes,
        "a2a_gib": {k: v / GIB for k, v in report.a2a_bytes.items()},
        "deltas": report.deltas,
        "footnotes": list(report.footnotes),
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def report_to_csv(report: AnalyticsReport) -> str:
    lines = ["variant,param_count,flops,a2a_bytes,a2a_gib"]
    for v in (FINE_GRAINED, BIGMAC):
        lines.append(",".join([
            v,
            str(report.params[v]),
            repr(report.flops[v]),
            str(report.a2a_bytes[v]),
            repr(report.a2a_bytes[v] / GIB),
        ]))
    return "\n".join(lines) + "\n"


def report_to_text(report: AnalyticsReport) -> str:
    """Aligned three-row comparison table with delta column."""
    fg, bm = FINE_GRAINED, BIGMAC
    rows = [
        ("#Param",
         f"{report.params[fg]:,}",
         f"{report.params[bm]:,}",
         f"{report.deltas['params']:+.2%}"),
        ("#FLOPs",
         f"{report.flops[fg] / 1e12:,.2f} T",
         f"{report.flops[bm] / 1e12:,.2f} T",
         f"{report.deltas['flops']:+.2%}"),
        ("#A2A",
         f"{report.a2a_bytes[fg] / GIB:,.2f} GiB",
         f"{report.a2a_bytes[bm] / GIB:,.2f} GiB",
         f"{report.deltas['a2a_bytes']:+.2%}"),
    ]
    header = ("metric", "fine_grained", "bigmac", "delta")
    widths = [max(len(header[i]), *(len(r[i]) for r in rows))
              for i in range(4)]
    def fmt(row):
        return "  ".join(cell.rjust(widths[i]) if i else cell.ljust(widths[i])
                         for i, cell in enumerate(row))
    lines = [fmt(header), fmt(tuple("-" * w for w in widths))]
    lines += [fmt(r) for r in rows]
    lines.append("")
    for i, note in enumerate(report.footnotes, start=1):
        lines.append(f"[{i}] {note}")
    return "\n".join(lines) + "\n"

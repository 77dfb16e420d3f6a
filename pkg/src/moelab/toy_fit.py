"""End-to-end trainability check: regress a frozen random teacher.

One MoE block plus a linear readout, trained with plain full-batch SGD
against the outputs of a frozen fine_grained teacher block on a fixed
synthetic dataset. Each structural variant trains from its own random
init at a matched expert-parameter budget; the point is not benchmark
accuracy but that gradients assembled from routing, capacity drops, gate
renormalization, and the balance penalty actually descend.

Everything is seeded and full-batch, so a run is a pure function of
(cfg, steps, lr, seed, use_aux) and repeated runs match bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .config import FINE_GRAINED, VARIANTS, ModelConfig
from .moe_block import (MoEParams, _forward_parts, apply_capacity,
                        aux_loss_tensor, init_params, route)
from .tensor_core import Tensor

AUX_ALPHA = 0.001
N_SAMPLES = 256
D_OUT = 8


@dataclass
class ToyFitResult:
    """Loss trajectories per variant; index t is the objective before
    update t, with one trailing entry after the final update."""

    losses: dict
    diverged: list

    def initial(self, variant: str) -> float:
        return self.losses[variant][0]

    def final(self, variant: str) -> float:
        return self.losses[variant][-1]


def _make_teacher(cfg: ModelConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Frozen teacher targets on the shared dataset, dropless."""
    teacher = init_params(cfg, FINE_GRAINED, rng)
    readout = rng.normal(0.0, cfg.h ** -0.5, size=(cfg.h, D_OUT))
    x = rng.uniform(-1.0, 1.0, size=(N_SAMPLES, cfg.h))
    plan = route(x, teacher, min(cfg.top_k, teacher.num_experts))
    y, _ = _forward_parts(tc.const(x), teacher, plan)
    return x, y.data @ readout


def _train_variant(cfg: ModelConfig, variant: str, x: np.ndarray,
                   targets: np.ndarray, steps: int, lr: float,
                   use_aux: bool, rng: np.random.Generator,
                   ) -> tuple[list[float], bool]:
    params = init_params(cfg, variant, rng)
    readout = Tensor(rng.normal(0.0, cfg.h ** -0.5, size=(cfg.h, D_OUT)),
                     requires_grad=True)
    weights = params.trainables() + [readout]
    k = min(cfg.top_k, params.num_experts)
    xc = tc.const(x)
    target = tc.const(targets)
    inv_n = 1.0 / (N_SAMPLES * D_OUT)

    losses: list[float] = []
    for _ in range(steps + 1):
        plan = apply_capacity(route(x, params, k), cfg)
        block_out, probs = _forward_parts(xc, params, plan)
        pred = tc.matmul(block_out, readout)
        diff = tc.sub(pred, target)
        loss = tc.scale(tc.sum_all(tc.mul(diff, diff)), inv_n)
        if use_aux:
            loss = tc.add(loss, aux_loss_tensor(probs, plan, AUX_ALPHA))
        value = float(loss.data)
        losses.append(value)
        if not np.isfinite(value):
            return losses, True
        if len(losses) == steps + 1:
            break  # final evaluation only, no trailing update
        for w in weights:
            w.zero_grad()
        loss.backward()
        for w in weights:
            w.data -= lr * w.grad
    return losses, False


def run_toy_fit(cfg: ModelConfig, steps: int = 500, lr: float = 0.05,
                seed: int = 1234, use_aux: bool = True) -> ToyFitResult:
    """Train all three variants against one shared teacher and dataset."""
    rng = np.random.default_rng([seed, 0])
    x, targets = _make_teacher(cfg, rng)
    losses: dict = {}
    diverged: list = []
    for i, variant in enumerate(VARIANTS):
        rng_v = np.random.default_rng([seed, 1 + i])
        traj, blew_up = _train_variant(cfg, variant, x, targets, steps, lr,
                                       use_aux, rng_v)
        losses[variant] = traj
        if blew_up:
            diverged.append(variant)
    return ToyFitResult(losses, diverged)

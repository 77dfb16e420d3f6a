"""Block-level tests: routing, capacity, forward math, balance loss,
weight snapshots.

Expected values come from longhand oracles in this file (direct softmax
formula, plain numpy forward chains, hand-counted capacity cases), never
from the code under test.
"""

import math

import numpy as np
import pytest

from moelab import moe_block as mb
from moelab import tensor_core as tc
from moelab.config import BIGMAC, FINE_GRAINED, VANILLA, ConfigError, ModelConfig
from moelab.moe_block import ContractError, MoEParams, RoutingPlan
from moelab.tensor_core import Tensor


def _softmax_oracle(row):
    exps = [math.exp(v) for v in row]
    z = sum(exps)
    return np.array([v / z for v in exps])


def _params_with_logit_row(logits, e, h=4, rh=2):
    """Router whose first input coordinate produces the given logits."""
    w = np.zeros((h, e))
    w[0, :] = logits
    router = Tensor(w, requires_grad=True)
    experts = [(Tensor(np.zeros((h, rh))), Tensor(np.zeros((rh, h))))
               for _ in range(e)]
    return MoEParams(FINE_GRAINED, router, experts)


class TestRoute:
    def test_gate_oracle(self):
        params = _params_with_logit_row([2.0, 1.0, 0.0, -1.0], e=4)
        x = np.array([[1.0, 0.0, 0.0, 0.0]])
        plan = mb.route(x, params, top_k=2)
        assert plan.expert_idx.tolist() == [[0, 1]]
        p = _softmax_oracle([2.0, 1.0, 0.0, -1.0])
        want = np.array([p[0], p[1]]) / (p[0] + p[1])
        assert np.max(np.abs(plan.gates[0] - want)) <= 1e-12
        # the frozen reference values
        assert plan.gates[0, 0] == pytest.approx(0.7311, abs=1e-4)
        assert plan.gates[0, 1] == pytest.approx(0.2689, abs=1e-4)

    def test_single_expert_gate_is_exactly_one(self):
        params = _params_with_logit_row([0.3, -0.2], e=2)
        plan = mb.route(np.ones((3, 4)), params, top_k=1)
        assert np.all(plan.gates == 1.0)

    def test_tied_logits_pick_lower_index(self):
        params = _params_with_logit_row([0.7, 0.7, 0.7, 0.1], e=4)
        plan = mb.route(np.array([[1.0, 0, 0, 0]]), params, top_k=2)
        assert plan.expert_idx.tolist() == [[0, 1]]

    def test_gates_renormalized_and_ordered(self):
        rng = np.random.default_rng(0)
        cfg = ModelConfig(h=16, e=8, top_k=3, ep=1, r=0.25, b_tokens=32)
        params = mb.init_params(cfg, FINE_GRAINED, rng)
        plan = mb.route(rng.uniform(-1, 1, (32, 16)), params, cfg.top_k)
        sums = plan.gates.sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) <= 1e-12
        assert np.all(np.diff(plan.gates, axis=1) <= 0.0)
        assert np.max(np.abs(plan.full_probs.sum(axis=1) - 1.0)) <= 1e-12

    def test_plan_ignores_expert_weights(self):
        rng = np.random.default_rng(3)
        cfg = ModelConfig(h=16, e=8, top_k=2, ep=1, r=0.25, b_tokens=16)
        x = rng.uniform(-1, 1, (16, 16))
        for variant in (FINE_GRAINED, BIGMAC):
            for trial in range(10):
                params = mb.init_params(cfg, variant,
                                        np.random.default_rng(trial))
                before = mb.route(x, params, cfg.top_k)
                for t in params.trainables():
                    if t is not params.router_weight:
                        t.data += rng.normal(size=t.shape)
                after = mb.route(x, params, cfg.top_k)
                assert np.array_equal(before.expert_idx, after.expert_idx)
                assert np.array_equal(before.gates, after.gates)
                assert np.array_equal(before.full_probs, after.full_probs)

    def test_route_is_deterministic(self):
        rng = np.random.default_rng(9)
        cfg = ModelConfig(h=8, e=4, top_k=2, ep=1, r=0.5, b_tokens=8)
        params = mb.init_params(cfg, FINE_GRAINED, rng)
        x = rng.uniform(-1, 1, (8, 8))
        a, b = mb.route(x, params, 2), mb.route(x, params, 2)
        assert np.array_equal(a.expert_idx, b.expert_idx)
        assert np.array_equal(a.gates, b.gates)

    def test_shape_and_topk_errors(self):
        params = _params_with_logit_row([1.0, 2.0], e=2)
        with pytest.raises(ContractError):
            mb.route(np.ones((3, 5)), params, 1)
        with pytest.raises(ConfigError):
            mb.route(np.ones((3, 4)), params, 3)
        with pytest.raises(ConfigError):
            mb.route(np.ones((3, 4)), params, 0)


class TestCapacity:
    def _plan_all_to_expert(self, tokens, e, target=0):
        idx = np.full((tokens, 1), target, dtype=np.int64)
        gates = np.ones((tokens, 1))
        return RoutingPlan(idx, gates, np.zeros_like(idx, dtype=bool), e)

    def test_budget_formula(self):
        assert mb.expert_capacity(1.0, 8, 1, 4) == 2
        assert mb.expert_capacity(1.2, 8192, 1, 64) == 154  # ceil(153.6)
        assert mb.expert_capacity(math.inf, 8, 1, 4) is None

    def test_overflow_drops_hand_case(self):
        # 8 tokens all routed to expert 0 of 4, f=1: capacity 2, 6 drops,
        # and the survivors are tokens 0 and 1
        cfg = ModelConfig(h=4, e=4, top_k=1, ep=1, r=0.5, b_tokens=8, f=1.0)
        plan = mb.apply_capacity(self._plan_all_to_expert(8, 4), cfg)
        assert plan.drop_count == 6
        assert plan.dropped.ravel().tolist() == [False, False] + [True] * 6

    def test_balanced_load_never_drops(self):
        cfg = ModelConfig(h=4, e=4, top_k=1, ep=1, r=0.5, b_tokens=8, f=1.0)
        idx = (np.arange(8, dtype=np.int64) % 4).reshape(8, 1)
        plan = RoutingPlan(idx, np.ones((8, 1)),
                           np.zeros((8, 1), dtype=bool), 4)
        assert mb.apply_capacity(plan, cfg).drop_count == 0

    def test_dropless_factor(self):
        cfg = ModelConfig(h=4, e=4, top_k=1, ep=1, r=0.5, b_tokens=8,
                          f=math.inf)
        plan = mb.apply_capacity(self._plan_all_to_expert(8, 4), cfg)
        assert plan.drop_count == 0

    def test_drop_sets_nest_as_factor_grows(self):
        rng = np.random.default_rng(21)
        idx = rng.integers(0, 4, (64, 2))
        base = RoutingPlan(idx, np.full((64, 2), 0.5),
                           np.zeros((64, 2), dtype=bool), 4)
        factors = [1.0, 1.2, 2.0, math.inf]
        previous = None
        for f in factors:
            cfg = ModelConfig(h=4, e=4, top_k=2, ep=1, r=0.5, b_tokens=64, f=f)
            dropped = mb.apply_capacity(base, cfg).dropped
            if previous is not None:
                # growing f can only rescue assignments, never drop new ones
                assert np.all(previous | ~dropped), f"f={f} dropped new slots"
            previous = dropped

    def test_existing_drops_survive(self):
        cfg = ModelConfig(h=4, e=4, top_k=1, ep=1, r=0.5, b_tokens=8,
                          f=math.inf)
        plan = self._plan_all_to_expert(8, 4)
        plan.dropped[3] = True
        out = mb.apply_capacity(plan, cfg)
        assert out.dropped[3, 0] and out.drop_count == 1


class TestExpertForward:
    def test_matches_longhand_chain(self):
        rng = np.random.default_rng(5)
        w1 = rng.uniform(-1, 1, (4, 2))
        w2 = rng.uniform(-1, 1, (2, 4))
        params = MoEParams(FINE_GRAINED, Tensor(np.zeros((4, 1))),
                           [(Tensor(w1), Tensor(w2))])
        x = rng.uniform(-1, 1, (3, 4))
        got = mb.expert_forward(tc.const(x), params, 0).data
        hidden = np.maximum(x @ w1, 0.0)
        want = hidden @ w2
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_zero_input_gives_zero(self):
        params = MoEParams(FINE_GRAINED, Tensor(np.zeros((4, 1))),
                           [(Tensor(np.ones((4, 2))), Tensor(np.ones((2, 4))))])
        got = mb.expert_forward(tc.const(np.zeros((2, 4))), params, 0).data
        assert np.array_equal(got, np.zeros((2, 4)))

    def test_width_contract_error_names_width(self):
        params = MoEParams(FINE_GRAINED, Tensor(np.zeros((4, 1))),
                           [(Tensor(np.zeros((4, 2))), Tensor(np.zeros((2, 4))))])
        with pytest.raises(ContractError) as exc:
            mb.expert_forward(tc.const(np.zeros((2, 3))), params, 0)
        assert "width 4" in str(exc.value)


class TestParamCounts:
    def test_frozen_tiny_goldens(self):
        # h=4, rh=2, e=2: fine-grained 4*2 + 2*(4*2 + 2*4) = 40,
        # bigmac adds the two 4x2 outer projections: 40 + 16 = 56
        cfg = ModelConfig(h=4, e=2, top_k=1, ep=1, r=0.5, b_tokens=8)
        rng = np.random.default_rng(0)
        fg = mb.param_count_constructed(mb.init_params(cfg, FINE_GRAINED, rng))
        bm = mb.param_count_constructed(mb.init_params(cfg, BIGMAC, rng))
        assert fg == 40
        assert bm == 56

    def test_per_expert_parity(self):
        for h, rh in ((8, 4), (16, 4), (2048, 512)):
            assert mb.expert_param_count(h, rh) == 2 * h * rh
            assert mb.expert_mac_count(h, rh) == 2 * h * rh

    def test_constructed_expert_sizes_match_both_variants(self):
        cfg = ModelConfig(h=16, e=4, top_k=2, ep=1, r=0.25, b_tokens=16)
        rng = np.random.default_rng(1)
        fg = mb.init_params(cfg, FINE_GRAINED, rng)
        bm = mb.init_params(cfg, BIGMAC, rng)
        for (f1, f2), (b1, b2) in zip(fg.experts, bm.experts):
            assert f1.data.size + f2.data.size == b1.data.size + b2.data.size
            assert f1.data.size + f2.data.size == mb.expert_param_count(16, 4)

    def test_vanilla_geometry(self):
        assert mb.vanilla_expert_count(64) == 8
        assert mb.vanilla_expert_count(8) == 1
        assert mb.vanilla_expert_count(4) == 1
        # total expert capacity is conserved: e_v * h_f == e * rh
        assert mb.vanilla_hidden(16, 4, 16) * mb.vanilla_expert_count(16) == 64
        cfg = ModelConfig(h=16, e=16, top_k=2, ep=1, r=0.25, b_tokens=16)
        params = mb.init_params(cfg, VANILLA, np.random.default_rng(0))
        assert params.num_experts == 2
        first, second = params.experts[0]
        assert first.shape == (16, 32) and second.shape == (32, 16)


def _dense_oracle_fine_grained(x, params):
    w1, w2 = params.experts[0][0].data, params.experts[0][1].data
    return np.maximum(x @ w1, 0.0) @ w2


def _dense_oracle_bigmac(x, params):
    z = x @ params.outer_down.data
    w1, w2 = params.experts[0][0].data, params.experts[0][1].data
    inner = np.maximum(z @ w1, 0.0) @ w2
    return inner @ params.outer_up.data


class TestForward:
    def test_dense_equivalence_single_expert(self):
        # e=1, top_k=1, dropless: the block must equal the plain chain,
        # because the lone gate renormalizes to exactly 1
        cfg = ModelConfig(h=16, e=1, top_k=1, ep=1, r=0.25, b_tokens=8,
                          f=math.inf)
        oracles = {FINE_GRAINED: _dense_oracle_fine_grained,
                   BIGMAC: _dense_oracle_bigmac}
        for seed in range(3):
            rng = np.random.default_rng(seed)
            x = rng.uniform(-1, 1, (8, 16))
            for variant, oracle in oracles.items():
                params = mb.init_params(cfg, variant, rng)
                plan = mb.apply_capacity(mb.route(x, params, 1), cfg)
                got = mb.moe_forward(tc.const(x), params, plan).data
                diff = np.max(np.abs(got - oracle(x, params)))
                assert diff <= 1e-12, f"{variant} seed {seed}: {diff:.2e}"

    def test_all_dropped_gives_zero_output(self):
        cfg = ModelConfig(h=16, e=4, top_k=2, ep=1, r=0.25, b_tokens=8)
        for variant in (FINE_GRAINED, BIGMAC):
            params = mb.init_params(cfg, variant, np.random.default_rng(2))
            x = np.random.default_rng(3).uniform(-1, 1, (8, 16))
            plan = mb.route(x, params, 2)
            plan = RoutingPlan(plan.expert_idx, plan.gates,
                               np.ones_like(plan.dropped), plan.num_experts,
                               plan.full_probs)
            out = mb.moe_forward(tc.const(x), params, plan).data
            assert out.shape == (8, 16)
            assert np.array_equal(out, np.zeros((8, 16))), variant

    def test_dropped_slot_contributes_nothing(self):
        # zeroing a slot by capacity must equal removing its term by hand
        cfg = ModelConfig(h=8, e=4, top_k=2, ep=1, r=0.5, b_tokens=4)
        rng = np.random.default_rng(11)
        params = mb.init_params(cfg, FINE_GRAINED, rng)
        x = rng.uniform(-1, 1, (4, 8))
        plan = mb.route(x, params, 2)
        full = mb.moe_forward(tc.const(x), params, plan).data

        dropped = plan.dropped.copy()
        dropped[1, 1] = True
        cut = RoutingPlan(plan.expert_idx, plan.gates, dropped,
                          plan.num_experts, plan.full_probs)
        got = mb.moe_forward(tc.const(x), params, cut).data

        i = int(plan.expert_idx[1, 1])
        w1, w2 = params.experts[i][0].data, params.experts[i][1].data
        term = plan.gates[1, 1] * (np.maximum(x[1] @ w1, 0.0) @ w2)
        want = full.copy()
        want[1] -= term
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_plan_mismatch_errors(self):
        cfg = ModelConfig(h=8, e=4, top_k=2, ep=1, r=0.5, b_tokens=4)
        rng = np.random.default_rng(0)
        params = mb.init_params(cfg, FINE_GRAINED, rng)
        x = rng.uniform(-1, 1, (4, 8))
        plan = mb.route(x, params, 2)
        with pytest.raises(ContractError):
            mb.moe_forward(tc.const(x[:2]), params, plan)
        other = RoutingPlan(plan.expert_idx, plan.gates, plan.dropped, 7)
        with pytest.raises(ContractError):
            mb.moe_forward(tc.const(x), params, other)


class TestBalanceLoss:
    def _uniform_plan(self, n, e):
        idx = (np.arange(n, dtype=np.int64) % e).reshape(n, 1)
        probs = np.full((n, e), 1.0 / e)
        return RoutingPlan(idx, np.ones((n, 1)),
                           np.zeros((n, 1), dtype=bool), e, full_probs=probs)

    def test_uniform_routing_gives_alpha(self):
        loss = mb.aux_load_balance_loss(self._uniform_plan(32, 8), alpha=0.01)
        assert loss == pytest.approx(0.01, rel=1e-12)

    def test_collapsed_routing_gives_alpha_times_e(self):
        n, e = 32, 8
        idx = np.zeros((n, 1), dtype=np.int64)
        probs = np.zeros((n, e))
        probs[:, 0] = 1.0
        plan = RoutingPlan(idx, np.ones((n, 1)),
                           np.zeros((n, 1), dtype=bool), e, full_probs=probs)
        loss = mb.aux_load_balance_loss(plan, alpha=0.01)
        assert loss == pytest.approx(0.01 * e, rel=1e-12)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(7)
        n, e, k = 16, 4, 2
        idx = rng.integers(0, e, (n, k))
        probs = rng.random((n, e))
        probs /= probs.sum(axis=1, keepdims=True)
        plan = RoutingPlan(idx, np.full((n, k), 0.5),
                           np.zeros((n, k), dtype=bool), e, full_probs=probs)
        alpha = 0.003
        want = 0.0
        for i in range(e):
            f_i = (idx == i).sum() / (n * k)
            p_i = probs[:, i].mean()
            want += f_i * p_i
        want *= alpha * e
        assert mb.aux_load_balance_loss(plan, alpha) == pytest.approx(
            want, rel=1e-12)

    def test_drops_do_not_change_fractions(self):
        plan = self._uniform_plan(32, 8)
        loss_before = mb.aux_load_balance_loss(plan, 0.01)
        plan.dropped[:16] = True
        assert mb.aux_load_balance_loss(plan, 0.01) == loss_before

    def test_synthetic_plan_rejected(self):
        plan = RoutingPlan(np.zeros((4, 1), dtype=np.int64), np.ones((4, 1)),
                           np.zeros((4, 1), dtype=bool), 2, full_probs=None)
        with pytest.raises(ContractError):
            mb.aux_load_balance_loss(plan, 0.01)

    def test_tensor_loss_value_and_gradient(self):
        rng = np.random.default_rng(13)
        cfg = ModelConfig(h=8, e=4, top_k=2, ep=1, r=0.5, b_tokens=8)
        params = mb.init_params(cfg, FINE_GRAINED, rng)
        x = rng.uniform(-1, 1, (8, 8))
        plan = mb.route(x, params, 2)
        alpha = 0.01

        def build():
            probs = tc.softmax_rows(
                tc.matmul(tc.const(x), params.router_weight))
            return mb.aux_loss_tensor(probs, plan, alpha)

        loss = build()
        assert float(loss.data) == pytest.approx(
            mb.aux_load_balance_loss(plan, alpha), rel=1e-12)

        params.router_weight.zero_grad()
        loss.backward()
        # the plan (and so each f_i) stays fixed during probing, matching
        # the published gradient semantics
        numeric = tc.finite_diff_grad(lambda _a: float(build().data),
                                      params.router_weight.data)
        err = tc.max_rel_error(params.router_weight.grad, numeric)
        assert err < 1e-4, f"balance loss grad error {err:.3e}"


class TestSnapshots:
    def test_roundtrip_bitwise(self, tmp_path):
        cfg = ModelConfig(h=8, e=4, top_k=2, ep=1, r=0.5, b_tokens=8)
        for variant in (VANILLA, FINE_GRAINED, BIGMAC):
            params = mb.init_params(cfg, variant, np.random.default_rng(17))
            path = str(tmp_path / f"{variant}.moelab")
            mb.save_params(params, path)
            loaded = mb.load_params(path)
            assert loaded.variant == variant
            assert loaded.num_experts == params.num_experts
            originals = params.trainables()
            restored = loaded.trainables()
            assert len(originals) == len(restored)
            for a, b in zip(originals, restored):
                assert np.array_equal(a.data, b.data)

    def test_loaded_params_route_identically(self, tmp_path):
        cfg = ModelConfig(h=8, e=4, top_k=2, ep=1, r=0.5, b_tokens=8)
        rng = np.random.default_rng(19)
        params = mb.init_params(cfg, BIGMAC, rng)
        x = rng.uniform(-1, 1, (8, 8))
        path = str(tmp_path / "w.moelab")
        mb.save_params(params, path)
        loaded = mb.load_params(path)
        a = mb.route(x, params, 2)
        b = mb.route(x, loaded, 2)
        assert np.array_equal(a.expert_idx, b.expert_idx)
        assert np.array_equal(a.gates, b.gates)
        ya = mb.moe_forward(tc.const(x), params, a).data
        yb = mb.moe_forward(tc.const(x), loaded, b).data
        assert np.array_equal(ya, yb)

    def test_truncated_file_rejected(self, tmp_path):
        cfg = ModelConfig(h=8, e=4, top_k=2, ep=1, r=0.5, b_tokens=8)
        params = mb.init_params(cfg, FINE_GRAINED, np.random.default_rng(0))
        path = str(tmp_path / "w.moelab")
        mb.save_params(params, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-16])
        with pytest.raises(ValueError):
            mb.load_params(path)

    def test_wrong_format_rejected(self, tmp_path):
        path = str(tmp_path / "junk.moelab")
        open(path, "wb").write(b'{"format": "something-else"}\n')
        with pytest.raises(ValueError):
            mb.load_params(path)


class TestGradcheck:
    def test_all_variants_beat_threshold(self):
        cfg = ModelConfig(h=8, e=4, top_k=2, ep=1, r=0.5, b_tokens=8)
        for variant in (VANILLA, FINE_GRAINED, BIGMAC):
            worst = mb.gradcheck_block(cfg, variant, seed=0, n_tokens=4)
            assert worst < 1e-4, f"{variant}: {worst:.3e}"

import io
import math
from types import SimpleNamespace

import numpy as np
import pytest

from router_upcycling import numeric as nm
from router_upcycling.checkpoint import CheckpointError
from router_upcycling.config import ModelConfig, MoEConfig
from router_upcycling.dense_model import as_params, init_dense
from router_upcycling.moe import (
    ExpertSet,
    RoutingTrace,
    aux_loss,
    combine,
    dense_reference,
    forward,
    moe_forward,
    moe_layer,
    read_trace_jsonl,
    route,
    score_baseline,
    score_mixture,
    top_k,
    write_trace_jsonl,
    z_loss,
)
from router_upcycling.numeric import GradTape, Tensor
from router_upcycling.upcycler import upcycle

from oracles import central_diff, ffn_oracle, rel_error, tally_aux


def mixture_cfg(n, m, dim, kpe=1, k=2, mixture="summation"):
    return MoEConfig(n_experts=n, n_routers=m, router_dim=dim, keys_per_expert=kpe, top_k=k, mixture=mixture)


def bank_of(mats, keys):
    return SimpleNamespace(router_mats=[np.asarray(mats, dtype=float)], expert_keys=[np.asarray(keys, dtype=float)])


# --- mixture scoring -------------------------------------------------------


def test_zero_routers_give_uniform_gates(rng):
    cfg = mixture_cfg(8, 8, 4)
    trace = score_mixture(rng.normal(size=16), bank_of(np.zeros((8, 4, 16)), rng.normal(size=(8, 1, 4))), cfg)
    assert np.all(trace.summed_scores == 0)
    np.testing.assert_array_equal(trace.gates, np.full(8, 0.125))


def test_single_router_summation_equals_max_pooling(rng):
    mats, keys = rng.normal(size=(1, 4, 6)), rng.normal(size=(4, 1, 4))
    x = rng.normal(size=(10, 6))
    a = score_mixture(x, bank_of(mats, keys), mixture_cfg(4, 1, 4))
    b = score_mixture(x, bank_of(mats, keys), mixture_cfg(4, 1, 4, mixture="max_pooling"))
    np.testing.assert_array_equal(a.summed_scores, b.summed_scores)


def test_hand_example_two_routers():
    # W^1 x = [1, 0], W^2 x = [0, 1] for x = [1, 0]
    mats = [[[1, 0], [0, 0]], [[0, 0], [1, 0]]]
    keys = [[[1, 1]], [[2, 0]]]
    t = score_mixture([1.0, 0.0], bank_of(mats, keys), mixture_cfg(2, 2, 2))
    np.testing.assert_allclose(t.summed_scores, [2 / math.sqrt(2), 2 / math.sqrt(2)], atol=1e-12)
    assert t.summed_scores[0] == pytest.approx(1.41421, abs=1e-5)
    np.testing.assert_allclose(t.scores_per_router, [[1 / math.sqrt(2), 2 / math.sqrt(2)], [1 / math.sqrt(2), 0]])
    assert t.selected.tolist() == [0, 1]  # tie -> lower index first


def test_max_pooling_takes_best_router(rng):
    mats, keys = rng.normal(size=(4, 3, 5)), rng.normal(size=(2, 1, 3))
    x = rng.normal(size=5)
    t = score_mixture(x, bank_of(mats, keys), mixture_cfg(2, 4, 3, mixture="max_pooling"))
    per = np.array([[(mats[j] @ x) @ keys[i, 0] / math.sqrt(3) for i in range(2)] for j in range(4)])
    np.testing.assert_allclose(t.summed_scores, per.max(axis=0), rtol=1e-12)


def test_multi_key_expert_score_is_max_over_keys(rng):
    mats, keys = rng.normal(size=(4, 3, 5)), rng.normal(size=(2, 2, 3))
    x = rng.normal(size=5)
    t = score_mixture(x, bank_of(mats, keys), mixture_cfg(2, 4, 3, kpe=2))
    q = sum(mats[j] @ x for j in range(4))
    per_key = np.array([[q @ keys[e, c] / math.sqrt(3) for c in range(2)] for e in range(2)])
    np.testing.assert_allclose(t.summed_scores, per_key.max(axis=1), rtol=1e-12)


def test_summation_collapse_identity(rng):
    mats, keys = rng.normal(size=(8, 4, 16)), rng.normal(size=(8, 1, 4))
    x = rng.normal(size=(200, 16))
    t = score_mixture(x, bank_of(mats, keys), mixture_cfg(8, 8, 4))
    eff = mats.sum(axis=0)
    direct = (x @ eff.T) @ keys[:, 0].T / 2.0
    assert np.abs(t.summed_scores - direct).max() < 1e-9


def test_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        score_mixture(rng.normal(size=7), bank_of(rng.normal(size=(2, 2, 6)), rng.normal(size=(2, 1, 2))), mixture_cfg(2, 2, 2))


def test_shift_invariance_of_gates_and_selection(rng):
    s = rng.normal(size=(20, 8))
    g1, sel1 = route(Tensor(s), 2)
    g2, sel2 = route(Tensor(s + 7.5), 2)
    np.testing.assert_allclose(g1.data, g2.data, atol=1e-15)
    assert np.array_equal(sel1, sel2)


def test_trace_invariants(rng):
    s = rng.normal(size=(50, 8))
    s[0] = 0.0  # all ties
    gates, sel = route(Tensor(s), 2)
    t = RoutingTrace(s, gates.data, sel)
    np.testing.assert_allclose(t.gates.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(t.gates >= 0)
    assert sel[0].tolist() == [0, 1]
    for row, g in zip(sel, t.gates):
        assert len(set(row)) == 2 and g[row[0]] >= g[row[1]]
        assert g[row[1]] >= np.delete(g, row).max()
    assert t.dispatch_fraction.sum() == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_allclose(t.mean_gate, t.gates.mean(axis=0))


def test_top_k_stable_ties():
    assert top_k(np.array([0.2, 0.3, 0.3, 0.2]), 3).tolist() == [1, 2, 0]


# --- baseline routers ------------------------------------------------------


def test_baseline_zero_weights_uniform(rng):
    cfg = MoEConfig(n_experts=8, router_mode="vanilla")
    t = score_baseline(rng.normal(size=5), {"w": np.zeros((8, 5))}, "vanilla", cfg)
    np.testing.assert_array_equal(t.gates, np.full(8, 0.125))


def test_switch_forces_top1():
    cfg = MoEConfig(n_experts=3, top_k=2, router_mode="switch")
    assert cfg.effective_top_k == 1
    t = score_baseline([1.0], {"w": np.array([[3.0], [1.0], [2.0]])}, "switch", cfg)
    assert t.selected.tolist() == [0]


def test_vanilla_argsort_selection():
    cfg = MoEConfig(n_experts=3, top_k=2, router_mode="vanilla")
    t = score_baseline([1.0], {"w": np.array([[3.0], [1.0], [2.0]])}, "vanilla", cfg)
    np.testing.assert_array_equal(t.summed_scores, [3, 1, 2])
    assert set(t.selected.tolist()) == {0, 2}


def test_mlp_router_logits(rng):
    cfg = MoEConfig(n_experts=4, router_mode="mlp")
    w1, w2, x = rng.normal(size=(6, 6)), rng.normal(size=(4, 6)), rng.normal(size=6)
    t = score_baseline(x, {"w1": w1, "w2": w2}, "mlp", cfg)
    np.testing.assert_allclose(t.summed_scores, ffn_oracle(w1, w2, x), rtol=1e-12)


def test_kind_mismatch():
    cfg = MoEConfig(n_experts=2, router_mode="vanilla")
    with pytest.raises(CheckpointError, match="does not match"):
        score_baseline([1.0], {"w": np.ones((2, 1))}, "switch", cfg)
    cfg = MoEConfig(n_experts=2, router_mode="mlp")
    with pytest.raises(CheckpointError):
        score_baseline([1.0], {"w": np.ones((2, 1))}, "mlp", cfg)


# --- combination -----------------------------------------------------------


def _experts(rng, n, d=5, hidden=7):
    return ExpertSet([rng.normal(size=(hidden, d)) for _ in range(n)], [rng.normal(size=(d, hidden)) for _ in range(n)])


def test_k_equals_n_soft_mixture(rng):
    ex = _experts(rng, 3)
    x = rng.normal(size=5)
    gates, sel = route(Tensor(rng.normal(size=(1, 3))), 3)
    y = moe_forward(x, RoutingTrace(np.zeros(3), gates.data[0], sel[0]), ex)
    want = sum(gates.data[0, i] * ffn_oracle(ex.w1[i], ex.w2[i], x) for i in range(3))
    np.testing.assert_allclose(y, want, rtol=1e-11)


def test_k1_uses_single_winner_without_renormalizing(rng):
    ex = _experts(rng, 4)
    x = rng.normal(size=5)
    g = np.array([0.1, 0.6, 0.2, 0.1])
    y = moe_forward(x, RoutingTrace(np.zeros(4), g, np.array([1])), ex)
    np.testing.assert_allclose(y, 0.6 * ffn_oracle(ex.w1[1], ex.w2[1], x), rtol=1e-11)


def test_identical_experts_scale_dense_output(rng):
    w1, w2 = rng.normal(size=(7, 5)), rng.normal(size=(5, 7))
    ex = ExpertSet([w1] * 4, [w2] * 4)
    x = rng.normal(size=5)
    g = nm.softmax(rng.normal(size=4)).data
    sel = top_k(g, 2)
    y = moe_forward(x, RoutingTrace(np.zeros(4), g, sel), ex)
    f = ffn_oracle(w1, w2, x)
    assert nm.cosine_similarity(y, f) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(y) / np.linalg.norm(f) == pytest.approx(g[sel].sum(), abs=1e-12)


def test_expert_index_out_of_range(rng):
    ex = _experts(rng, 2)
    with pytest.raises(IndexError):
        moe_forward(rng.normal(size=5), RoutingTrace(np.zeros(2), np.array([0.5, 0.5]), np.array([2])), ex)
    with pytest.raises(ValueError):
        moe_forward(rng.normal(size=5), RoutingTrace(np.zeros(2), np.array([0.5, 0.5]), np.zeros(0, dtype=int)), ex)


def test_expert_shapes_must_match(rng):
    with pytest.raises(ValueError):
        ExpertSet([np.ones((3, 2)), np.ones((4, 2))], [np.ones((2, 3)), np.ones((2, 4))])


def test_fresh_upcycle_init_equivalence(tiny_moe, rng):
    params = as_params(tiny_moe.tensors)
    for layer in range(tiny_moe.config.n_layers):
        x = Tensor(rng.normal(size=(50, tiny_moe.config.d_model)))
        y, routing = moe_layer(params, layer, x, tiny_moe.moe)
        f = dense_reference(params, layer, x).data
        gsum = np.take_along_axis(routing.gates.data, routing.selected, axis=1).sum(axis=1)
        for t in range(50):
            assert nm.cosine_similarity(y.data[t], f[t]) == pytest.approx(1.0, abs=1e-9)
            assert np.linalg.norm(y.data[t]) / np.linalg.norm(f[t]) == pytest.approx(gsum[t], abs=1e-9)


# --- losses ----------------------------------------------------------------


def test_aux_uniform_is_coefficient():
    n, k = 8, 2
    gates = np.full((n, n), 1.0 / n)
    sel = np.array([[i, (i + 1) % n] for i in range(n)])
    assert aux_loss(gates, sel, 0.02).item() == pytest.approx(0.02, abs=1e-15)


def test_aux_maximal_imbalance():
    n = 8
    gates = np.zeros((5, n))
    gates[:, 0] = 1.0
    assert aux_loss(gates, np.zeros((5, 1), dtype=int), 0.02).item() == pytest.approx(0.02 * n, abs=1e-15)


def test_aux_matches_tally_oracle(rng):
    for seed in range(10):
        r = np.random.default_rng(seed)
        gates = nm.softmax(r.normal(size=(16, 4))).data
        sel = top_k(gates, 2)
        assert aux_loss(gates, sel, 0.02).item() == pytest.approx(tally_aux(gates, sel, 0.02), abs=1e-12)


def test_losses_reject_empty_batch():
    with pytest.raises(ValueError):
        aux_loss(np.zeros((0, 4)), np.zeros((0, 2), dtype=int))
    with pytest.raises(ValueError):
        z_loss(np.zeros((0, 4)))


def test_z_loss_zero_logits():
    assert z_loss(np.zeros((3, 8)), 0.001).item() == pytest.approx(0.001 * math.log(8) ** 2, abs=1e-15)
    assert 0.001 * math.log(8) ** 2 == pytest.approx(4.3241e-3, abs=1e-7)


def test_z_loss_not_shift_invariant_but_gates_are(rng):
    s = rng.normal(size=(4, 8))
    assert z_loss(s + 3.0).item() != pytest.approx(z_loss(s).item())
    np.testing.assert_allclose(nm.softmax(s + 3.0).data, nm.softmax(s).data, atol=1e-15)


def test_z_loss_two_token_hand_value():
    s = np.array([[0.0, math.log(3.0)], [1.0, 1.0]])
    lse = [math.log(1 + 3), 1.0 + math.log(2)]
    assert z_loss(s, 1.0).item() == pytest.approx((lse[0] ** 2 + lse[1] ** 2) / 2, abs=1e-14)


# --- gradients of the full layer ------------------------------------------


def _layer_setup(mode, n=2, k=2, m=2, dim=4, d=8, mixture="summation", seed=0):
    r = np.random.default_rng(seed)
    model = ModelConfig(d_model=d, n_heads=2, head_dim=4, n_layers=1, ffn_hidden=6, seq_len=4)
    if mode == "mixture":
        cfg = MoEConfig(n_experts=n, n_routers=m, router_dim=dim, top_k=k, mixture=mixture)
    else:
        cfg = MoEConfig(n_experts=n, top_k=k, router_mode=mode)
    arrays = {}
    for e in range(n):
        arrays[f"layer.0.expert.{e}.w1"] = r.normal(size=(6, d))
        arrays[f"layer.0.expert.{e}.w2"] = r.normal(size=(d, 6))
    if mode == "mixture":
        for j in range(m):
            arrays[f"layer.0.router.{j}.w"] = 0.5 * r.normal(size=(dim, d))
        for e in range(n):
            arrays[f"layer.0.expert.{e}.key.0"] = 0.5 * r.normal(size=dim)
    elif mode == "mlp":
        arrays["layer.0.router.w1"] = 0.5 * r.normal(size=(d, d))
        arrays["layer.0.router.w2"] = 0.5 * r.normal(size=(n, d))
    else:
        arrays["layer.0.router.w"] = 0.5 * r.normal(size=(n, d))
    x = r.normal(size=(5, d))
    weights = r.normal(size=(5, d))
    return model, cfg, arrays, x, weights


def _layer_loss(params, x, weights, cfg):
    y, routing = moe_layer(params, 0, x, cfg)
    lm = nm.tensor_sum(nm.mul(y, weights))
    aux = aux_loss(routing.gates, routing.selected, cfg.aux_coeff)
    zl = z_loss(routing.scores, cfg.z_coeff)
    return nm.add(nm.add(lm, aux), zl), routing


@pytest.mark.parametrize(
    "mode,kw",
    [
        ("mixture", {}),
        ("mixture", {"mixture": "max_pooling"}),
        ("mixture", {"n": 4, "k": 2, "m": 2}),
        ("vanilla", {}),
        ("mlp", {"n": 4}),
        ("switch", {"n": 4}),
    ],
)
def test_full_layer_gradients(mode, kw):
    model, cfg, arrays, x, weights = _layer_setup(mode, **kw)
    params = {k: nm.parameter(v.copy()) for k, v in arrays.items()}
    xt = nm.parameter(x.copy())
    with GradTape() as tape:
        loss, routing = _layer_loss(params, xt, weights, cfg)
    tape.backward(loss)
    selected = routing.selected.copy()

    def value():
        p = {k: Tensor(v) for k, v in arrays.items()}
        out, r = _layer_loss(p, Tensor(x), weights, cfg)
        assert np.array_equal(r.selected, selected), "finite-difference step changed the routing"
        return out.item()

    numeric = central_diff(value, {**arrays, "x": x})
    for name in arrays:
        grad = params[name].grad
        if grad is None:  # expert never selected, so it sits off the tape
            grad = np.zeros_like(arrays[name])
        assert rel_error(grad, numeric[name]) < 1e-6, name
    assert rel_error(xt.grad, numeric["x"]) < 1e-6


# --- model-level forward and traces ----------------------------------------


def test_forward_and_trace_export(tiny_moe, rng):
    toks = rng.integers(0, 256, size=(2, 6))
    logits, traces, layer_traces = forward(tiny_moe, toks)
    assert logits.shape == (2, 6, 259) and len(traces) == tiny_moe.config.n_layers
    buf = io.StringIO()
    assert write_trace_jsonl(buf, traces[1], 1, "code") == 12
    recs = list(read_trace_jsonl(buf.getvalue().splitlines()))
    assert len(recs) == 12 and recs[0]["layer"] == 1 and recs[0]["domain"] == "code"
    assert len(recs[0]["gates"]) == 4 and len(recs[0]["selected"]) == 2
    with pytest.raises(ValueError, match="lacks"):
        list(read_trace_jsonl(['{"layer": 0}']))


def test_fresh_moe_model_matches_scaled_dense_when_gates_sum_to_one(tiny_dense):
    # k = n makes selected gates sum to 1, so the upcycled model reproduces the dense model
    cfg = MoEConfig.for_model(tiny_dense.config, n_experts=4, n_routers=4, top_k=4, router_mode="vanilla")
    moe = upcycle(tiny_dense, None, cfg, seed=0)
    toks = np.arange(60, 72)
    from router_upcycling.dense_model import forward as dense_forward

    np.testing.assert_allclose(forward(moe, toks)[0], dense_forward(tiny_dense, toks)[0], rtol=1e-10, atol=1e-12)

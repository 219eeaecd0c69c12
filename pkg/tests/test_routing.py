import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_err
from mor_kit.numeric import make_rng
from mor_kit.routing import (RouterParams, main_router_weights, mor_route, route, routing_grads, single_route,
                             topk_renormalize)
from mor_kit.trainer import finite_diff_gradient


def oracle_softmax(v):
    e = [math.exp(t - max(v)) for t in v]
    s = sum(e)
    return np.array([t / s for t in e])


def oracle_topk(p, k):
    ids = sorted(range(len(p)), key=lambda i: (-p[i], i))[:k]
    total = sum(p[i] for i in ids)
    return ids, np.array([p[i] / total for i in ids])


def test_topk_renormalize_examples():
    ids, w = topk_renormalize([0.5, 0.3, 0.2], 2)
    assert ids.tolist() == [0, 1]
    np.testing.assert_allclose(w, [0.625, 0.375], rtol=0, atol=1e-15)
    p = np.array([0.1, 0.6, 0.3])
    ids, w = topk_renormalize(p, 3)
    np.testing.assert_allclose(w, p[ids], rtol=0, atol=1e-15)
    ids, w = topk_renormalize([0, 0, 1.0, 0], 1)
    assert ids.tolist() == [2] and w.tolist() == [1.0]


def test_topk_renormalize_errors():
    with pytest.raises(ValueError):
        topk_renormalize([0.5, 0.6], 1)
    with pytest.raises(ValueError):
        topk_renormalize([0.5, 0.5], 3)


def test_topk_renormalize_idempotent(rng):
    for _ in range(200):
        p = rng.dirichlet(np.ones(6))
        k = int(rng.integers(1, 7))
        ids, w = topk_renormalize(p, k)
        ids2, w2 = topk_renormalize(w, k)
        np.testing.assert_allclose(w2, w, rtol=0, atol=1e-15)
        assert ids2.tolist() == list(range(k))


def test_single_route_zero_router():
    x = np.array([1.0, -2.0, 3.0])
    d = single_route(np.zeros((4, 3)), x, 4)
    np.testing.assert_allclose(d.weights, [0.25] * 4)
    d = single_route(np.zeros((4, 3)), x, 2)
    assert d.selected.tolist() == [0, 1]
    np.testing.assert_allclose(d.weights, [0.5, 0.5])
    np.testing.assert_array_equal(d.router_weights, [1.0])
    # scaling x changes nothing when the router is zero
    d2 = single_route(np.zeros((4, 3)), 100 * x, 2)
    assert d2.selected.tolist() == [0, 1]


def test_single_route_matches_composition_oracle(rng):
    for _ in range(100):
        w = rng.standard_normal((6, 5))
        x = rng.standard_normal(5)
        d = single_route(w, x, 2)
        p = oracle_softmax((w @ x).tolist())
        ids, weights = oracle_topk(p, 2)
        assert d.selected.tolist() == ids
        np.testing.assert_allclose(d.weights, weights, rtol=0, atol=1e-12)
        np.testing.assert_allclose(d.full_dist, p, rtol=0, atol=1e-12)


def test_main_router_weights_examples(rng):
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(main_router_weights(rng.standard_normal((1, 4)), x), [1.0])
    np.testing.assert_allclose(main_router_weights(np.zeros((2, 4)), x, 2), [0.5, 0.5])
    main = rng.standard_normal((4, 4))
    q = oracle_softmax((main @ x).tolist())
    ids, w = oracle_topk(q, 2)
    dense = np.zeros(4)
    dense[ids] = w
    np.testing.assert_allclose(main_router_weights(main, x, 2), dense, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        main_router_weights(main, x, 5)


def test_mor_two_router_symmetry():
    # each sub-router is (numerically) one-hot on a different expert
    subs = np.zeros((2, 2, 1))
    subs[0, 0, 0] = 800.0
    subs[1, 1, 0] = 800.0
    params = RouterParams(subs, np.zeros((2, 1)))
    d = mor_route(params, np.array([1.0]), 1)
    np.testing.assert_allclose(d.router_weights, [0.5, 0.5])
    np.testing.assert_allclose(d.full_dist, [0.5, 0.5], rtol=0, atol=1e-12)


def test_mor_matches_dense_aggregation_oracle(rng):
    for _ in range(100):
        params = RouterParams.create("mor", 3, 6, 5, rng)
        x = rng.standard_normal(5)
        d = mor_route(params, x, 2)
        rw = oracle_softmax((params.main @ x).tolist())
        agg = sum(rw[s] * oracle_softmax((params.subs[s] @ x).tolist()) for s in range(3))
        ids, w = oracle_topk(agg, 2)
        np.testing.assert_allclose(d.full_dist, agg, rtol=0, atol=1e-12)
        assert d.selected.tolist() == ids
        np.testing.assert_allclose(d.weights, w, rtol=0, atol=1e-12)


def test_mor_single_router_reduces_to_single_route(rng):
    for _ in range(200):
        n, d_in = int(rng.integers(2, 9)), int(rng.integers(1, 9))
        k = int(rng.integers(1, n + 1))
        params = RouterParams.create("mor", 1, n, d_in, rng)
        x = rng.standard_normal(d_in)
        a = mor_route(params, x, k)
        b = single_route(params.subs[0], x, k)
        assert a.selected.tolist() == b.selected.tolist()
        np.testing.assert_allclose(a.weights, b.weights, rtol=0, atol=1e-12)
        np.testing.assert_allclose(a.full_dist, b.full_dist, rtol=0, atol=1e-12)


def test_permuting_sub_routers_leaves_decision_unchanged(rng):
    for _ in range(100):
        params = RouterParams.create("mor", 4, 6, 5, rng)
        perm = rng.permutation(4)
        shuffled = RouterParams(params.subs[perm], params.main[perm])
        x = rng.standard_normal(5)
        a, b = mor_route(params, x, 3), mor_route(shuffled, x, 3)
        assert a.selected.tolist() == b.selected.tolist()
        np.testing.assert_allclose(a.weights, b.weights, rtol=0, atol=1e-12)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 10), st.integers(1, 4), st.integers(1, 8), st.integers(0, 2**32 - 1), st.data())
def test_decisions_are_normalised(n_experts, n_routers, d_in, seed, data):
    rng = make_rng(seed)
    k = data.draw(st.integers(1, n_experts))
    kr = data.draw(st.integers(1, n_routers))
    mode = data.draw(st.sampled_from(["single", "mor"])) if n_routers == 1 else "mor"
    params = RouterParams.create(mode, n_routers, n_experts, d_in, rng)
    x = rng.standard_normal((7, d_in)) * data.draw(st.sampled_from([0.1, 1.0, 10.0]))
    d = route(params, x, k, kr if mode == "mor" else None)
    np.testing.assert_allclose(d.weights.sum(axis=1), 1.0, rtol=0, atol=1e-9)
    assert np.all(d.weights > 0) and d.weights.shape == (7, k)
    assert all(len(set(row)) == k for row in d.selected.tolist())
    np.testing.assert_allclose(d.full_dist.sum(axis=1), 1.0, rtol=0, atol=1e-10)
    assert np.all((d.full_dist >= 0) & (d.full_dist <= 1 + 1e-12))
    np.testing.assert_allclose(d.router_weights.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_routing_grads_trivial_cases(rng):
    params = RouterParams.create("mor", 3, 5, 4, rng)
    x = rng.standard_normal(4)
    d = mor_route(params, x, 2)
    g = routing_grads(params, x, d, np.zeros(2))
    assert not g.subs.any() and not g.main.any() and not g.x.any()
    one = RouterParams.create("mor", 1, 5, 4, rng)
    d = mor_route(one, x, 2)
    g = routing_grads(one, x, d, rng.standard_normal(2), rng.standard_normal(5))
    assert not g.main.any()
    assert g.subs.any()


def test_routing_grads_reject_stale_cache(rng):
    params = RouterParams.create("mor", 2, 5, 4, rng)
    x = rng.standard_normal(4)
    d = mor_route(params, x, 2)
    params.subs[0, 0, 0] += 0.1
    with pytest.raises(ValueError, match="stale"):
        routing_grads(params, x, d, np.ones(2))


@pytest.mark.parametrize("mode,n_routers,k_routers", [("single", 1, None), ("mor", 1, None), ("mor", 3, None),
                                                      ("mor", 4, 2)])
def test_routing_grads_match_finite_differences(rng, mode, n_routers, k_routers):
    worst = 0.0
    for _ in range(20):
        params = RouterParams.create(mode, n_routers, 6, 5, rng)
        x = rng.standard_normal((3, 5))
        d = route(params, x, 2, k_routers)
        gw = rng.standard_normal((3, 2))
        gf = rng.standard_normal(6)
        gr = rng.standard_normal(n_routers)

        def loss():
            e = route(params, x, 2, k_routers, selected=d.selected, router_selected=d.router_selected)
            return float(np.sum(gw * e.weights) + np.sum(gf * e.full_dist) + np.sum(gr * e.router_weights))

        g = routing_grads(params, x, d, gw, gf, gr)
        arrays = {"subs": params.subs} if params.main is None else {"subs": params.subs, "main": params.main}
        num = finite_diff_gradient(loss, arrays, eps=1e-5)
        worst = max(worst, rel_err(g.subs, num["subs"]))
        if params.main is not None and n_routers > 1:
            worst = max(worst, rel_err(g.main, num["main"]))

        xs = x.copy()
        num_x = finite_diff_gradient(lambda: (x.__setitem__(slice(None), xs) if False else loss()), {"x": x})
        worst = max(worst, rel_err(g.x, num_x["x"]))
    assert worst <= 1e-6


def test_router_round_trip(rng):
    for mode, r in [("single", 1), ("mor", 3)]:
        params = RouterParams.create(mode, r, 4, 3, rng)
        back = RouterParams.from_dict(params.to_dict())
        np.testing.assert_array_equal(back.subs, params.subs)
        assert back.mode == mode

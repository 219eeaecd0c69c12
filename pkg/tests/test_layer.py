import json

import numpy as np
import pytest

from conftest import rel_err
from mor_kit.layer import MoeLoraLayer, MoeModel, layer_backward, layer_forward, load_checkpoint, save_checkpoint
from mor_kit.lora import LoraExpertBank, expert_forward, expert_param_grads
from mor_kit.routing import RouterParams
from mor_kit.trainer import finite_diff_gradient, frozen_loss_fn, loss_and_grads


def randomize_b(layer, rng):
    layer.bank.b[...] = rng.standard_normal(layer.bank.b.shape)
    return layer


def test_fresh_layer_is_inert(rng):
    for mode, r in [("single", 1), ("mor", 3)]:
        layer = MoeLoraLayer.create(6, 5, n_experts=4, mode=mode, n_routers=r, rank=2, rng=rng)
        x = rng.standard_normal(6)
        y, _ = layer_forward(layer, x)
        np.testing.assert_array_equal(y, layer.w0 @ x)


def test_single_expert_with_zero_base_is_expert_forward(rng):
    bank = LoraExpertBank.create(1, 4, 3, rank=2, rng=rng)
    bank.b[...] = rng.standard_normal(bank.b.shape)
    router = RouterParams.create("single", 1, 1, 4, rng)
    layer = MoeLoraLayer(np.zeros((3, 4)), bank, router, k_experts=1)
    x = rng.standard_normal(4)
    y, _ = layer_forward(layer, x)
    np.testing.assert_allclose(y, expert_forward(bank, 0, x), rtol=0, atol=1e-14)


@pytest.mark.parametrize("mode,r,kr", [("single", 1, None), ("mor", 2, None), ("mor", 4, 2)])
def test_forward_matches_dense_oracle(rng, mode, r, kr):
    for _ in range(20):
        layer = randomize_b(MoeLoraLayer.create(7, 5, n_experts=6, k_experts=3, mode=mode, n_routers=r,
                                                k_routers=kr, rank=3, rng=rng), rng)
        x = rng.standard_normal(7)
        y, trace = layer_forward(layer, x)
        gate = np.zeros(6)
        gate[trace.decision.selected[0]] = trace.decision.weights[0]
        dense = layer.w0 @ x
        for i in range(6):
            dense = dense + gate[i] * layer.bank.scaling * layer.bank.b[i] @ (layer.bank.a[i] @ x)
        np.testing.assert_allclose(y, dense, rtol=0, atol=1e-12)


def test_batched_forward_matches_per_row(rng):
    layer = randomize_b(MoeLoraLayer.create(6, 4, n_experts=5, rank=2, n_routers=3, rng=rng), rng)
    x = rng.standard_normal((9, 6))
    yb, _ = layer_forward(layer, x)
    for i in range(9):
        np.testing.assert_allclose(yb[i], layer_forward(layer, x[i])[0], rtol=0, atol=1e-13)


def test_forward_rejects_bad_input(rng):
    layer = MoeLoraLayer.create(6, 4, n_experts=5, rank=2, rng=rng)
    with pytest.raises(ValueError):
        layer_forward(layer, np.ones(5))


def test_zero_upstream_gives_zero_grads(rng):
    layer = randomize_b(MoeLoraLayer.create(6, 4, n_experts=5, rank=2, n_routers=2, rng=rng), rng)
    y, trace = layer_forward(layer, rng.standard_normal((3, 6)))
    g = layer_backward(layer, trace, np.zeros_like(y))
    for arr in [*g.as_dict().values(), g.x]:
        assert not arr.any()


def test_single_expert_backward_reduces_to_expert_grads(rng):
    bank = LoraExpertBank.create(1, 4, 3, rank=2, rng=rng)
    bank.b[...] = rng.standard_normal(bank.b.shape)
    layer = MoeLoraLayer(np.zeros((3, 4)), bank, RouterParams.create("single", 1, 1, 4, rng), k_experts=1)
    x, up = rng.standard_normal(4), rng.standard_normal(3)
    _, trace = layer_forward(layer, x)
    g = layer_backward(layer, trace, up)
    ga, gb = expert_param_grads(bank, 0, x, up)
    np.testing.assert_allclose(g.a[0], ga, rtol=0, atol=1e-14)
    np.testing.assert_allclose(g.b[0], gb, rtol=0, atol=1e-14)
    assert not g.subs.any()  # one expert: weight is constant 1


def test_backward_rejects_mismatched_trace(rng):
    layer = MoeLoraLayer.create(6, 4, n_experts=5, rank=2, rng=rng)
    _, trace = layer_forward(layer, rng.standard_normal(6))
    with pytest.raises(ValueError):
        layer_backward(layer, trace, np.ones(5))


def test_unselected_experts_get_zero_gradient(rng):
    layer = randomize_b(MoeLoraLayer.create(6, 4, n_experts=8, k_experts=2, rank=2, n_routers=2, rng=rng), rng)
    x = rng.standard_normal((3, 6))
    y, trace = layer_forward(layer, x)
    g = layer_backward(layer, trace, rng.standard_normal(y.shape))
    used = set(trace.decision.selected.ravel().tolist())
    for i in range(8):
        if i not in used:
            assert not g.a[i].any() and not g.b[i].any()


@pytest.mark.parametrize("mode,r,kr", [("single", 1, None), ("mor", 2, None), ("mor", 3, 2)])
def test_two_layer_model_matches_finite_differences(rng, mode, r, kr):
    model = MoeModel.create([5, 6, 4], rng, n_experts=4, k_experts=2, mode=mode, n_routers=r, k_routers=kr,
                            rank=2)
    for layer in model.layers:
        randomize_b(layer, rng)
    x, target = rng.standard_normal((4, 5)), rng.standard_normal((4, 4))
    _, grads, _ = loss_and_grads(model, x, target, 0.1, 0.1)
    fn, _ = frozen_loss_fn(model, x, target, 0.1, 0.1)
    num = finite_diff_gradient(fn, model.parameters(), eps=1e-5)
    assert set(grads) == set(num)
    for name in grads:
        assert rel_err(grads[name], num[name]) <= 1e-5, name


def test_input_gradient_matches_finite_differences(rng):
    layer = randomize_b(MoeLoraLayer.create(5, 3, n_experts=4, rank=2, n_routers=2, rng=rng), rng)
    x = rng.standard_normal((2, 5))
    up = rng.standard_normal((2, 3))
    _, trace = layer_forward(layer, x)
    sel, rsel = trace.decision.selected, trace.decision.router_selected
    fn = lambda: float(np.sum(up * layer_forward(layer, x, selected=sel, router_selected=rsel)[0]))
    num = finite_diff_gradient(fn, {"x": x})["x"]
    assert rel_err(layer_backward(layer, trace, up).x, num) <= 1e-6


def test_base_weight_is_frozen(rng):
    layer = MoeLoraLayer.create(4, 4, n_experts=2, rank=2, rng=rng)
    with pytest.raises(ValueError):
        layer.w0[0, 0] = 1.0
    assert "w0" not in layer.parameters()


def test_stats_recorded(rng):
    model = MoeModel.create([5, 5, 5], rng, n_experts=4, k_experts=2, n_routers=2, rank=2)
    stats = model.new_stats()
    model.forward(rng.standard_normal((10, 5)), stats)
    for s in stats.experts:
        assert s.token_count == 10 and s.assign_counts.sum() == 20
        np.testing.assert_allclose(s.mean_probs.sum(), 1.0, atol=1e-12)
    assert all(s.assign_counts.sum() == 10 for s in stats.routers)


def test_model_rejects_unchained_widths(rng):
    a = MoeLoraLayer.create(4, 3, n_experts=2, rank=2, rng=rng)
    b = MoeLoraLayer.create(4, 3, n_experts=2, rank=2, rng=rng)
    with pytest.raises(ValueError):
        MoeModel([a, b])


def test_checkpoint_round_trip(rng, tmp_path):
    model = MoeModel.create([5, 6, 4], rng, n_experts=4, n_routers=3, k_routers=2, rank=2)
    for layer in model.layers:
        randomize_b(layer, rng)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    x = rng.standard_normal((6, 5))
    np.testing.assert_array_equal(back.predict(x), model.predict(x))
    save_checkpoint(back, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_corruption(rng, tmp_path):
    model = MoeModel.create([3, 3], rng, n_experts=2, rank=2)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, path)
    text = path.read_text()
    (tmp_path / "cut.json").write_text(text[:50])
    with pytest.raises(ValueError, match="offset"):
        load_checkpoint(tmp_path / "cut.json")
    data = json.loads(text)
    data["schema"] = "something/else"
    (tmp_path / "tag.json").write_text(json.dumps(data))
    with pytest.raises(ValueError, match="schema"):
        load_checkpoint(tmp_path / "tag.json")

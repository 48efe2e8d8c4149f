import numpy as np
import pytest

from ddunet import tensor as T
from ddunet.losses import total_loss
from ddunet.tensor import Tensor
from ddunet.topology import (
    PATTERNS,
    TopologySpec,
    bridge,
    build_network,
    check_resolution,
    count_parameters,
    count_parameters_spec,
    layer_table,
    plan_wiring,
)


def closed_form_count(pattern, stages, base, cin=4, cout=3, bridge_method="avg_pool"):
    """Parameter count written out per layer, independent of the layer table code."""

    def c(s):
        return base * 2 ** (s - 1)

    def block(i, o):
        return i * o * 27 + o + 2 * o

    def bconv(ch):
        return {"avg_pool": 0, "strided_conv": ch * ch * 8 + ch, "dilated_conv": ch * ch * 27 + ch}[bridge_method]

    total = block(cin, c(1)) + block(c(1), c(1))
    for s in range(2, stages + 1):
        a_in = c(s - 1)
        if pattern == "cross_skip":
            a_in += sum(c(t) for t in range(1, s))
        elif pattern == "skip_1":
            a_in += c(s - 1)
        b_in = c(s) + (c(s - 1) if pattern == "skip_2" else 0)
        total += block(a_in, c(s)) + block(b_in, c(s))
    if pattern == "cross_skip":
        total += sum((stages - t) * bconv(c(t)) for t in range(1, stages))
    elif pattern in ("skip_1", "skip_2"):
        total += sum(bconv(c(s - 1)) for s in range(2, stages + 1))
    for s in range(1, stages):
        total += block(c(s + 1) + c(s), c(s)) + block(c(s), c(s))
    return total + base * cout + cout


def _sources(plan, stage, conv):
    return {(s.stage, s.slot, s.downsamples, s.via) for s in plan.junction(stage, conv).sources}


def test_cross_skip_stage4_sources():
    plan = plan_wiring(TopologySpec("cross_skip", stages=4))
    assert _sources(plan, 4, "a") == {
        (3, "b", 1, "pool"),
        (3, "a", 1, "bridge"),
        (2, "a", 2, "bridge"),
        (1, "a", 3, "bridge"),
    }


@pytest.mark.parametrize("stages", [2, 3, 4, 5])
def test_none_single_source(stages):
    plan = plan_wiring(TopologySpec("none", stages=stages))
    assert all(len(j.sources) == 1 for j in plan.junctions)


def test_skip_1_and_skip_2_sources():
    p1 = plan_wiring(TopologySpec("skip_1", stages=4))
    assert _sources(p1, 3, "a") == {(2, "b", 1, "pool"), (2, "a", 1, "bridge")}
    p2 = plan_wiring(TopologySpec("skip_2", stages=4))
    assert _sources(p2, 3, "b") == {(3, "a", 0, "direct"), (2, "b", 1, "bridge")}
    assert _sources(p2, 3, "a") == {(2, "b", 1, "pool")}


def test_unknown_pattern_rejected():
    with pytest.raises(ValueError):
        TopologySpec("dense")


@pytest.mark.parametrize("pattern", PATTERNS)
@pytest.mark.parametrize("stages", [2, 3, 4, 5, 6])
def test_resolution_match(pattern, stages):
    check_resolution(plan_wiring(TopologySpec(pattern, stages=stages)))


def test_channel_ladder_unet64():
    table = {l.name: l for l in layer_table(TopologySpec("none", stages=4, base_channels=64))}
    assert [table[f"enc{s}.b"].cout for s in range(1, 5)] == [64, 128, 256, 512]
    assert table["dec1.a"].cin == 128 + 64 and table["head"].cout == 3
    names = [n for n in table if n.startswith("bridge")]
    assert names == []


@pytest.mark.parametrize("pattern", PATTERNS)
@pytest.mark.parametrize("base", [32, 64])
@pytest.mark.parametrize("method", ["avg_pool", "strided_conv", "dilated_conv"])
def test_count_matches_closed_form(pattern, base, method):
    spec = TopologySpec(pattern, stages=4, base_channels=base, bridge_method=method)
    assert count_parameters_spec(spec) == closed_form_count(pattern, 4, base, bridge_method=method)


def test_count_claim_unet64_beats_ddc32():
    unet = closed_form_count("none", 4, 64)
    for p in ("cross_skip", "skip_1", "skip_2"):
        assert unet > closed_form_count(p, 4, 32)
        assert unet > count_parameters_spec(TopologySpec(p, stages=4, base_channels=32))


def test_cross_skip_differs_from_none_only_in_first_convs():
    a = {l.name: l for l in layer_table(TopologySpec("none", base_channels=32))}
    b = {l.name: l for l in layer_table(TopologySpec("cross_skip", base_channels=32))}
    assert a.keys() == b.keys()
    diff = sorted(n for n in a if a[n] != b[n])
    assert diff == ["enc2.a", "enc3.a", "enc4.a"]
    assert all(a[n].cout == b[n].cout and a[n].cin < b[n].cin for n in diff)


def test_single_conv_count():
    spec = TopologySpec("none", stages=2, base_channels=1, in_channels=1, out_channels=1)
    net = build_network(spec)
    assert net.params["enc1.a.weight"].size + net.params["enc1.a.bias"].size == 28


def test_count_invariant_across_seeds_and_matches_network():
    spec = TopologySpec("skip_2", stages=3, base_channels=4, bridge_method="strided_conv")
    counts = {count_parameters(build_network(spec, seed=s)) for s in range(3)}
    assert counts == {count_parameters_spec(spec)}


def test_bridge_methods():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 8, 16, 16, 16)).astype(np.float32))
    assert bridge(x).shape == (1, 8, 8, 8, 8)
    w = Tensor(np.zeros((8, 8, 2, 2, 2), np.float32))
    assert bridge(x, "strided_conv", w, Tensor(np.zeros(8, np.float32))).shape == (1, 8, 8, 8, 8)
    assert w.size + 8 == 8 * 8 * 2**3 + 8
    wd = Tensor(np.zeros((8, 8, 3, 3, 3), np.float32))
    assert bridge(x, "dilated_conv", wd, None).shape == (1, 8, 8, 8, 8)
    assert TopologySpec().bridge_method == "avg_pool"
    with pytest.raises(ValueError):
        bridge(Tensor(np.zeros((1, 1, 3, 4, 4))))


def test_forward_shape_contract():
    net = build_network(TopologySpec("cross_skip", stages=4, base_channels=4), seed=1)
    y = net(Tensor(np.random.default_rng(0).standard_normal((2, 4, 32, 32, 16)).astype(np.float32)))
    assert y.shape == (2, 3, 32, 32, 16)
    assert np.all((y.data > 0) & (y.data < 1))


def test_forward_rejects_indivisible():
    net = build_network(TopologySpec("none", stages=3, base_channels=2))
    with pytest.raises(ValueError, match="divisible"):
        net(Tensor(np.zeros((1, 4, 8, 8, 6), np.float32)))


def test_build_deterministic():
    spec = TopologySpec("skip_1", stages=3, base_channels=4)
    a, b = build_network(spec, seed=7), build_network(spec, seed=7)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    c = build_network(spec, seed=8)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_eval_forward_state_free_and_train_isolation():
    net = build_network(TopologySpec("cross_skip", stages=3, base_channels=4), seed=0)
    x = Tensor(np.random.default_rng(1).standard_normal((2, 4, 8, 8, 8)).astype(np.float32))
    before = {k: (s.running_mean.copy(), s.running_var.copy()) for k, s in net.bn.items()}
    e1, e2 = net(x, "eval").data, net(x, "eval").data
    np.testing.assert_array_equal(e1, e2)
    for k, s in net.bn.items():
        np.testing.assert_array_equal(s.running_mean, before[k][0])
    t1 = net(x, "train").data
    changed = any(not np.array_equal(s.running_mean, before[k][0]) for k, s in net.bn.items())
    t2 = net(x, "train").data
    assert changed
    np.testing.assert_array_equal(t1, t2)


def test_act_before_norm_flag_changes_output():
    x = Tensor(np.random.default_rng(2).standard_normal((1, 4, 8, 8, 8)).astype(np.float32))
    a = build_network(TopologySpec("none", stages=2, base_channels=2), seed=0)(x).data
    b = build_network(TopologySpec("none", stages=2, base_channels=2, act_before_norm=False), seed=0)(x).data
    assert not np.allclose(a, b)


def test_ddc_edge_sensitivity():
    """Zeroing the parameters feeding a bridged source changes the loss."""
    spec = TopologySpec("cross_skip", stages=3, base_channels=4, bridge_method="strided_conv")
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32))
    y = (rng.random((1, 3, 8, 8, 8)) > 0.5).astype(np.float32)
    net = build_network(spec, seed=0)
    base = float(total_loss(net(x, "eval"), y).total.data)
    net.params["bridge.a1.to3.weight"].data[:] = 0
    net.params["bridge.a1.to3.bias"].data[:] = 0
    assert float(total_loss(net(x, "eval"), y).total.data) != base


def test_state_dict_roundtrip():
    spec = TopologySpec("skip_2", stages=3, base_channels=4)
    a = build_network(spec, seed=0)
    x = Tensor(np.random.default_rng(4).standard_normal((2, 4, 8, 8, 8)).astype(np.float32))
    a(x, "train")
    b = build_network(spec, seed=99)
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a(x, "eval").data, b(x, "eval").data)


def test_network_backward_reaches_all_params():
    spec = TopologySpec("cross_skip", stages=3, base_channels=4, bridge_method="dilated_conv")
    net = build_network(spec, seed=0)
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 4, 8, 8, 8)).astype(np.float32))
    y = (rng.random((2, 3, 8, 8, 8)) > 0.7).astype(np.float32)
    total_loss(net(x), y).total.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name
        assert np.any(p.grad != 0), name


def test_small_network_grad_check():
    spec = TopologySpec("skip_1", stages=2, base_channels=2)
    net = build_network(spec, seed=0, dtype=np.float64)
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((1, 4, 4, 4, 4)))
    y = (rng.random((1, 3, 4, 4, 4)) > 0.5).astype(np.float64)
    f = lambda _: total_loss(net(x), y).total  # noqa: E731
    for name in ("enc2.a.weight", "enc1.b.gamma", "head.bias", "dec1.a.weight"):
        r = T.grad_check(f, net.params[name], max_coords=12)
        assert r.max_rel_error < 1e-4, name

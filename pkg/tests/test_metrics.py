import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from netgen import random_net, randomize_bn

from gap import zoo
from gap.ir import GraphBuilder, expand_fine
from gap.metrics import (
    CompressionReport,
    FlopsConvention,
    compression_report,
    count_flops,
    count_params,
    layer_params,
    measure_latency,
)
from gap.pruner import compute_scores, prune_vertices, select_threshold
from gap.topology import build_groups, classify_bn_vertices


def conv_bn(cin=2, cout=4, k=3, hw=4, pad=1, classes=None):
    b = GraphBuilder((cin, hw, hw))
    c = b.add("ConvLayer", [b.input], {"kernel": np.ones((cout, cin, k, k))}, in_channels=cin, out_channels=cout,
              kernel=[k, k], stride=1, padding=pad, groups=1, bias=False)
    x = b.add("BNLayer", [c], {"gamma": np.ones(cout), "beta": np.zeros(cout), "mean": np.zeros(cout),
                               "var": np.ones(cout)}, channels=cout, relu=True)
    gp = b.add("GlobalPool", [x])
    if classes:
        gp = b.add("FC", [gp], {"weight": np.ones((classes, cout)), "bias": np.zeros(classes)},
                   in_features=cout, out_features=classes)
    b.add("Output", [gp])
    return b.build()


def test_conv_bn_param_count():
    g, w = conv_bn()
    assert count_params(g, w) == 9 * 2 * 4 + 2 * 4 == 80


def test_single_conv_flops():
    g, _ = conv_bn(cin=1, cout=1, k=3, hw=6, pad=0)
    assert count_flops(g, None, FlopsConvention(mac_factor=1)) == 144


def test_fc_flops():
    b = GraphBuilder((100, 1, 1))
    gp = b.add("GlobalPool", [b.input])
    fc = b.add("FC", [gp], {"weight": np.zeros((10, 100)), "bias": np.zeros(10)}, in_features=100, out_features=10)
    b.add("Output", [fc])
    g, _ = b.build()
    assert count_flops(g, None, FlopsConvention(mac_factor=1)) == 1000


@pytest.mark.parametrize("name,ref,tol", [("resnet164", 251.0e6, 0.10), ("resnext29-8x64d", 5.00e9, 0.10)])
def test_published_flops(name, ref, tol):
    g, _ = zoo.build(name, 0)
    got = count_flops(g, (3, 32, 32), FlopsConvention(mac_factor=1))
    assert abs(got / ref - 1) < tol


@given(st.integers(0, 10_000))
def test_mac_factor_doubles(seed):
    g, _ = random_net(np.random.default_rng(seed))
    one = count_flops(g, None, FlopsConvention(mac_factor=1))
    assert count_flops(g, None, FlopsConvention(mac_factor=2)) == 2 * one


def test_flops_convention_rejects_other_factors():
    with pytest.raises(ValueError):
        FlopsConvention(mac_factor=3)


def test_bn_flops_flag():
    g, _ = conv_bn(cin=1, cout=2, k=1, hw=3, pad=0)
    assert count_flops(g, None, FlopsConvention(include_bn=True)) - count_flops(g) == 2 * 9


def test_identity_report():
    g, w = zoo.build_toy_cnn(0)
    r = compression_report((g, w), (g, w))
    assert r.model_cr == 1.0 and r.theoretical_sr == 1.0
    assert r.params_before == r.params_after


def test_hand_computed_cr():
    g, w = conv_bn(cin=3, cout=4, k=3, hw=4, classes=2)
    f, _ = expand_fine(g, None)
    cls = classify_bn_vertices(f)
    gs = build_groups(f, cls)
    w[2]["gamma"][:] = [0.1, 0.9, 0.2, 0.8]
    plan = select_threshold(compute_scores(w, gs, None, "vertex"), 0.5, g, cls, gs)
    g2, w2 = prune_vertices(g, w, plan)
    before = 3 * 4 * 9 + 2 * 4 + 2 * 4 + 2
    after = 3 * 2 * 9 + 2 * 2 + 2 * 2 + 2
    r = compression_report((g, w), (g2, w2))
    assert (r.params_before, r.params_after) == (before, after)
    assert r.model_cr == before / after
    conv_flops = lambda c: 9 * 3 * c * 16
    assert r.theoretical_sr == (conv_flops(4) + 8) / (conv_flops(2) + 4)


@given(st.integers(0, 10_000))
def test_params_additive_over_layers(seed):
    g, w = random_net(np.random.default_rng(seed))
    assert sum(layer_params(g, w).values()) == count_params(g, w)


@given(st.integers(0, 10_000))
def test_pruning_never_increases_counts(seed):
    rng = np.random.default_rng(seed)
    g, w = random_net(rng)
    randomize_bn(w, rng)
    f, _ = expand_fine(g, None)
    cls = classify_bn_vertices(f)
    gs = build_groups(f, cls)
    plan = select_threshold(compute_scores(w, gs, None, "vertex"), float(rng.uniform(0, 1)), g, cls, gs)
    g2, w2 = prune_vertices(g, w, plan)
    assert count_params(g2, w2) <= count_params(g, w)
    assert count_flops(g2) <= count_flops(g)
    if plan.units_to_prune:
        assert count_params(g2, w2) < count_params(g, w)
        assert count_flops(g2) < count_flops(g)


def test_report_table_and_json():
    g, w = zoo.build_toy_cnn(0)
    r = compression_report((g, w), (g, w))
    r.practical_sr = 1.02
    text = r.table("toy")
    for col in ("Model Size (M)", "Model CR", "FLOPs", "Theoretical SR", "Practical SR"):
        assert col in text
    assert "1.02" in text
    j = r.to_json()
    assert CompressionReport(**j).to_json() == j


def test_latency_self_comparison():
    g, w = zoo.build_toy_cnn(0)
    res = measure_latency(g, w, batch_size=8, warmup_reps=3, timed_reps=30, baseline=(g, w))
    assert res.reps >= 30
    assert 0.9 <= res.practical_sr <= 1.1
    assert res.median_ms > 0 and res.iqr_ms >= 0


def test_latency_grows_with_batch():
    g, w = zoo.build_toy_cnn(0)
    small = measure_latency(g, w, batch_size=4, warmup_reps=3, timed_reps=30).median_ms
    large = measure_latency(g, w, batch_size=64, warmup_reps=3, timed_reps=30).median_ms
    assert large > small


def test_latency_rejects_bad_reps():
    g, w = zoo.build_toy_cnn(0)
    with pytest.raises(ValueError):
        measure_latency(g, w, timed_reps=0)

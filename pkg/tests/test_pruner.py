import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from netgen import random_net, randomize_bn

from gap import zoo
from gap.engine import predict
from gap.ir import expand_fine, validate_graph, weights_equal
from gap.metrics import count_params
from gap.pruner import (
    PlanError,
    PrunePlan,
    check_invariants,
    compute_scores,
    masked_weights,
    prune,
    prune_edges,
    prune_vertices,
    select_threshold,
)
from gap.regularize import attach_edge_scales, edge_scale_vertices
from gap.topology import build_groups, classify_bn_vertices, select_edge_candidates


def analysis(g):
    f, _ = expand_fine(g, None)
    cls = classify_bn_vertices(f)
    return cls, build_groups(f, cls)


def vertex_plan(g, w, ratio):
    cls, gs = analysis(g)
    return select_threshold(compute_scores(w, gs, None, "vertex"), ratio, g, cls, gs)


def max_logit_gap(g1, w1, g2, w2, rng, batches=10):
    gap = 0.0
    for _ in range(batches):
        x = rng.standard_normal((4,) + g1.input_shape).astype(np.float32)
        gap = max(gap, float(np.abs(predict(g1, w1, x) - predict(g2, w2, x)).max()))
    return gap


@pytest.mark.parametrize("seed", range(50))
def test_vertex_surgery_matches_masked_forward(seed):
    rng = np.random.default_rng(seed)
    g, w = random_net(rng, blocks=int(rng.integers(1, 4)))
    randomize_bn(w, rng)
    plan = vertex_plan(g, w, float(rng.uniform(0.1, 0.9)))
    g2, w2 = prune_vertices(g, w, plan)
    assert validate_graph(g2, w2).ok
    check_invariants(g2, w2, g)
    assert len(g2.vertices) <= len(g.vertices)
    assert max_logit_gap(g, masked_weights(w, plan), g2, w2, rng) < 1e-5


def edge_setup(rng, **kw):
    g, w = random_net(rng, need_concat=True, **kw)
    randomize_bn(w, rng)
    cands = select_edge_candidates(g)
    g, delta = attach_edge_scales(g, cands)
    for d in delta.values():
        d["scale"][:] = rng.uniform(-1.5, 1.5)
    return g, {**w, **delta}, cands


@pytest.mark.parametrize("seed", range(32))
def test_edge_surgery_matches_masked_forward(seed):
    rng = np.random.default_rng(1000 + seed)
    g, w, cands = edge_setup(rng)
    plan = select_threshold(compute_scores(w, None, cands, "edge", g), float(rng.uniform(0.2, 1.0)), g, cands=cands)
    g2, w2 = prune_edges(g, w, plan, cands)
    assert validate_graph(g2, w2).ok
    check_invariants(g2, w2, g)
    assert len(g2.vertices) <= len(g.vertices)
    masked = masked_weights(w, plan, edge_scale_vertices(g))
    assert max_logit_gap(g, masked, g2, w2, rng) < 1e-5


def test_score_examples():
    n = zoo._Net((3, 6, 6), 0)
    a = n.bn(n.conv(n.b.input, 3, 2), 2, relu=False)
    b = n.bn(n.conv(n.b.input, 3, 2), 2, relu=False)
    n.head(n.add([a, b], 2, relu=True), 2, 3)
    g, w = n.build()
    w[a]["gamma"][:] = [0.3, -0.5]
    w[b]["gamma"][:] = [0.4, 0.5]
    cls, gs = analysis(g)
    scores = {e.unit: e for e in compute_scores(w, gs, None, "vertex").entries}
    assert [e.kind for e in scores.values()] == ["group", "group"]
    got = sorted(round(e.score, 5) for e in scores.values())
    assert got == [0.35355, 0.5]


def test_singleton_score_is_abs_gamma():
    n = zoo._Net((3, 6, 6), 0)
    x = n.bn(n.conv(n.b.input, 3, 3), 3)
    n.head(x, 3, 2)
    g, w = n.build()
    w[x]["gamma"][:] = [-0.5, 2.0, 0.25]
    cls, gs = analysis(g)
    s = sorted(e.score for e in compute_scores(w, gs, None, "vertex").entries)
    assert s == [0.25, 0.5, 2.0]


@given(st.integers(0, 10_000))
def test_scores_match_independent_formula(seed):
    rng = np.random.default_rng(seed)
    g, w = random_net(rng)
    randomize_bn(w, rng)
    cls, gs = analysis(g)
    got = {e.unit: e.score for e in compute_scores(w, gs, None, "vertex").entries}
    want = {}
    for s in gs.singletons:
        v, c = gs.provenance[s]
        want[s] = abs(float(w[v]["gamma"][c]))
    for gr in gs.groups:
        sq = [float(w[v]["gamma"][c]) ** 2 for v, c in (gs.provenance[m] for m in gr.members)]
        want[gr.id] = math.sqrt(sum(sq) / len(sq))
    assert got.keys() == want.keys()
    assert all(abs(got[k] - want[k]) <= 1e-12 * max(1.0, want[k]) for k in want)


def one_layer(gammas):
    n = zoo._Net((3, 6, 6), 0)
    x = n.bn(n.conv(n.b.input, 3, len(gammas)), len(gammas))
    n.head(x, len(gammas), 2)
    g, w = n.build()
    w[x]["gamma"][:] = gammas
    return g, w, x


def test_ratio_zero_is_empty_plan():
    g, w, _ = one_layer([0.1, 0.2, 0.3, 0.4])
    plan = vertex_plan(g, w, 0.0)
    assert plan.units_to_prune == [] and not any(plan.channels.values())
    assert plan.to_json()["threshold"] is None
    g2, w2 = prune(g, w, plan)
    assert g2.structurally_equal(g) and weights_equal(w, w2)


def test_half_ratio_prunes_two_smallest():
    g, w, bn = one_layer([0.3, 0.1, 0.4, 0.2])
    plan = vertex_plan(g, w, 0.5)
    assert plan.channels[bn] == [1, 3]
    assert plan.threshold == pytest.approx(0.2)
    g2, w2 = prune(g, w, plan)
    assert np.allclose(w2[bn]["gamma"], [0.3, 0.4])


def test_full_ratio_respects_safety():
    g, w, bn = one_layer([0.3, 0.1, 0.4, 0.2])
    plan = vertex_plan(g, w, 1.0)
    assert plan.units_to_prune and plan.safety_overrides
    assert all("lose all channels" in r for _, r in plan.safety_overrides)
    g2, w2 = prune(g, w, plan)
    assert validate_graph(g2, w2).ok
    assert list(w2[bn]["gamma"]) == [pytest.approx(0.4)]


def test_bad_ratio_is_rejected():
    g, w, _ = one_layer([1.0, 2.0])
    with pytest.raises(PlanError):
        vertex_plan(g, w, 1.5)


def test_surgery_is_deterministic(rng):
    g, w = zoo.build_toy_cnn(0)
    randomize_bn(w, rng)
    plan = vertex_plan(g, w, 0.4)
    a = prune(g, w, plan)
    b = prune(g, w, plan)
    assert a[0].structurally_equal(b[0]) and weights_equal(a[1], b[1])
    again = prune(*a, vertex_plan(*a, 0.0))
    assert again[0].structurally_equal(a[0]) and weights_equal(again[1], a[1])


def test_residual_add_shrinks_with_its_group(rng):
    n = zoo._Net((3, 6, 6), 0)
    x = n.bn(n.conv(n.b.input, 3, 3), 3)
    h = n.bn(n.conv(x, 3, 3), 3)
    h = n.bn(n.conv(h, 3, 3), 3, relu=False)
    add = n.add([h, x], 3, relu=True)
    n.head(add, 3, 2)
    g, w = n.build()
    randomize_bn(w, rng)
    w[x]["gamma"][1] = 1e-4
    w[h]["gamma"][1] = -2e-4
    cls, gs = analysis(g)
    plan = select_threshold(compute_scores(w, gs, None, "vertex"), 0.2, g, cls, gs)
    assert plan.channels.get(x) == [1] and plan.channels.get(h) == [1]
    g2, w2 = prune(g, w, plan)
    assert g2.vertex(add).attrs["channels"] == 2
    assert max_logit_gap(g, masked_weights(w, plan), g2, w2, rng) < 1e-5


def test_removing_one_of_four_paths():
    g0, w0 = zoo.build_toy_multipath(4, 0)
    cands = select_edge_candidates(g0)
    g, delta = attach_edge_scales(g0, cands)
    w = {**w0, **delta}
    es = edge_scale_vertices(g)
    first = min(cands.concat_of.values())
    victim = min(e for e in cands.candidates if cands.concat_of[e] == first)
    w[es[victim]]["scale"][:] = 0.01
    plan = select_threshold(compute_scores(w, None, cands, "edge", g), 1 / len(cands.candidates), g, cands=cands)
    assert plan.units_to_prune == [victim]
    g2, w2 = prune(g, masked_weights(w, plan, es), plan, cands)
    assert len(g2.in_edges(first)) == 3
    # path layers plus the slice of the fuse conv that read the path
    path = cands.path_map[victim]
    path_params = sum(w0[v][k].size for v in path for k in ("kernel", "gamma", "beta") if k in w0.get(v, {}))
    fuse = g0.children(first)[0]
    slice_params = w0[fuse]["kernel"].shape[0] * 8
    assert count_params(g0, w0) - count_params(g2, w2) == path_params + slice_params


def test_plan_json_round_trip(rng):
    g, w = zoo.build_toy_cnn(0)
    randomize_bn(w, rng)
    plan = vertex_plan(g, w, 0.3)
    text = json.dumps(plan.to_json())
    back = PrunePlan.from_json(json.loads(text))
    assert back.to_json() == plan.to_json()
    a = prune(g, w, plan)
    b = prune(g, w, back)
    assert weights_equal(a[1], b[1])


def test_plan_for_unknown_vertex_is_rejected():
    g, w, _ = one_layer([0.1, 0.2])
    with pytest.raises(PlanError):
        prune_vertices(g, w, PrunePlan("vertex", 0.5, 0.1, [1], [], {999: [0]}))


def test_edge_plan_rejects_non_candidates():
    g0, w0 = zoo.build_toy_multipath(2, 0)
    cands = select_edge_candidates(g0)
    g, delta = attach_edge_scales(g0, cands)
    with pytest.raises(PlanError):
        prune_edges(g, {**w0, **delta}, PrunePlan("edge", 0.5, 0.1, [10_000]), cands)

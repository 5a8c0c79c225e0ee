import numpy as np
import pytest

from gap import engine, zoo
from gap.ir import expand_fine, validate_graph
from gap.metrics import count_params
from gap.topology import select_edge_candidates

# Published baseline model sizes (millions of parameters).
PAPER_PARAMS = {
    "resnext29-8x64d": 34.43,
    "resnet164": 1.70,
    "densenet40": 1.06,
    "resnext50-32x4d": 25.03,
    "densenet-bc-121": 7.98,
}


@pytest.mark.parametrize("name", sorted(PAPER_PARAMS))
def test_parameter_counts_match_published(name):
    g, w = zoo.build(name, 0)
    assert validate_graph(g, w).ok
    got = count_params(g, w) / 1e6
    assert abs(got / PAPER_PARAMS[name] - 1) < 0.05


@pytest.mark.parametrize("name", ["toy", "multipath", "resnet164", "densenet40"])
def test_builders_validate_and_expand(name):
    g, w = zoo.build(name, 0)
    assert validate_graph(g, w).ok
    f, fw = expand_fine(g, w if name in ("toy", "multipath") else None)
    assert validate_graph(f, fw if name in ("toy", "multipath") else None).ok


def test_toy_cnn_shape_and_size():
    g, w = zoo.build_toy_cnn(0)
    assert 30_000 <= count_params(g, w) <= 60_000
    assert len(g.of_kind("AddLayer")) == 2
    assert len(g.of_kind("Concat")) == 1
    x = np.zeros((2, 3, 16, 16), np.float32)
    assert engine.predict(g, w, x).shape == (2, 8)


def test_builders_are_deterministic():
    a = zoo.build_toy_cnn(5)
    b = zoo.build_toy_cnn(5)
    c = zoo.build_toy_cnn(6)
    assert a[0].structurally_equal(b[0])
    assert all(np.array_equal(a[1][v][k], b[1][v][k]) for v in a[1] for k in a[1][v])
    assert not np.array_equal(a[1][1]["kernel"], c[1][1]["kernel"])


def test_init_convention():
    g, w = zoo.build_toy_cnn(0)
    for v in g.of_kind("BNLayer"):
        d = w[v.id]
        assert np.all(d["gamma"] == 1) and np.all(d["beta"] == 0)
        assert np.all(d["mean"] == 0) and np.all(d["var"] == 1)
    k = w[1]["kernel"]
    assert abs(k.std() - np.sqrt(2 / (9 * 3))) < 0.1


@pytest.mark.parametrize("paths", [2, 4, 8])
def test_multipath_candidates(paths):
    g, _ = zoo.build_toy_multipath(paths, 0)
    cands = select_edge_candidates(g)
    for cv in g.of_kind("Concat"):
        assert sum(cands.concat_of[e] == cv.id for e in cands.candidates) == paths


def test_multipath_rejects_single_path():
    with pytest.raises(zoo.UnsupportedSpec):
        zoo.build_toy_multipath(1, 0)


def test_unsupported_specs():
    with pytest.raises(zoo.UnsupportedSpec):
        zoo.build("vgg16")
    with pytest.raises(zoo.UnsupportedSpec):
        zoo.build_resnet_cifar(depth=50)
    with pytest.raises(zoo.UnsupportedSpec):
        zoo.build_densenet(depth=41)


def test_resnext_paths_form_matches_grouped_size():
    spec = zoo.ArchSpec("resnext", depth=11, cardinality=4, width=4, bottleneck=True, input_shape=(3, 32, 32))
    g1, w1 = zoo.build(spec, 0)
    spec.paths_form = True
    g2, w2 = zoo.build(spec, 0)
    # splitting a grouped conv into explicit paths moves parameters around without adding any
    assert count_params(g2, w2) == count_params(g1, w1)
    assert len(select_edge_candidates(g2).candidates) == 4 * 3

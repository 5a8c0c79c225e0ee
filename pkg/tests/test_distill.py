import mpmath
import numpy as np
import pytest
import torch
from gradcheck import all_ops_net, check_graph_gradients
from hypothesis import given
from hypothesis import strategies as st
from netgen import randomize_bn

from gap import zoo
from gap.data import SyntheticSource, generate_synthetic
from gap.distill import KDConfig, Teacher, finetune, kd_divergence, kd_loss, mean_kl
from gap.engine import Batch, forward, softmax_cross_entropy, to_torch
from gap.ir import copy_weights, expand_fine, weights_equal
from gap.pruner import compute_scores, prune, select_threshold
from gap.regularize import TrainConfig, train_loop
from gap.topology import build_groups, classify_bn_vertices


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(SyntheticSource(classes=4, train_samples=256, test_samples=64, image_size=(3, 8, 8)))


def small_toy(seed=0):
    return zoo.build_toy_cnn(seed, num_classes=4, input_shape=(3, 8, 8), widths=(4, 6, 6))


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def test_equal_logits_reduce_to_cross_entropy(rng):
    s = t64(rng.standard_normal((5, 4)))
    y = torch.as_tensor(rng.integers(0, 4, 5))
    assert float(kd_loss(s, s.clone(), y, KDConfig())) == pytest.approx(float(softmax_cross_entropy(s, y)), abs=1e-12)


def test_zero_soft_weight_is_exact_cross_entropy(rng):
    s, t = t64(rng.standard_normal((5, 4))), t64(rng.standard_normal((5, 4)))
    y = torch.as_tensor(rng.integers(0, 4, 5))
    assert torch.equal(kd_loss(s, t, y, KDConfig(soft_weight=0.0)), softmax_cross_entropy(s, y))


def test_two_class_value_against_mpmath():
    mpmath.mp.dps = 40
    s, t, T = [1.0, -1.0], [0.5, 0.0], 5
    p = [mpmath.exp(mpmath.mpf(v) / T) for v in t]
    p = [v / sum(p) for v in p]
    q = [mpmath.exp(mpmath.mpf(v) / T) for v in s]
    q = [v / sum(q) for v in q]
    kl = sum(pi * mpmath.log(pi / qi) for pi, qi in zip(p, q))
    ce = -mpmath.log(mpmath.exp(1) / (mpmath.exp(1) + mpmath.exp(-1)))
    want = float(ce + T * T * kl)
    got = float(kd_loss(t64([s]), t64([t]), torch.tensor([0]), KDConfig(temperature=T)))
    assert abs(got - want) < 1e-12


@given(st.integers(0, 10_000), st.floats(0.5, 10))
def test_divergence_is_nonnegative(seed, temperature):
    rng = np.random.default_rng(seed)
    s, t = t64(rng.normal(0, 5, (6, 5))), t64(rng.normal(0, 5, (6, 5)))
    assert float(kd_divergence(s, t, temperature)) >= -1e-12


def test_config_validation(rng):
    with pytest.raises(ValueError):
        KDConfig(temperature=0)
    with pytest.raises(ValueError):
        KDConfig(soft_weight=-1)
    with pytest.raises(ValueError):
        kd_loss(torch.zeros(2, 3), torch.zeros(2, 4), torch.zeros(2, dtype=torch.long), KDConfig())


def test_kd_gradients_match_finite_differences(rng):
    g, w = all_ops_net(4)
    teacher = torch.as_tensor(rng.normal(0, 2, (4, 3)))
    cfg = KDConfig(temperature=5.0, soft_weight=1.0)
    batch = Batch(rng.standard_normal((4,) + g.input_shape), rng.integers(0, 3, 4))
    res = check_graph_gradients(g, w, batch, "train", data_loss=lambda s, y: kd_loss(s, teacher, y, cfg))
    assert res.max_rel_err < 1e-4


def test_teacher_is_not_updated(tiny):
    g, w = small_toy()
    before = copy_weights(w)
    finetune(g, w, g, w, tiny, KDConfig(epochs=1, batch_size=64), use_kd=True, seed=0)
    assert weights_equal(before, w)


def test_teacher_caches_per_batch(rng):
    g, w = small_toy()
    teacher = Teacher(g, w)
    x = torch.as_tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
    assert teacher(x) is teacher(x)


def test_plain_finetune_equals_train_loop(tiny):
    g, w = small_toy()
    cfg = KDConfig(epochs=2, batch_size=64)
    a, la = finetune(g, w, None, None, tiny, cfg, use_kd=False, seed=5)
    b, lb = train_loop(g, w, tiny, TrainConfig(2, 64, cfg.lr, cfg.schedule, cfg.momentum, cfg.weight_decay), seed=5)
    assert weights_equal(a, b) and la == lb


def test_kd_requires_teacher(tiny):
    g, w = small_toy()
    with pytest.raises(ValueError):
        finetune(g, w, None, None, tiny, KDConfig(epochs=1), use_kd=True, seed=0)


def test_self_distillation_pulls_student_towards_teacher(tiny, rng):
    g, w = small_toy(1)
    randomize_bn(w, rng)
    f, _ = expand_fine(g, None)
    cls = classify_bn_vertices(f)
    gs = build_groups(f, cls)
    plan = select_threshold(compute_scores(w, gs, None, "vertex"), 0.3, g, cls, gs)
    gp, wp = prune(g, w, plan)
    teacher = Teacher(g, w)
    start = mean_kl(gp, wp, teacher, tiny.x_test, 5.0)
    _, log = finetune(gp, wp, g, w, tiny, KDConfig(epochs=3, batch_size=32, schedule="constant"), use_kd=True, seed=0)
    kls = [r["kl_to_teacher"] for r in log]
    assert kls[-1] < start
    assert kls[-1] <= kls[0]


def test_kd_loss_uses_t_squared_scaling(rng):
    s, t = t64(rng.standard_normal((3, 4))), t64(rng.standard_normal((3, 4)))
    y = torch.as_tensor(rng.integers(0, 4, 3))
    for T in (1.0, 2.0, 5.0):
        extra = float(kd_loss(s, t, y, KDConfig(temperature=T))) - float(softmax_cross_entropy(s, y))
        assert extra == pytest.approx(T * T * float(kd_divergence(s, t, T)), rel=1e-10)


def test_mean_kl_of_model_with_itself_is_zero(tiny):
    g, w = small_toy()
    assert mean_kl(g, w, Teacher(g, w), tiny.x_test, 5.0) < 1e-9
    logits, _ = forward(g, to_torch(w), tiny.x_test[:2])
    assert logits.shape == (2, 4)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lipkit.autograd import Variable
from lipkit.gradcheck import check_gradients
from lipkit.ndtensor import Rng, ShapeError
from lipkit.nn import Param
from lipkit.recipe import (
    AdamState,
    RecipeConfig,
    SchedulerState,
    adam_step,
    cosine_lr,
    cross_entropy,
    label_smooth,
    log_softmax,
    mixup_batch,
    scale_lr,
    scheduler_epoch_end,
    smooth_targets,
)


@pytest.mark.parametrize("n, on, off", [(10, 0.91, 0.01), (500, 0.9002, 0.0002)])
def test_label_smooth_values(n, on, off):
    q = label_smooth(0, n, 0.1)
    assert abs(q[0] - on) <= 1e-9
    assert np.all(np.abs(q[1:] - off) <= 1e-9)


def test_label_smooth_zero_eps_is_one_hot():
    np.testing.assert_array_equal(label_smooth(2, 4, 0.0), [0, 0, 1, 0])


@pytest.mark.parametrize("n", [2, 10, 500])
def test_label_smooth_properties(n):
    for y in {0, n // 2, n - 1}:
        q = label_smooth(y, n, 0.1)
        assert abs(q.sum() - 1) <= 1e-6
        assert np.all(q > 0)
        assert q.argmax() == y


def test_label_smooth_errors():
    with pytest.raises(ValueError):
        label_smooth(3, 3, 0.1)
    with pytest.raises(ValueError):
        label_smooth(0, 3, 1.0)


@pytest.mark.parametrize("n", [2, 10, 500])
def test_cross_entropy_uniform_logits(n):
    q = label_smooth(0, n, 0.0)
    assert abs(float(cross_entropy(np.zeros(n), q).data) - math.log(n)) <= 1e-9


def test_cross_entropy_entropy_identity():
    logits = np.array([0.3, -1.2, 2.0, 0.1])
    p = np.exp(log_softmax(logits))
    loss = float(cross_entropy(logits, p).data)
    assert loss == pytest.approx(-(p * np.log(p)).sum(), abs=1e-12)


def test_cross_entropy_stable_for_large_logits():
    loss = float(cross_entropy(np.array([1000.0, 0.0]), [1.0, 0.0]).data)
    assert loss == pytest.approx(0.0, abs=1e-12)
    loss = float(cross_entropy(np.array([0.0, 1000.0]), [1.0, 0.0]).data)
    assert loss == pytest.approx(1000.0)


def test_cross_entropy_monotone_in_correct_logit():
    prev = math.inf
    for a in np.linspace(-5, 5, 21):
        v = float(cross_entropy(np.array([a, 0.0, 0.5]), [1.0, 0.0, 0.0]).data)
        assert 0 <= v < prev
        prev = v


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros(3), [0.5, 0.6, 0.0])
    with pytest.raises(ValueError):
        cross_entropy(np.zeros(2), [1.5, -0.5])
    with pytest.raises(ShapeError):
        cross_entropy(np.zeros(3), [1.0, 0.0])


@pytest.mark.parametrize("batch", [1, 2, 5, 3, 4])
def test_cross_entropy_gradient(batch):
    rng = np.random.default_rng(batch)
    logits = Variable(rng.normal(size=(batch, 4)), requires_grad=True)
    q = smooth_targets(rng.integers(0, 4, batch), 4, 0.1)
    assert check_gradients(lambda: cross_entropy(logits, q), [logits]) <= 1e-6


# ---------------------------------------------------------------- mixup

def test_mixup_endpoints():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    q = smooth_targets([0, 1, 2, 0], 3, 0.0)
    perm = [1, 2, 3, 0]
    same = mixup_batch(x, q, lam=1.0, perm=perm)
    np.testing.assert_array_equal(same.x, x)
    np.testing.assert_array_equal(same.q, q)
    other = mixup_batch(x, q, lam=0.0, perm=perm)
    np.testing.assert_array_equal(other.x, x[perm])
    np.testing.assert_array_equal(other.q, q[perm])


def test_mixup_hand_example():
    x = np.stack([np.ones(3), np.zeros(3)])
    q = smooth_targets([1, 2], 3, 0.0)
    m = mixup_batch(x, q, boundary=np.array([[1.0, 0.0], [0.0, 1.0]]), lam=0.3, perm=[1, 0])
    np.testing.assert_allclose(m.x[0], 0.3)
    np.testing.assert_allclose(m.q[0], [0.0, 0.3, 0.7])
    np.testing.assert_allclose(m.boundary[0], [0.3, 0.7])


@settings(max_examples=50)
@given(st.integers(1, 8), st.integers(0, 10_000), st.booleans())
def test_mixup_properties(B, seed, per_sample):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, 2, 3))
    q = smooth_targets(rng.integers(0, 5, B), 5, 0.1)
    m = mixup_batch(x, q, alpha=0.2, rng=Rng(seed), per_sample=per_sample)
    assert np.all(np.abs(m.q.sum(axis=1) - 1) <= 1e-6)
    lo = np.minimum(x, x[m.perm]) - 1e-12
    hi = np.maximum(x, x[m.perm]) + 1e-12
    assert np.all((m.x >= lo) & (m.x <= hi))
    assert np.all((m.lam > 0) & (m.lam < 1))
    if not per_sample:
        assert np.all(m.lam == m.lam[0])


def test_mixup_errors():
    with pytest.raises(ValueError):
        mixup_batch(np.zeros((0, 2)), np.zeros((0, 2)), rng=Rng(0))
    with pytest.raises(ValueError):
        mixup_batch(np.zeros((2, 2)), np.eye(2), lam=0.5, perm=[0, 0])


# ---------------------------------------------------------------- optimiser

@pytest.mark.parametrize("batch, lr", [(32, 3e-4), (64, 6e-4), (16, 1.5e-4)])
def test_scale_lr(batch, lr):
    assert abs(scale_lr(3e-4, batch, 32) - lr) <= 1e-9


def test_adam_first_step_is_minus_lr():
    p = Param(np.array([0.5]), "p")
    p.accumulate(np.array([1.0]))
    adam_step([p], AdamState(), lr=1e-3)
    assert abs((p.data[0] - 0.5) - (-1e-3 / (1 + 1e-8))) <= 1e-9
    assert not p.has_grad and p.grad[0] == 0.0


def test_adam_zero_gradient_no_decay_is_noop():
    p = Param(np.array([0.5, -2.0]), "p")
    p.accumulate(np.zeros(2))
    adam_step([p], AdamState(), lr=1e-2)
    np.testing.assert_array_equal(p.data, [0.5, -2.0])


@pytest.mark.parametrize("decoupled", [False, True])
def test_adam_weight_decay_shrinks_positive_param(decoupled):
    p = Param(np.array([0.8]), "p")
    p.accumulate(np.zeros(1))
    adam_step([p], AdamState(), lr=1e-2, weight_decay=1e-4, decoupled=decoupled)
    assert p.data[0] < 0.8


def test_adam_decay_exclusion_for_vectors():
    w = Param(np.ones((2, 2)), "w")
    b = Param(np.ones(2), "b")
    for p in (w, b):
        p.accumulate(np.zeros(p.shape))
    adam_step([w, b], AdamState(), lr=1e-2, weight_decay=0.1, decay_norm_and_bias=False)
    assert np.all(w.data < 1) and np.all(b.data == 1)


def test_adam_requires_gradients_and_is_deterministic():
    with pytest.raises(RuntimeError):
        adam_step([Param(np.ones(2), "p")], AdamState(), lr=1e-3)
    outs = []
    for _ in range(2):
        p = Param(np.array([1.0, 2.0]), "p")
        st_ = AdamState()
        for g in ([0.3, -0.1], [0.2, 0.5]):
            p.accumulate(np.array(g))
            adam_step([p], st_, lr=1e-2, weight_decay=1e-4)
        outs.append(p.data.copy())
        assert np.all(st_.v["p"] >= 0)
    np.testing.assert_array_equal(outs[0], outs[1])


# ---------------------------------------------------------------- schedulers

@pytest.mark.parametrize("t, factor", [(0, 1.0), (20, 0.5 * (1 + math.cos(math.pi / 4))), (40, 0.5), (80, 0.0)])
def test_cosine_values(t, factor):
    assert abs(cosine_lr(t, 80, 3e-4) - factor * 3e-4) <= 1e-9
    if t == 20:
        assert cosine_lr(t, 80, 3e-4) == pytest.approx(2.5607e-4, abs=1e-8)


def test_cosine_non_increasing_and_bounded():
    vals = [cosine_lr(t, 80, 1.0) for t in range(81)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        cosine_lr(81, 80, 1.0)


def test_exponential_ten_epochs():
    cfg = RecipeConfig(scheduler="exponential")
    st_ = SchedulerState.start("exponential", 3e-4)
    for _ in range(10):
        scheduler_epoch_end(st_, 0.5, cfg)
    assert abs(st_.lr - 3e-4 * 0.95 ** 10) <= 1e-9
    assert st_.lr == pytest.approx(1.7962e-4, abs=1e-8)


def test_plateau_trace():
    cfg = RecipeConfig()
    st_ = SchedulerState.start("plateau", 3e-4)
    lrs = [scheduler_epoch_end(st_, e, cfg) for e in (10, 9, 9.5, 9.2, 9.1)]
    assert lrs[:4] == [3e-4] * 4
    assert abs(lrs[4] - 1.5e-4) <= 1e-9


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60))
def test_plateau_monotone_and_floored(errors):
    cfg = RecipeConfig(min_lr=1e-6)
    st_ = SchedulerState.start("plateau", 1e-5)
    prev = st_.lr
    for e in errors:
        lr = scheduler_epoch_end(st_, e, cfg)
        assert cfg.min_lr <= lr <= prev
        prev = lr


def test_cosine_scheduler_state_matches_closed_form():
    cfg = RecipeConfig(scheduler="cosine", total_epochs=10)
    st_ = SchedulerState.start("cosine", 1e-3)
    for t in range(1, 11):
        assert scheduler_epoch_end(st_, 0.0, cfg) == cosine_lr(t, 10, 1e-3)


def test_recipe_config_validation():
    RecipeConfig().validate()
    assert RecipeConfig().lr == 3e-4
    with pytest.raises(ValueError):
        RecipeConfig(epsilon=1.0).validate()
    with pytest.raises(ValueError):
        RecipeConfig(scheduler="step").validate()
    with pytest.raises(ValueError):
        RecipeConfig(batch=0).validate()

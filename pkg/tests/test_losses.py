"""Loss functions: hand values, reference evaluations, gradients and properties."""
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ntml import losses
from ntml import tensor as tn
from ntml.errors import ConfigError, UsageError
from ntml.losses import SoftLabel
from ntml.tensor import Tensor

logit_vec = arrays(np.float64, (4,), elements=st.floats(-8, 8))


def ref_log_softmax(z, T=1.0):
    s = [v / T for v in z]
    m = max(s)
    lse = m + math.log(sum(math.exp(v - m) for v in s))
    return [v - lse for v in s]


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_uniform_is_log_k():
    assert losses.cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_hand_value():
    assert losses.cross_entropy(Tensor([2.0, 1.0, 0.0]), 0).item() == pytest.approx(0.40760596444, abs=1e-10)


def test_cross_entropy_batch_mean():
    z = Tensor(np.array([[2.0, 1.0, 0.0], [0.0, 0.0, 0.0]]))
    expect = (0.40760596444 + math.log(3)) / 2
    assert losses.cross_entropy(z, [0, 1]).item() == pytest.approx(expect, abs=1e-10)


def test_cross_entropy_label_errors():
    with pytest.raises(UsageError):
        losses.cross_entropy(Tensor(np.zeros(3)), 3)
    with pytest.raises(UsageError):
        losses.cross_entropy(Tensor(np.zeros((2, 3))), [0])


# ---------------------------------------------------------------- non-target softmax

def test_nontarget_probs_hand_value():
    p = losses.nontarget_probs(Tensor([9.0, math.log(2), 0.0]), 0).data
    np.testing.assert_allclose(p, [2 / 3, 1 / 3], atol=1e-15)


def test_nontarget_probs_keeps_class_order():
    p = losses.nontarget_probs(Tensor([0.0, 5.0, math.log(3), 0.0]), 1).data
    np.testing.assert_allclose(p, [1 / 5, 3 / 5, 1 / 5], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(logit_vec, st.integers(0, 3), st.floats(-1e6, 1e6))
def test_nontarget_probs_ignore_target_logit(z, t, new_value):
    p = losses.nontarget_probs(Tensor(z), t).data
    z2 = z.copy()
    z2[t] = new_value
    q = losses.nontarget_probs(Tensor(z2), t).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.array_equal(p, q)


def test_nontarget_needs_two_classes():
    with pytest.raises(UsageError):
        losses.nontarget_probs(Tensor([1.0]), 0)


# ---------------------------------------------------------------- NT loss

def test_nt_loss_uniform_teacher_is_log3():
    teacher = SoftLabel(np.array([7.0, 1.0, 1.0, 1.0]), 0)
    assert losses.nt_loss(teacher, Tensor([-2.0, 1.0, 1.0, 1.0])).item() == pytest.approx(math.log(3), abs=1e-12)


def test_nt_loss_saturated_match_is_zero():
    teacher = SoftLabel(np.array([0.0, 60.0, 0.0, 0.0]), 2)
    assert losses.nt_loss(teacher, Tensor([0.0, 60.0, 0.0, 0.0])).item() < 1e-20


def test_nt_loss_gradient_vanishes_at_match(rng):
    z = rng.normal(size=4)
    x = Tensor(z.copy(), requires_grad=True)
    tn.backward(losses.nt_loss(SoftLabel(z, 1), x))
    assert np.max(np.abs(np.delete(x.grad, 1))) < 1e-8
    assert x.grad[1] == 0.0


def test_nt_loss_shape_mismatch():
    with pytest.raises(UsageError):
        losses.nt_loss(SoftLabel(np.zeros(4), 0), Tensor(np.zeros(3)))


@settings(max_examples=60, deadline=None)
@given(logit_vec, logit_vec, st.integers(0, 3))
def test_nt_loss_at_least_teacher_entropy(p_logits, q_logits, t):
    teacher = SoftLabel(p_logits, t)
    cross = losses.nt_loss(teacher, Tensor(q_logits)).item()
    self_ = losses.nt_loss(teacher, Tensor(p_logits)).item()
    assert cross - self_ >= -1e-12


# ---------------------------------------------------------------- ML student loss

def test_ml_student_alpha_zero_is_ce(rng):
    z, zt = Tensor(rng.normal(size=(3, 4))), rng.normal(size=(3, 4))
    a = losses.ml_student_loss(z, zt, [0, 1, 3], 0.0, 2.0).item()
    assert a == losses.cross_entropy(z, [0, 1, 3]).item()


def test_ml_student_alpha_one_self_is_zero(rng):
    z = rng.normal(size=4)
    assert abs(losses.ml_student_loss(Tensor(z), z, 2, 1.0, 2.0).item()) < 1e-12


def test_ml_student_matches_scalar_reference():
    zs, zt, y, alpha, T = [0.3, -1.2, 2.0, 0.5], [1.5, 0.1, -0.4, 0.9], 2, 0.6, 2.0
    lp, lq = ref_log_softmax(zt, T), ref_log_softmax(zs, T)
    kl = sum(math.exp(a) * (a - b) for a, b in zip(lp, lq))
    ce = -ref_log_softmax(zs)[y]
    expect = alpha * kl + (1 - alpha) * ce
    got = losses.ml_student_loss(Tensor(zs), np.array(zt), y, alpha, T).item()
    assert got == pytest.approx(expect, abs=1e-12)
    got_t2 = losses.ml_student_loss(Tensor(zs), np.array(zt), y, alpha, T, t2_scaling=True).item()
    assert got_t2 == pytest.approx(alpha * T * T * kl + (1 - alpha) * ce, abs=1e-12)


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_ml_student_alpha_range(alpha):
    with pytest.raises(ConfigError):
        losses.ml_student_loss(Tensor(np.zeros(3)), np.zeros(3), 0, alpha, 2.0)


def test_ml_student_teacher_is_constant(rng):
    zt = Tensor(rng.normal(size=4), requires_grad=True)
    zs = Tensor(rng.normal(size=4), requires_grad=True)
    tn.backward(losses.ml_student_loss(zs, zt, 1, 0.5, 2.0))
    assert zt.grad is None
    assert zs.grad is not None


# ---------------------------------------------------------------- ML teacher loss

def test_teacher_loss_offset_one_counts_layers(rng):
    taps = [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 5, 2, 2)), rng.normal(size=(2, 7))]
    loss = losses.ml_teacher_loss([Tensor(t) for t in taps], [t + 1.0 for t in taps],
                                  Tensor(np.zeros((2, 4))), [0, 1], beta=0.0)
    assert loss.item() == pytest.approx(3.0, abs=1e-12)


def test_teacher_loss_identical_taps_zero(rng):
    taps = [rng.normal(size=(1, 2, 3, 3))]
    loss = losses.ml_teacher_loss([Tensor(taps[0])], taps, Tensor(np.zeros((1, 3))), [0], 0.0)
    assert loss.item() == 0.0


def test_teacher_loss_reference():
    t_tap = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    s_tap = np.array([[[[0.0, 2.5], [3.0, 2.0]]]])
    z = [0.5, -0.5, 1.0]
    mse = (1.0 + 0.25 + 0.0 + 4.0) / 4
    expect = mse + 2.0 * -ref_log_softmax(z)[1]
    got = losses.ml_teacher_loss([Tensor(t_tap)], [s_tap], Tensor([z]), [1], 2.0).item()
    assert got == pytest.approx(expect, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-5, 5)))
def test_teacher_loss_symmetric_in_values(a, b):
    z = Tensor(np.zeros((1, 3)))
    ab = losses.ml_teacher_loss([Tensor(a)], [b], z, [0], 0.0).item()
    ba = losses.ml_teacher_loss([Tensor(b)], [a], z, [0], 0.0).item()
    assert ab == pytest.approx(ba, rel=1e-12, abs=1e-15)


def test_teacher_loss_errors():
    z = Tensor(np.zeros((1, 3)))
    with pytest.raises(UsageError):
        losses.ml_teacher_loss([Tensor(np.zeros((1, 2, 2, 2)))], [np.zeros((1, 2, 3, 3))], z, [0], 1.0)
    with pytest.raises(UsageError):
        losses.ml_teacher_loss([Tensor(np.zeros((1, 2)))], [], z, [0], 1.0)
    with pytest.raises(ConfigError):
        losses.ml_teacher_loss([Tensor(np.zeros((1, 2)))], [np.zeros((1, 2))], z, [0], -1.0)
    with pytest.raises(ConfigError):
        losses.feature_distance([Tensor(np.zeros((1, 1, 2, 2)))], [np.zeros((1, 1, 2, 2))], "xyz")


# ---------------------------------------------------------------- attention map

def test_attention_map_matches_loops(rng):
    x = rng.normal(size=(3, 4, 4))
    ref = np.zeros((4, 4))
    for c in range(3):
        for h in range(4):
            for w in range(4):
                ref[h, w] += x[c, h, w] ** 2
    np.testing.assert_allclose(losses.attention_map(Tensor(x)).data, ref, rtol=0, atol=1e-12)


def test_attention_map_batched_and_errors(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    out = losses.attention_map(Tensor(x)).data
    assert out.shape == (2, 4, 4)
    np.testing.assert_allclose(out[1], (x[1] ** 2).sum(axis=0))
    with pytest.raises(UsageError):
        losses.attention_map(Tensor(np.zeros((3, 4))))


# ---------------------------------------------------------------- gradients

def _grad_instances(rng):
    for _ in range(5):
        z = rng.normal(size=(3, 4))
        zt = rng.normal(size=(3, 4))
        y = rng.integers(0, 4, size=3)
        taps = [rng.normal(size=(3, 2, 4, 4)), rng.normal(size=(3, 5))]
        yield z, zt, y, taps


def test_every_loss_passes_grad_check(rng):
    worst = 0.0
    for z, zt, y, taps in _grad_instances(rng):
        t = rng.integers(0, 4, size=3)
        w = rng.normal(size=(3, 3))
        checks = [
            (lambda p: losses.cross_entropy(p[0], y), [Tensor(z)]),
            (lambda p: tn.sum(tn.mul(losses.nontarget_probs(p[0], t), w)), [Tensor(z)]),
            (lambda p: losses.nt_loss(SoftLabel(zt, t), p[0]), [Tensor(z)]),
            (lambda p: losses.ml_student_loss(p[0], zt, y, 0.6, 2.0), [Tensor(z)]),
            (lambda p: losses.ml_teacher_loss(p[:2], taps, p[2], y, 2.0),
             [Tensor(taps[0] + rng.normal(size=taps[0].shape)),
              Tensor(taps[1] + rng.normal(size=taps[1].shape)), Tensor(z)]),
            (lambda p: losses.ml_teacher_loss(p[:1], taps[:1], p[1], y, 1.0, "am"),
             [Tensor(taps[0] + 0.5), Tensor(z)]),
        ]
        for f, params in checks:
            worst = max(worst, tn.grad_check(f, params))
    assert worst < 1e-4


# ---------------------------------------------------------------- DER

def test_der_reference_row():
    assert losses.der(0.9443, 0.0330, 0.9112, 0.8802) == pytest.approx(0.94015, abs=1e-9)


def test_der_clamps():
    assert losses.der(0.2, 0.5, 0.9, 0.9) == 0.5
    assert losses.der(1.0, 0.0, 0.9, 0.95) == 1.0
    with pytest.raises(UsageError):
        losses.der(97.0, 2.0, 0.9, 0.9)


frac = st.floats(0, 1)


@settings(max_examples=80, deadline=None)
@given(frac, frac, frac, frac, frac)
def test_der_monotone(asr_b, asr_a, ba_b, ba_a, other):
    base = losses.der(asr_b, asr_a, ba_b, ba_a)
    assume(other <= asr_a)
    assert losses.der(asr_b, other, ba_b, ba_a) >= base
    lower = min(ba_a, other)
    assert losses.der(asr_b, asr_a, ba_b, lower) <= base
    assert 0.0 <= base <= 1.0

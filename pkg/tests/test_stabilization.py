import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polynext.gradcheck import grad_check
from polynext.stabilization import (MultiInputSkip, RegularizationSchedule, SigmoidGates,
                                    apply_sample_mask, drop_path_rates, dropout, dropout_rate_at,
                                    init_sigmoid_logits, sigmoid_scale_apply, stochastic_depth_gate)
from polynext.tensor import Tensor, param

from conftest import project


def test_init_schedule_values():
    s = 1 / (1 + np.exp(-init_sigmoid_logits(3)))
    np.testing.assert_allclose(s, [0.5, 0.3775406688, 0.2689414214], atol=1e-9)
    np.testing.assert_allclose(init_sigmoid_logits(2, "large"), [-0.5, -1.0])
    with pytest.raises(ValueError):
        init_sigmoid_logits(2, "tiny")


def test_sigmoid_scale_residual(rng):
    x, f = rng.standard_normal(4), rng.standard_normal(4)
    y = sigmoid_scale_apply(Tensor(x), Tensor(f), Tensor(np.array(0.0))).data
    np.testing.assert_allclose(y, x + 0.5 * f)


def test_gates_scale_and_gradient(rng):
    g = SigmoidGates(3)
    assert g.scale(0) == 0.5
    x, f = param(rng.standard_normal(3)), param(rng.standard_normal(3))
    rep = grad_check(lambda x, f, l: project(sigmoid_scale_apply(x, f, g.logit(2))), [x, f, g.logits])
    assert rep.passed, rep


def test_multi_input_skip(rng):
    s = MultiInputSkip(2)
    s.s0.data[:] = [1.0, 2.0]
    s.s1.data[:] = [0.5, -1.0]
    a, b = rng.standard_normal((3, 2, 2, 2)), rng.standard_normal((3, 2, 2, 2))
    want = a * np.array([1.0, 2.0])[None, :, None, None] + b * np.array([0.5, -1.0])[None, :, None, None]
    np.testing.assert_allclose(s(Tensor(a), Tensor(b)).data, want)
    xa, xb = param(a[:1, :, :1, :1]), param(b[:1, :, :1, :1])
    assert grad_check(lambda u, v, *_: project(s(u, v)), [xa, xb, s.s0, s.s1]).passed


def test_dropout_schedule_linear():
    sched = RegularizationSchedule(final_dropout=0.3, total_epochs=4)
    rates = [dropout_rate_at(e, sched) for e in range(5)]
    np.testing.assert_allclose(rates, [0.0, 0.1, 0.2, 0.3, 0.3])
    with pytest.raises(ValueError):
        dropout_rate_at(5, sched)
    with pytest.raises(ValueError):
        RegularizationSchedule(final_dropout=1.0)


def test_drop_path_rates_ramp():
    np.testing.assert_allclose(drop_path_rates(5, 0.2), [0, 0.05, 0.1, 0.15, 0.2])
    assert drop_path_rates(1, 0.1).tolist() == [0.1]


def test_stochastic_depth_is_unbiased_monte_carlo():
    rng = np.random.default_rng(0)
    m = stochastic_depth_gate(0.3, True, rng, 100_000)
    assert set(np.unique(m)) <= {0.0, 1 / 0.7}
    assert abs(m.mean() - 1.0) < 0.01
    assert abs((m == 0).mean() - 0.3) < 0.005


def test_stochastic_depth_off_outside_training():
    assert stochastic_depth_gate(0.5, False, None, 4) == 1.0
    assert stochastic_depth_gate(0.0, True, None, 4) == 1.0
    with pytest.raises(ValueError):
        stochastic_depth_gate(0.5, True, None, 4)


def test_sample_mask_gradient(rng):
    x = param(rng.standard_normal((3, 2)))
    mask = np.array([0.0, 2.0, 1.0])
    np.testing.assert_allclose(apply_sample_mask(x, mask).data, x.data * mask[:, None])
    assert grad_check(lambda x: project(apply_sample_mask(x, mask)), x).passed


def test_dropout_is_inverted_and_unbiased():
    rng = np.random.default_rng(1)
    y = dropout(Tensor(np.ones(100_000)), 0.25, True, rng).data
    assert abs(y.mean() - 1.0) < 0.01
    assert dropout(Tensor(np.ones(3)), 0.25, False, None).data.tolist() == [1, 1, 1]


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 0.95), st.integers(1, 50))
def test_dropout_rate_never_exceeds_final(final, total):
    sched = RegularizationSchedule(final_dropout=final, total_epochs=total)
    rates = [dropout_rate_at(e, sched) for e in range(total + 1)]
    assert all(0 <= r <= final + 1e-15 for r in rates)
    assert rates == sorted(rates)

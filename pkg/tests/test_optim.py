import numpy as np
import pytest

from textdiffusion.autodiff import NumericsError, Tensor
from textdiffusion.optim import Adam, effective_lr


def make_param(value):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


class TestLearningRateSchedule:
    def test_warmup_is_linear(self):
        for step in (1, 100, 5000, 10000):
            lr = effective_lr(step, 1e-4, warmup_steps=10000, max_steps=100000)
            assert lr == pytest.approx(1e-4 * step / 10000)

    def test_decay_reaches_zero_at_max_steps(self):
        assert effective_lr(100000, 1e-4, 10000, 100000) == 0.0
        mid = effective_lr(55000, 1e-4, 10000, 100000)
        assert mid == pytest.approx(1e-4 * 0.5)

    def test_decay_is_monotone_after_warmup(self):
        rates = [effective_lr(s, 1e-3, 10, 100) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))


class TestAdam:
    def test_zero_gradient_leaves_fresh_parameters_unchanged(self):
        p = make_param([1.0, -2.0])
        opt = Adam({"p": p}, base_lr=1e-2, warmup_steps=1, max_steps=100)
        p.grad = np.zeros_like(p.data)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_constant_gradient_moves_against_its_sign(self):
        p = make_param([0.0, 0.0])
        opt = Adam({"p": p}, base_lr=1e-2, warmup_steps=1, max_steps=1000)
        g = np.array([3.0, -0.5])
        for _ in range(50):
            p.grad = g.copy()
            opt.step()
        assert p.data[0] < 0.0 and p.data[1] > 0.0

    def test_missing_gradient_rejected_with_name(self):
        p = make_param([1.0])
        opt = Adam({"weights": p}, base_lr=1e-3, warmup_steps=1, max_steps=10)
        with pytest.raises(NumericsError, match="weights"):
            opt.step()

    def test_non_finite_gradient_rejected(self):
        p = make_param([1.0])
        opt = Adam({"p": p}, base_lr=1e-3, warmup_steps=1, max_steps=10)
        p.grad = np.array([np.nan])
        with pytest.raises(NumericsError, match="non-finite"):
            opt.step()

    def test_step_counter_strictly_increasing_and_bounded(self):
        p = make_param([1.0])
        opt = Adam({"p": p}, base_lr=1e-3, warmup_steps=1, max_steps=2)
        for expected in (1, 2):
            p.grad = np.array([1.0])
            opt.step()
            assert opt.state.step_count == expected
        p.grad = np.array([1.0])
        with pytest.raises(NumericsError, match="max_steps"):
            opt.step()

    def test_quadratic_bowl_converges(self):
        p = make_param([5.0])
        opt = Adam({"p": p}, base_lr=0.1, warmup_steps=10, max_steps=500)
        for _ in range(400):
            p.grad = 2.0 * p.data  # d/dp p^2
            opt.step()
        assert abs(p.data[0]) < 1e-2

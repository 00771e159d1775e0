import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semdiff.errors import ParameterError, ShapeError
from semdiff.schedule import (NoiseSchedule, forward_step, interpolate_variance,
                              linear_schedule, posterior_mean, q_sample, reverse_step_mean)


def test_hand_computed_cumulative_products():
    sch = linear_schedule(4, 0.1, 0.4)
    assert np.allclose(sch.betas, [0.1, 0.2, 0.3, 0.4], atol=1e-15)
    # independent oracle: running product by hand
    expected = [0.9, 0.9 * 0.8, 0.9 * 0.8 * 0.7, 0.9 * 0.8 * 0.7 * 0.6]
    assert np.allclose(sch.alpha_bars, expected, atol=1e-12)
    assert np.allclose(sch.alpha_bars, [0.9, 0.72, 0.504, 0.3024], atol=1e-12)


def test_single_step_schedule():
    sch = linear_schedule(1, 0.5, 0.5)
    assert sch.alpha_bars[0] == pytest.approx(0.5, abs=1e-15)
    assert sch.posterior_variances[0] == pytest.approx(0.5)


def test_terminal_signal_fraction_tiny():
    sch = linear_schedule(1000, 1e-4, 0.02)
    # independent oracle: direct running product in python floats
    prod = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= 1.0 - b
    assert abs(prod - sch.alpha_bars[-1]) < 1e-18
    assert sch.alpha_bars[-1] < 1e-4


def test_monotonicity_and_posterior_bound():
    sch = linear_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(sch.alpha_bars) < 0)
    assert np.all(np.diff(sch.betas) >= 0)
    assert np.all(sch.posterior_variances <= sch.betas + 1e-18)
    # root identity per step
    ident = sch.sqrt_alpha_bars ** 2 + sch.sqrt_one_minus_alpha_bars ** 2
    assert np.abs(ident - 1.0).max() < 1e-12


@given(T=st.integers(1, 64),
       b0=st.floats(1e-6, 0.05), spread=st.floats(0.0, 0.5))
@settings(max_examples=40, deadline=None)
def test_schedule_invariants_property(T, b0, spread):
    b1 = min(0.999, b0 * (1.0 + spread * 10))
    sch = linear_schedule(T, b0, b1)
    assert np.all(sch.alpha_bars > 0)
    assert np.all(np.diff(sch.alpha_bars) < 0) or T == 1
    assert np.all(sch.posterior_variances <= sch.betas + 1e-18)
    assert np.abs(sch.sqrt_alpha_bars ** 2 + sch.sqrt_one_minus_alpha_bars ** 2 - 1).max() < 1e-12


@pytest.mark.parametrize("kwargs,fragment", [
    (dict(T=0), "T"),
    (dict(T=10, beta_start=0.0), "beta_start"),
    (dict(T=10, beta_start=0.3, beta_end=0.2), "beta_start"),
    (dict(T=10, beta_start=0.1, beta_end=1.0), "beta_end"),
])
def test_invalid_parameters_named(kwargs, fragment):
    with pytest.raises(ParameterError, match=fragment):
        linear_schedule(**kwargs)


def test_q_sample_noise_free_and_signal_free():
    sch = linear_schedule(4, 0.1, 0.4)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (2, 1, 4, 4))
    zeros = np.zeros_like(x0)
    eps = rng.normal(size=x0.shape)
    for t in (1, 3):
        assert np.allclose(q_sample(sch, x0, t, zeros), np.sqrt(sch.alpha_bars[t - 1]) * x0)
        assert np.allclose(q_sample(sch, zeros, t, eps),
                           np.sqrt(1 - sch.alpha_bars[t - 1]) * eps)


def test_q_sample_scalar_arithmetic():
    sch = linear_schedule(4, 0.1, 0.4)  # alpha_bar_2 = 0.72
    out = q_sample(sch, np.array([[1.0]]), 2, np.array([[1.0]]))
    assert out[0, 0] == pytest.approx(np.sqrt(0.72) + np.sqrt(0.28), abs=1e-12)
    assert out[0, 0] == pytest.approx(1.3776783996, abs=1e-9)


def test_q_sample_errors():
    sch = linear_schedule(4, 0.1, 0.4)
    x = np.zeros((2, 2))
    with pytest.raises(ShapeError):
        q_sample(sch, x, 1, np.zeros((2, 3)))
    for bad_t in (0, 5):
        with pytest.raises(ParameterError):
            q_sample(sch, x, bad_t, x)


def test_forward_step_limits():
    x = np.random.default_rng(1).normal(size=(3, 3))
    eps = np.random.default_rng(2).normal(size=(3, 3))
    # beta -> 0 approaches the identity transition
    sch = linear_schedule(2, 1e-12, 1e-12)
    assert np.abs(forward_step(sch, x, 1, eps) - x).max() < 1e-5
    # x_prev = 0, beta = 0.25 scales the noise by 0.5
    sch = NoiseSchedule(T=1, betas=np.array([0.25]))
    assert np.allclose(forward_step(sch, np.zeros_like(eps), 1, eps), 0.5 * eps)


@pytest.mark.parametrize("t_target", [10, 100, 500])
def test_forward_chain_matches_closed_form_moments(t_target):
    # Monte-Carlo equivalence of the stepwise chain and the closed form;
    # fixed seed keeps the 16 per-pixel 3-sigma comparisons deterministic,
    # and the pooled z-statistic guards against any systematic offset
    sch = linear_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(200 + t_target)
    n = 10_000
    x0 = rng.uniform(-1, 1, (1, 4, 4)).repeat(n, axis=0)
    x = x0.copy()
    for s in range(1, t_target + 1):
        x = forward_step(sch, x, s, rng.standard_normal(x.shape))
    abar = sch.alpha_bars[t_target - 1]
    exp_mean = np.sqrt(abar) * x0[0]
    exp_var = 1.0 - abar
    se_mean = np.sqrt(exp_var / n)
    se_var = exp_var * np.sqrt(2.0 / (n - 1))
    z_mean = (x.mean(axis=0) - exp_mean) / se_mean
    z_var = (x.var(axis=0) - exp_var) / se_var
    assert np.abs(z_mean).max() < 3.0
    assert np.abs(z_var).max() < 3.0
    assert abs(z_mean.sum()) / 4.0 < 3.0  # pooled over the 16 pixels
    assert abs(z_var.sum()) / 4.0 < 3.0


def test_reverse_step_recovers_x0_at_t1():
    sch = linear_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-1, 1, (4, 1, 8, 8))
    eps = rng.standard_normal(x0.shape)
    x1 = q_sample(sch, x0, 1, eps)
    rec = reverse_step_mean(sch, x1, 1, eps)
    assert np.abs(rec - x0).max() < 1e-6


def test_reverse_step_no_correction_limit():
    # eps_hat = 0 and beta -> 0 leaves x_t nearly unchanged
    sch = linear_schedule(2, 1e-12, 1e-12)
    x = np.random.default_rng(4).normal(size=(2, 2))
    assert np.abs(reverse_step_mean(sch, x, 1, np.zeros_like(x)) - x).max() < 1e-9


def test_reverse_step_scalar_formula():
    # alpha_2 = 0.81, alpha_bar_2 = 0.81 * 0.9, beta_2 = 0.19
    sch = NoiseSchedule(T=2, betas=np.array([0.1, 0.19]))
    assert sch.alphas[1] == pytest.approx(0.81)
    assert sch.alpha_bars[1] == pytest.approx(0.81 * 0.9)
    x_t, eps_hat = 1.0, 1.0
    expected = (1 / np.sqrt(0.81)) * (x_t - 0.19 / np.sqrt(1 - 0.729) * eps_hat)
    out = reverse_step_mean(sch, np.array([x_t]), 2, np.array([eps_hat]))
    assert out[0] == pytest.approx(expected, abs=1e-12)


def test_interpolate_variance_endpoints_exact():
    sch = linear_schedule(1000, 1e-4, 0.02)
    v = np.ones((1, 1, 2, 2))
    for t in (2, 500, 1000):
        hi = interpolate_variance(sch, t, v)
        lo = interpolate_variance(sch, t, -v)
        assert (hi == sch.betas[t - 1]).all()
        assert (lo == sch.posterior_variances[t - 1]).all()
        # out-of-range logits clamp to the same endpoints
        assert (interpolate_variance(sch, t, 5 * v) == sch.betas[t - 1]).all()


def test_interpolate_variance_geometric_mean():
    # betas chosen so that beta_2 = 0.02 and posterior variance at t=2 = 0.01
    sch = NoiseSchedule(T=2, betas=np.array([0.0002 / 0.0102, 0.02]))
    assert sch.posterior_variances[1] == pytest.approx(0.01, abs=1e-15)
    mid = interpolate_variance(sch, 2, np.zeros((2, 2)))
    assert np.abs(mid - np.sqrt(0.02 * 0.01)).max() < 1e-12
    assert mid[0, 0] == pytest.approx(0.014142135623, abs=1e-9)


@given(st.floats(-3, 3))
@settings(max_examples=50, deadline=None)
def test_interpolate_variance_sandwich(v):
    sch = linear_schedule(50, 1e-3, 0.05)
    for t in (1, 25, 50):
        out = float(interpolate_variance(sch, t, np.array(v)))
        lo = sch.posterior_variances[t - 1]
        hi = sch.betas[t - 1]
        assert lo - 1e-15 <= out <= hi + 1e-15


def test_posterior_mean_at_t1_is_x0():
    sch = linear_schedule(10, 1e-3, 0.05)
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(2, 3))
    x1 = rng.normal(size=(2, 3))
    assert np.allclose(posterior_mean(sch, x0, x1, 1), x0)


def test_operations_are_pure():
    sch = linear_schedule(10, 1e-3, 0.05)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 2))
    e = rng.normal(size=(2, 2))
    a = q_sample(sch, x, 5, e)
    b = q_sample(sch, x, 5, e)
    assert np.array_equal(a, b)
    assert not sch.betas.flags.writeable

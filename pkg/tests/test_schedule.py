import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ddic.errors import ConfigurationError
from ddic.schedule import cosine_schedule, schedule_from_params

from oracles import forward_composition_z


def mp_alpha_bar(t, T, s):
    mpmath.mp.dps = 50
    f = lambda u: mpmath.cos(((mpmath.mpf(u) / T + s) / (1 + s)) * mpmath.pi / 2) ** 2
    return f(t) / f(0)


def test_cosine_schedule_t1000_monotone_and_small_terminal():
    sched = cosine_schedule(1000, 0.008)
    ab = sched.alpha_bars
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] < 1e-3
    assert np.all((sched.betas[1:] > 0) & (sched.betas[1:] < 1))


def test_beta_matches_arbitrary_precision():
    T, s = 1000, mpmath.mpf("0.008")
    sched = cosine_schedule(T, 0.008)
    for t in (1, 2, 10, 500, 998):
        expected = 1 - mp_alpha_bar(t, T, s) / mp_alpha_bar(t - 1, T, s)
        assert abs(sched.betas[t] - float(expected)) < 1e-12
    # the last step is clipped
    assert sched.betas[T] == 0.999


def test_alpha_bar_is_running_product():
    sched = cosine_schedule(1000)
    mpmath.mp.dps = 40
    prod = mpmath.mpf(1)
    for t in range(1, 1001):
        prod *= 1 - mpmath.mpf(float(sched.betas[t]))
        if t % 97 == 0 or t == 1000:
            assert abs(sched.alpha_bars[t] - float(prod)) / float(prod) < 1e-12


def test_single_step_schedule():
    sched = cosine_schedule(1, 0.008)
    f = lambda u: math.cos(((u + 0.008) / 1.008) * math.pi / 2) ** 2
    assert sched.T == 1
    assert sched.betas[1] == pytest.approx(min(1 - f(1) / f(0), 0.999), abs=0)


@pytest.mark.parametrize("T,s", [(0, 0.008), (-3, 0.008), (10, 0.0), (10, -1.0), (2.5, 0.008)])
def test_invalid_configuration(T, s):
    with pytest.raises(ConfigurationError):
        cosine_schedule(T, s)


def test_deterministic_and_roundtrip_params():
    a, b = cosine_schedule(300, 0.01), cosine_schedule(300, 0.01)
    assert np.array_equal(a.betas, b.betas) and np.array_equal(a.alpha_bars, b.alpha_bars)
    assert schedule_from_params(a.params()) == a


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 2000), s=st.floats(1e-4, 0.5))
def test_schedule_invariants(T, s):
    sched = cosine_schedule(T, s)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert np.all((sched.alpha_bars > 0) & (sched.alpha_bars <= 1))
    assert np.all((sched.betas[1:] > 0) & (sched.betas[1:] < 1))


# ------------------------------------------------------------- forward noising


def test_q_step_vanishing_noise():
    from ddic.schedule import schedule_from_betas

    sched = schedule_from_betas([1e-12] * 5)
    x = torch.linspace(-1, 1, 16, dtype=torch.float64)
    noise = torch.randn(16, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    out = sched.q_step(x, 3, noise)
    # sqrt(1 - beta) = 1 - 5e-13 and sqrt(beta) = 1e-6
    assert (out - x).abs().max().item() <= 1e-6 * noise.abs().max().item() + 1e-12
    assert torch.allclose(out - x, 1e-6 * noise, rtol=0, atol=1e-12)


def test_q_step_zero_signal():
    sched = cosine_schedule(100)
    eps = torch.randn(4, 4, dtype=torch.float64)
    out = sched.q_step(torch.zeros(4, 4, dtype=torch.float64), 7, eps)
    assert torch.equal(out, math.sqrt(sched.betas[7]) * eps)


def test_q_step_monte_carlo_moments():
    sched = cosine_schedule(100)
    t = 60
    x_prev = torch.tensor([0.7], dtype=torch.float64)
    gen = torch.Generator().manual_seed(0)
    n = 100_000
    out = sched.q_step(x_prev.expand(n), t, torch.randn(n, generator=gen, dtype=torch.float64))
    beta = sched.betas[t]
    se_mean = math.sqrt(beta / n)
    se_var = beta * math.sqrt(2 / (n - 1))
    assert abs(out.mean().item() - math.sqrt(1 - beta) * 0.7) < 4 * se_mean
    assert abs(out.var().item() - beta) < 4 * se_var


def test_q_sample_t0_and_full_noise():
    sched = cosine_schedule(1000)
    x0 = torch.rand(8, 8, dtype=torch.float64)
    eps = torch.randn(8, 8, dtype=torch.float64)
    assert torch.equal(sched.q_sample(x0, 0, eps), x0)
    xT = sched.q_sample(x0, 1000, eps)
    assert (xT - eps).norm() / eps.norm() < math.sqrt(sched.alpha_bars[-1]) * x0.norm() + 1e-12


@pytest.mark.parametrize("t", [-1, 1001])
def test_q_sample_out_of_range(t):
    sched = cosine_schedule(1000)
    with pytest.raises(IndexError):
        sched.q_sample(torch.zeros(2), t, torch.zeros(2))


def test_q_step_out_of_range():
    sched = cosine_schedule(10)
    with pytest.raises(IndexError):
        sched.q_step(torch.zeros(2), 0, torch.zeros(2))
    with pytest.raises(IndexError):
        sched.q_step(torch.zeros(2), 11, torch.zeros(2))


def test_q_sample_matches_iterated_q_step():
    z = forward_composition_z(cosine_schedule(10), x0=0.4, t=10, chains=100_000, seed=0)
    assert z["mean"] < 4 and z["var"] < 4

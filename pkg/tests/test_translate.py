import math

import numpy as np
import pytest
import torch

from ddic.denoiser import AnalyticGaussianDenoiser
from ddic.errors import CapabilityError, ConfigurationError, DegenerateCorrelationError
from ddic.sampler import ddim_step
from ddic.schedule import cosine_schedule
from ddic.translate import (
    DdicConfig,
    _corr_batch,
    corrcoef,
    correlation_gradient,
    ddic_step,
    median_filter,
    trace_summary,
    translate_ddib,
    translate_ddic,
)

from oracles import brute_median, central_difference_grad, flow_translate_scalar

# ------------------------------------------------------------------ median


@pytest.mark.parametrize("k", [1, 3, 5])
def test_median_matches_brute_force(k):
    rng = np.random.default_rng(k)
    img = rng.normal(size=(9, 11))
    out = median_filter(torch.from_numpy(img), k).numpy()
    np.testing.assert_array_equal(out, brute_median(img, k))


def test_median_batched_and_with_ties():
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 3, size=(3, 7, 7)).astype(np.float64)
    out = median_filter(torch.from_numpy(imgs), 3).numpy()
    for i in range(3):
        np.testing.assert_array_equal(out[i], brute_median(imgs[i], 3))


def test_median_removes_impulse():
    img = np.zeros((5, 5))
    img[2, 3] = 10.0
    out = median_filter(torch.from_numpy(img), 3).numpy()
    np.testing.assert_array_equal(out, brute_median(img, 3))
    assert not out.any()


@pytest.mark.parametrize("k", [1, 3, 5])
def test_median_keeps_constant_image(k):
    img = torch.full((6, 7), 0.3, dtype=torch.float64)
    assert torch.equal(median_filter(img, k), img)


def test_median_subgradient_matches_finite_differences():
    # away from ties the filter is locally a selection, so FD equals the subgradient
    rng = np.random.default_rng(5)
    x = torch.from_numpy(rng.normal(size=(6, 6))).requires_grad_(True)
    w = torch.from_numpy(rng.normal(size=(6, 6)))
    (g,) = torch.autograd.grad((median_filter(x, 3) * w).sum(), x)
    fd = central_difference_grad(lambda z: (median_filter(z, 3) * w).sum(), x.detach(), 1e-7)
    assert torch.allclose(g, fd, atol=1e-6)


@pytest.mark.parametrize("k", [0, 2, -3, 2.5])
def test_median_rejects_bad_kernel(k):
    with pytest.raises(ConfigurationError):
        median_filter(torch.zeros(4, 4), k)


# ------------------------------------------------------------- correlation


def test_corrcoef_cases():
    a = torch.arange(16, dtype=torch.float64).reshape(4, 4)
    assert corrcoef(a, 2 * a + 3) == pytest.approx(1.0, abs=1e-15)
    assert corrcoef(a, -a) == pytest.approx(-1.0, abs=1e-15)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=100), rng.normal(size=100)
    assert corrcoef(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-14)
    assert corrcoef(a, -0.5 * a + 1) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(DegenerateCorrelationError):
        corrcoef(torch.ones(4, 4), a)


def test_corrcoef_hand_value():
    # deviations (-1.5, -0.5, 0.5, 1.5) and (-1.75, 0.25, -0.75, 2.25): 5.5 / sqrt(5 * 8.75)
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0, 3.0], [2.0, 5.0]])
    assert corrcoef(a, b) == pytest.approx(5.5 / math.sqrt(43.75), abs=1e-12)


def test_corr_batch_flags_constant_images():
    a = torch.randn(3, 5, 5, dtype=torch.float64)
    b = a.clone()
    b[1] = 0.25
    corr, degenerate = _corr_batch(a, b)
    assert degenerate.tolist() == [False, True, False]
    assert corr[1] == 0 and torch.allclose(corr[[0, 2]], torch.ones(2, dtype=torch.float64))


# ------------------------------------------------------------------- DDIC


SCHED = cosine_schedule(100)


def gaussian_pair(size=8):
    """Two analytic denoisers with per-pixel means that differ in structure."""
    g = torch.Generator().manual_seed(0)
    m_src = 0.5 * torch.randn(size, size, generator=g, dtype=torch.float64)
    m_dst = -0.3 * m_src + 0.2 * torch.randn(size, size, generator=g, dtype=torch.float64)
    return AnalyticGaussianDenoiser(m_src, 0.05, SCHED), AnalyticGaussianDenoiser(m_dst, 0.05, SCHED)


def _argmedian(y_hat, k=3):
    """Which window element the median picks at every pixel (for stability checks)."""
    h, w = y_hat.shape[-2:]
    r = k // 2
    x = torch.nn.functional.pad(y_hat.reshape(1, 1, h, w), (r, r, r, r), mode="replicate")
    win = torch.nn.functional.unfold(x, k)
    med = win.sort(dim=1).values[:, (k * k) // 2 : (k * k) // 2 + 1]
    return (win == med).to(torch.uint8).argmax(dim=1)


def median_stable_probes(den_src, den_dst, count, h, seed=0):
    """Random (x_t, y_t, t) whose median selections do not change within +-h of y_t."""
    gen = torch.Generator().manual_seed(seed)
    found, tries = [], 0
    while len(found) < count:
        tries += 1
        assert tries < 50 * count, "could not find median-stable probes"
        t = int(torch.randint(2, SCHED.T + 1, (1,), generator=gen))
        x_t = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        y_t = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        base = _argmedian(ddim_step(y_t, t, -1, den_dst))
        stable = True
        for i in range(y_t.numel()):
            for sgn in (1, -1):
                yp = y_t.clone().reshape(-1)
                yp[i] += sgn * h
                if not torch.equal(_argmedian(ddim_step(yp.reshape(8, 8), t, -1, den_dst)), base):
                    stable = False
                    break
            if not stable:
                break
        if stable:
            found.append((x_t, y_t, t))
    return found


def test_ddic_gradient_matches_central_differences():
    den_src, den_dst = gaussian_pair()
    h = 1e-6
    for x_t, y_t, t in median_stable_probes(den_src, den_dst, 20, h):
        x_filt = median_filter(ddim_step(x_t, t, -1, den_src), 3)
        g, _, _ = correlation_gradient(x_filt, y_t, t, den_dst, clip_x0=False)

        def loss(y):
            c, _ = _corr_batch(x_filt, median_filter(ddim_step(y, t, -1, den_dst), 3))
            return -c.sum()

        fd = central_difference_grad(loss, y_t, h)
        assert ((g - fd).norm() / fd.norm()).item() < 1e-3


def test_ddic_gradient_vanishes_at_correlation_optimum():
    den_src, _ = gaussian_pair()
    # same denoiser and same latent on both branches: the filtered outputs coincide, corr = 1
    y_t = torch.randn(8, 8, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    t = 40
    x_filt = median_filter(ddim_step(y_t, t, -1, den_src), 3)
    g, corr, _ = correlation_gradient(x_filt, y_t, t, den_src, clip_x0=False)
    assert corr.item() == pytest.approx(1.0, abs=1e-12)
    assert g.norm().item() < 1e-8
    # a full guided step at the default lr then leaves y_{t-1} where plain DDIM puts it
    _, y_prev, _ = ddic_step(y_t, y_t, t, den_src, den_src, DdicConfig(clip_x0=False))
    assert (y_prev - ddim_step(y_t, t, -1, den_src)).abs().max().item() < 1e-8


def test_small_step_along_gradient_does_not_raise_loss():
    den_src, den_dst = gaussian_pair()
    gen = torch.Generator().manual_seed(11)
    cfg = DdicConfig(lr=1e-3 * 3.0)
    worse = 0
    for _ in range(100):
        t = int(torch.randint(2, SCHED.T + 1, (1,), generator=gen))
        x_t = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        y_t = torch.randn(8, 8, generator=gen, dtype=torch.float64)
        _, _, tr = ddic_step(x_t, y_t, t, den_src, den_dst, cfg)
        worse += tr.loss_after[0] > tr.loss_before[0] + 1e-12
    assert worse == 0


def test_lr_zero_is_bit_identical_to_ddib():
    den_src, den_dst = gaussian_pair()
    x = den_src.mean + 0.2 * torch.randn(2, 8, 8, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    x = x.clamp(-1, 1)
    ddib = translate_ddib(x, den_src, den_dst)
    ddic = translate_ddic(x, den_src, den_dst, DdicConfig(lr=0.0))
    assert torch.equal(ddib, ddic.output)


def test_ddic_improves_correlation_in_most_steps():
    den_src, den_dst = gaussian_pair()
    x = (den_src.mean + 0.2 * torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(6),
                                           dtype=torch.float64)).clamp(-1, 1)
    res = translate_ddic(x, den_src, den_dst, DdicConfig(lr=0.05))
    summary = trace_summary(res.trace)
    assert summary["steps"] == SCHED.T
    assert summary["improved_fraction"] > 0.9
    assert [s.t for s in res.trace] == list(range(SCHED.T, 0, -1))


def test_ddib_with_one_denoiser_is_a_roundtrip():
    sched = cosine_schedule(1000)
    den = AnalyticGaussianDenoiser(0.2, 0.04, sched)
    x = (0.2 + 0.2 * torch.randn(8, 8, generator=torch.Generator().manual_seed(8), dtype=torch.float64)).clamp(-1, 1)
    out = translate_ddib(x, den, den)
    assert ((out - x).norm() / x.norm()).item() < 1e-2
    assert torch.equal(out, translate_ddib(x, den, den))


def test_ddib_matches_ode_for_shifted_gaussians():
    # scalar means: the bridge maps a source sample onto the target by a pure shift
    sched = cosine_schedule(1000)
    var = 0.04
    src = AnalyticGaussianDenoiser(-0.2, var, sched)
    dst = AnalyticGaussianDenoiser(0.3, var, sched)
    x = torch.tensor([[-0.35, -0.2], [0.0, -0.1]], dtype=torch.float64)
    out = translate_ddib(x, src, dst)
    for xi, oi in zip(x.flatten().tolist(), out.flatten().tolist()):
        ref = flow_translate_scalar(xi, sched, -0.2, 0.3, var)
        assert oi == pytest.approx(ref, abs=3e-3)  # first-order DDIM discretization at T=1000
        assert oi - xi == pytest.approx(0.5, abs=5e-3)


def test_zero_variance_image_is_skipped():
    den_src, den_dst = gaussian_pair()
    x_t = torch.randn(2, 8, 8, dtype=torch.float64)
    x_t[1] = 0.0
    # a constant source makes the target branch's gradient undefined for image 1
    _, _, tr = ddic_step(x_t, torch.randn(2, 8, 8, dtype=torch.float64), 1,
                         AnalyticGaussianDenoiser(0.0, 0.05, SCHED), den_dst, DdicConfig())
    assert tr.skipped == (False, True) and tr.grad_norm[1] == 0.0
    assert math.isfinite(tr.loss_after[0])


def test_capability_and_configuration_errors():
    den_src, den_dst = gaussian_pair()

    class Opaque:
        schedule = SCHED
        value_range = (-1.0, 1.0)
        differentiable = False

        def predict_eps(self, x, t):
            return torch.zeros_like(x)

        def check_input(self, x):
            pass

    x = torch.zeros(8, 8, dtype=torch.float64)
    with pytest.raises(CapabilityError):
        translate_ddic(x, den_src, Opaque())
    with pytest.raises(ConfigurationError):
        translate_ddib(x, den_src, AnalyticGaussianDenoiser(0.0, 0.1, cosine_schedule(50)))
    with pytest.raises(ConfigurationError):
        translate_ddic(x, den_src, den_dst, DdicConfig(T=50))
    with pytest.raises(ConfigurationError):
        DdicConfig(lr=-1)
    with pytest.raises(ConfigurationError):
        DdicConfig(median_kernel=4)

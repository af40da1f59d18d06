"""Reverse-process samplers: DDPM ancestral steps and deterministic DDIM encode/decode."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DataError


@dataclass
class SamplerTrace:
    """Per-step snapshots kept at a fixed stride."""

    stride: int = 1
    steps: list[int] = field(default_factory=list)
    states: list[torch.Tensor] = field(default_factory=list)

    def record(self, t: int, x: torch.Tensor, force: bool = False) -> None:
        if force or t % self.stride == 0:
            if self.steps and self.steps[-1] == t:
                return
            self.steps.append(int(t))
            self.states.append(x.detach().clone())

    def save(self, path) -> None:
        np.savez_compressed(path, t=np.asarray(self.steps),
                            x=np.stack([s.cpu().numpy() for s in self.states]) if self.states else np.zeros(0))


def ddpm_step(x_t, t: int, denoiser, noise=None):
    """Ancestral step x_t -> x_{t-1} with variance beta_t; t = 1 returns the mean."""
    sched = denoiser.schedule
    t = sched.check_t(t, lo=1)
    alpha = float(sched.alphas[t])
    ab = float(sched.alpha_bars[t])
    eps = denoiser.predict_eps(x_t, t)
    mean = (x_t - ((1.0 - alpha) / math.sqrt(1.0 - ab)) * eps) / math.sqrt(alpha)
    if t == 1 or noise is None:
        return mean
    return mean + math.sqrt(float(sched.betas[t])) * noise


def ddpm_sample(x_T, denoiser, generator: torch.Generator | None = None):
    x = x_T
    for t in range(denoiser.schedule.T, 0, -1):
        noise = torch.randn(x.shape, generator=generator, dtype=x.dtype) if t > 1 else None
        x = ddpm_step(x, t, denoiser, noise)
    return x


def ddim_coefficients(schedule, t: int, dt: int) -> tuple[float, float]:
    """Return (scale, eps_weight) so that x_{t+dt} = scale * x_t + eps_weight * eps(x_t, t)."""
    t = schedule.check_t(t)
    s = schedule.check_t(t + dt)
    ab_t = float(schedule.alpha_bars[t])
    ab_s = float(schedule.alpha_bars[s])
    ratio = math.sqrt(ab_s / ab_t)
    return ratio, math.sqrt(1.0 - ab_s) - math.sqrt(1.0 - ab_t) * ratio


def ddim_step(x_t, t: int, dt: int, denoiser, clip_x0: bool = False):
    """Deterministic DDIM move from t to t + dt (dt = +1 noises, dt = -1 denoises).

    With ``clip_x0`` the implied clean estimate is clamped to the denoiser's
    intensity range and the noise estimate is re-derived from it before the
    move. This bounds the huge amplification of prediction error at the last
    (nearly pure-noise) steps.
    """
    if dt not in (1, -1):
        raise ValueError(f"dt must be +1 or -1, got {dt}")
    if not clip_x0:
        scale, weight = ddim_coefficients(denoiser.schedule, t, dt)
        return scale * x_t + weight * denoiser.predict_eps(x_t, t)
    sched = denoiser.schedule
    t = sched.check_t(t)
    s = sched.check_t(t + dt)
    ab_t = float(sched.alpha_bars[t])
    ab_s = float(sched.alpha_bars[s])
    eps = denoiser.predict_eps(x_t, t)
    lo, hi = denoiser.value_range
    x0 = ((x_t - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)).clamp(lo, hi)
    if ab_t < 1.0:
        eps = (x_t - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_s) * x0 + math.sqrt(1.0 - ab_s) * eps


def _check(x, denoiser):
    denoiser.check_input(x)
    if not torch.isfinite(x).all():
        raise DataError("input contains non-finite values")
    return x


@torch.no_grad()
def encode(x0, denoiser, trace: SamplerTrace | None = None, clip_x0: bool = False):
    """Run the probability-flow ODE forward over every step 0 -> T and return the latent."""
    x = _check(x0, denoiser)
    lo, hi = denoiser.value_range
    span = hi - lo
    if float(x.min()) < lo - 0.01 * span or float(x.max()) > hi + 0.01 * span:
        raise DataError(f"input intensities [{float(x.min()):.3g}, {float(x.max()):.3g}] fall outside the "
                        f"denoiser range {denoiser.value_range}")
    if trace is not None:
        trace.record(0, x, force=True)
    for t in range(0, denoiser.schedule.T):
        x = ddim_step(x, t, 1, denoiser, clip_x0)
        if trace is not None:
            trace.record(t + 1, x, force=t + 1 == denoiser.schedule.T)
    return x


@torch.no_grad()
def decode(latent, denoiser, trace: SamplerTrace | None = None, clip_x0: bool = False):
    """Run the probability-flow ODE backward T -> 0 from a latent."""
    x = _check(latent, denoiser)
    T = denoiser.schedule.T
    if trace is not None:
        trace.record(T, x, force=True)
    for t in range(T, 0, -1):
        x = ddim_step(x, t, -1, denoiser, clip_x0)
        if trace is not None:
            trace.record(t - 1, x, force=t == 1)
    return x

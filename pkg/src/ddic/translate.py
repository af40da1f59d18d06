"""Latent-bridge translation (DDIB) and its correlation-guided variant (DDIC)."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CapabilityError, ConfigurationError, DegenerateCorrelationError, NumericError
from .sampler import ddim_step, decode, encode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DdicConfig:
    lr: float = 3.0
    median_kernel: int = 3
    T: int | None = None  # None: use the denoisers' schedule length
    normalize_grad: bool = False
    clip_x0: bool = True
    record_trace: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigurationError(f"lr must be non-negative, got {self.lr}")
        _check_kernel(self.median_kernel)
        if self.T is not None and self.T < 1:
            raise ConfigurationError(f"T must be >= 1, got {self.T}")


@dataclass
class DdicStepTrace:
    """Diagnostics of one guided step; each field holds one value per image."""

    t: int
    loss_before: tuple[float, ...]
    loss_after: tuple[float, ...]
    grad_norm: tuple[float, ...]
    corr_before: tuple[float, ...]
    corr_after: tuple[float, ...]
    skipped: tuple[bool, ...] = ()

    def for_image(self, i: int) -> dict:
        return {
            "t": self.t,
            "loss_before": self.loss_before[i],
            "loss_after": self.loss_after[i],
            "corr_before": self.corr_before[i],
            "corr_after": self.corr_after[i],
            "grad_norm": self.grad_norm[i],
            "skipped": self.skipped[i],
        }


def _check_kernel(k: int) -> None:
    if int(k) != k or k < 1 or k % 2 == 0:
        raise ConfigurationError(f"median kernel must be a positive odd integer, got {k}")


def median_filter(img: torch.Tensor, k: int = 3) -> torch.Tensor:
    """k x k median filter with edge replication over the last two axes.

    Autograd routes each output's gradient to the single input pixel chosen
    as its window median; among tied values the lowest flat index in the
    window wins.
    """
    _check_kernel(k)
    img = torch.as_tensor(img)
    if k == 1:
        return img
    shape = img.shape
    h, w = shape[-2:]
    r = k // 2
    x = img.reshape(-1, 1, h, w)
    windows = F.unfold(F.pad(x, (r, r, r, r), mode="replicate"), k)  # (N, k*k, H*W)
    with torch.no_grad():
        med = windows.sort(dim=1).values[:, (k * k) // 2 : (k * k) // 2 + 1]
        idx = (windows == med).to(torch.uint8).argmax(dim=1, keepdim=True)
    return windows.gather(1, idx).reshape(shape)


def _corr_batch(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pearson correlation per image over the last two axes, plus a degenerate-input mask."""
    a = a.reshape(-1, a.shape[-2] * a.shape[-1])
    b = b.reshape(-1, b.shape[-2] * b.shape[-1])
    ac = a - a.mean(dim=1, keepdim=True)
    bc = b - b.mean(dim=1, keepdim=True)
    va = ac.square().sum(dim=1)
    vb = bc.square().sum(dim=1)
    tiny = torch.finfo(a.dtype).eps ** 2
    degenerate = (va <= tiny * a.square().sum(dim=1).clamp_min(1e-300)) | (
        vb <= tiny * b.square().sum(dim=1).clamp_min(1e-300))
    denom = torch.where(degenerate, torch.ones_like(va), (va * vb).sqrt())
    corr = torch.where(degenerate, torch.zeros_like(va), (ac * bc).sum(dim=1) / denom)
    return corr, degenerate


def corrcoef(a, b) -> float:
    """cov(a, b) / sqrt(cov(a, a) * cov(b, b)) over all pixels."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    corr, degenerate = _corr_batch(a.reshape(1, -1, 1), b.reshape(1, -1, 1))
    if bool(degenerate.any()):
        raise DegenerateCorrelationError("correlation undefined for a zero-variance image")
    return float(corr.clamp(-1.0, 1.0))


def _check_pair(den_src, den_dst) -> None:
    if not den_src.schedule.same_as(den_dst.schedule):
        raise ConfigurationError(
            f"denoiser schedules differ: {den_src.schedule.params()} vs {den_dst.schedule.params()}")
    if tuple(den_src.value_range) != tuple(den_dst.value_range):
        raise ConfigurationError(
            f"denoiser intensity ranges differ: {den_src.value_range} vs {den_dst.value_range}")


def correlation_gradient(x_filt: torch.Tensor, y_t: torch.Tensor, t: int, den, k: int = 3,
                         clip_x0: bool = True):
    """Gradient wrt ``y_t`` of the summed negative correlation between ``x_filt``
    and the median-filtered one-step reverse prediction from ``y_t``.

    Returns (grad, corr, degenerate); images with a zero-variance side get a
    zero gradient and are flagged in ``degenerate``.
    """
    y = y_t.detach().requires_grad_(True)
    with torch.enable_grad():
        y_hat = ddim_step(y, t, -1, den, clip_x0)
        corr, degenerate = _corr_batch(x_filt, median_filter(y_hat, k))
        valid = ~degenerate
        if bool(valid.any()):
            (grad,) = torch.autograd.grad(-corr[valid].sum(), y)
        else:
            grad = torch.zeros_like(y)
    grad = grad.detach()
    grad.reshape(corr.shape[0], -1)[degenerate] = 0.0
    return grad, corr.detach(), degenerate


def ddic_step(x_t: torch.Tensor, y_t: torch.Tensor, t: int, den_us, den_mri, cfg: DdicConfig):
    """One guided reverse step.

    The source branch steps ``x_t`` backward with its own denoiser and is held
    fixed. The target latent ``y_t`` takes a single gradient step that raises
    the correlation between the median-filtered branch outputs, and ``y_{t-1}``
    is then recomputed from the updated ``y_t``.
    """
    if not getattr(den_mri, "differentiable", False):
        raise CapabilityError("the target-domain denoiser does not expose input gradients")
    if x_t.shape != y_t.shape:
        raise ValueError(f"shape mismatch {tuple(x_t.shape)} vs {tuple(y_t.shape)}")
    k = cfg.median_kernel

    with torch.no_grad():
        x_prev = ddim_step(x_t, t, -1, den_us, cfg.clip_x0)
        x_filt = median_filter(x_prev, k)

    grad, corr_before, degenerate = correlation_gradient(x_filt, y_t, t, den_mri, k, cfg.clip_x0)
    n = corr_before.shape[0]
    flat = grad.reshape(n, -1)
    if not bool(torch.isfinite(flat).all()):
        raise NumericError("non-finite correlation gradient", step=t)
    gnorm = flat.norm(dim=1)

    if cfg.normalize_grad:
        flat = flat / torch.where(gnorm > 0, gnorm, torch.ones_like(gnorm))[:, None]
    with torch.no_grad():
        y_new = y_t - cfg.lr * flat.reshape(y_t.shape) if cfg.lr != 0 else y_t
        y_prev = ddim_step(y_new, t, -1, den_mri, cfg.clip_x0)
        corr_after, degenerate_after = _corr_batch(x_filt, median_filter(y_prev, k))

    cb = corr_before.detach().tolist()
    ca = corr_after.tolist()
    trace = DdicStepTrace(
        t=int(t),
        loss_before=tuple(-c for c in cb),
        loss_after=tuple(-c for c in ca),
        grad_norm=tuple(gnorm.tolist()),
        corr_before=tuple(cb),
        corr_after=tuple(ca),
        skipped=tuple(bool(d) for d in (degenerate | degenerate_after).tolist()),
    )
    return x_prev, y_prev, trace


def translate_ddib(x_src: torch.Tensor, den_src, den_dst, clip_x0: bool = True) -> torch.Tensor:
    """Encode with the source-domain ODE, decode with the target-domain ODE."""
    _check_pair(den_src, den_dst)
    return decode(encode(x_src, den_src, clip_x0=clip_x0), den_dst, clip_x0=clip_x0)


@dataclass
class DdicResult:
    output: torch.Tensor
    latent: torch.Tensor
    trace: list[DdicStepTrace] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def translate_ddic(x_src: torch.Tensor, den_src, den_dst, cfg: DdicConfig | None = None,
                   progress: Callable[[int], None] | None = None) -> DdicResult:
    """Correlation-guided translation through the shared latent of ``x_src``."""
    cfg = cfg or DdicConfig()
    _check_pair(den_src, den_dst)
    if not getattr(den_dst, "differentiable", False):
        raise CapabilityError("the target-domain denoiser does not expose input gradients")
    T = den_src.schedule.T
    if cfg.T is not None and cfg.T != T:
        raise ConfigurationError(f"configured T={cfg.T} does not match the denoiser schedule T={T}")

    latent = encode(x_src, den_src, clip_x0=cfg.clip_x0)
    x = y = latent
    trace = []
    for t in range(T, 0, -1):
        x, y, step = ddic_step(x, y, t, den_src, den_dst, cfg)
        if cfg.record_trace:
            trace.append(step)
        if progress is not None:
            progress(t)
    return DdicResult(output=y, latent=latent, trace=trace, config=asdict(cfg))


def trace_summary(trace: list[DdicStepTrace]) -> dict:
    """Fraction of steps (over all images) whose correlation did not drop."""
    before = np.array([s.corr_before for s in trace], dtype=np.float64)
    after = np.array([s.corr_after for s in trace], dtype=np.float64)
    skipped = np.array([s.skipped for s in trace], dtype=bool)
    ok = ~skipped
    improved = (after >= before) & ok
    return {
        "steps": len(trace),
        "improved_fraction": float(improved.sum() / max(ok.sum(), 1)),
        "final_corr": after[-1].tolist() if len(trace) else [],
    }

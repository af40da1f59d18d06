"""Noise predictors: analytic Gaussian oracle, trainable U-Net, training loop, checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from .errors import ConfigurationError, DataError, TrainingDivergenceError
from .schedule import DiffusionSchedule, schedule_from_params
from .unet import UNet, UNetConfig

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
DEFAULT_RANGE = (-1.0, 1.0)


@runtime_checkable
class Denoiser(Protocol):
    """Anything that predicts the added noise from ``(x_t, t)``.

    ``predict_eps`` must return a tensor shaped like ``x_t``. When
    ``differentiable`` is true, autograd can flow from the output back to
    ``x_t``.
    """

    schedule: DiffusionSchedule
    differentiable: bool
    value_range: tuple[float, float]

    def predict_eps(self, x_t: torch.Tensor, t: int) -> torch.Tensor: ...

    def check_input(self, x: torch.Tensor) -> None: ...


def oracle_eps(x_t, t: int, mean, var: float, schedule: DiffusionSchedule):
    """Exact minimizer of the noise-regression loss when x_0 ~ N(mean, var * I)."""
    if not var > 0:
        raise ConfigurationError(f"variance must be positive, got {var}")
    t = schedule.check_t(t)
    ab = float(schedule.alpha_bars[t])
    return math.sqrt(1.0 - ab) * (x_t - math.sqrt(ab) * mean) / (ab * var + 1.0 - ab)


class AnalyticGaussianDenoiser:
    """Closed-form noise predictor for Gaussian data N(mean, var * I).

    The prediction is affine in ``x_t``; its Jacobian is the scalar
    ``sqrt(1 - abar_t) / (abar_t * var + 1 - abar_t)`` times identity.
    """

    differentiable = True

    def __init__(self, mean, var: float, schedule: DiffusionSchedule, value_range=DEFAULT_RANGE):
        if not var > 0:
            raise ConfigurationError(f"variance must be positive, got {var}")
        self.mean = torch.as_tensor(mean, dtype=torch.float64) if not torch.is_tensor(mean) else mean
        self.var = float(var)
        self.schedule = schedule
        self.value_range = tuple(value_range)

    def jacobian_scale(self, t: int) -> float:
        ab = float(self.schedule.alpha_bars[t])
        return math.sqrt(1.0 - ab) / (ab * self.var + 1.0 - ab)

    def predict_eps(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        mean = self.mean.to(dtype=x_t.dtype) if torch.is_tensor(x_t) else self.mean
        return oracle_eps(x_t, t, mean, self.var, self.schedule)

    def check_input(self, x) -> None:
        if self.mean.ndim >= 2 and tuple(x.shape[-2:]) != tuple(self.mean.shape[-2:]):
            raise DataError(f"image shape {tuple(x.shape[-2:])} does not match denoiser mean {tuple(self.mean.shape[-2:])}")


class NetworkDenoiser:
    """U-Net noise predictor bound to a schedule and an intensity range."""

    differentiable = True

    def __init__(self, config: UNetConfig, schedule: DiffusionSchedule, value_range=DEFAULT_RANGE,
                 net: UNet | None = None, seed: int | None = None, step: int = 0):
        self.config = config
        self.schedule = schedule
        self.value_range = tuple(float(v) for v in value_range)
        if net is None:
            if seed is not None:
                with torch.random.fork_rng():
                    torch.manual_seed(seed)
                    net = UNet(config)
            else:
                net = UNet(config)
        self.net = net
        self.seed = seed
        self.step = step

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def check_input(self, x) -> None:
        size = self.config.image_size
        if tuple(x.shape[-2:]) != (size, size):
            raise DataError(f"image shape {tuple(x.shape[-2:])} does not match network input {(size, size)}")

    def predict_eps(self, x_t: torch.Tensor, t: int) -> torch.Tensor:
        self.check_input(x_t)
        shape = x_t.shape
        x = x_t.reshape(-1, 1, *shape[-2:])
        ts = torch.full((x.shape[0],), int(t), dtype=torch.long)
        dtype = next(self.net.parameters()).dtype
        out = self.net(x.to(dtype), ts)
        return out.to(x_t.dtype).reshape(shape)

    __call__ = predict_eps

    def metadata(self) -> dict:
        return {
            "schema_version": CHECKPOINT_SCHEMA,
            "architecture": self.config.to_dict(),
            "schedule": self.schedule.params(),
            "normalization": {"value_range": list(self.value_range)},
            "seed": self.seed,
            "step": self.step,
        }

    def save(self, path, extra: dict | None = None) -> None:
        payload = self.metadata()
        payload["state_dict"] = self.net.state_dict()
        if extra:
            payload.update(extra)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path, use_ema: bool = True) -> "NetworkDenoiser":
        """Load a checkpoint; EMA weights are preferred when the archive carries them."""
        payload = load_checkpoint(path)
        return cls.from_payload(payload, use_ema=use_ema)

    @classmethod
    def from_payload(cls, payload: dict, use_ema: bool = False) -> "NetworkDenoiser":
        config = UNetConfig.from_dict(payload["architecture"])
        net = UNet(config)
        state = payload.get("ema") if use_ema and payload.get("ema") is not None else payload["state_dict"]
        net.load_state_dict(state)
        net.eval()
        return cls(config, schedule_from_params(payload["schedule"]), payload["normalization"]["value_range"],
                   net=net, seed=payload.get("seed"), step=payload.get("step", 0))


def load_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA:
        raise DataError(f"{path}: unsupported checkpoint schema {version!r}")
    return payload


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 2e-4
    steps: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    hflip: bool = False
    ema_decay: float | None = None
    grad_clip: float | None = 1.0
    warmup: int = 100
    log_every: int = 100

    def __post_init__(self):
        for name in ("batch_size", "checkpoint_every", "log_every"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.steps < 0 or self.lr <= 0 or self.warmup < 0:
            raise ConfigurationError("steps must be >= 0 and lr > 0")
        if self.ema_decay is not None and not (0 < self.ema_decay < 1):
            raise ConfigurationError("ema_decay must lie in (0, 1)")


@dataclass
class TrainResult:
    denoiser: NetworkDenoiser
    losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def smooth(losses: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        return arr
    c = np.cumsum(np.concatenate([[0.0], arr]))
    idx = np.arange(1, arr.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _stack_dataset(dataset) -> torch.Tensor:
    if torch.is_tensor(dataset) or isinstance(dataset, np.ndarray):
        data = torch.as_tensor(np.asarray(dataset) if isinstance(dataset, np.ndarray) else dataset)
    else:
        items = list(dataset)
        if not items:
            raise DataError("dataset is empty")
        shapes = {tuple(np.shape(x)) for x in items}
        if len(shapes) != 1:
            raise DataError(f"images have mismatched shapes: {sorted(shapes)}")
        data = torch.as_tensor(np.stack([np.asarray(x) for x in items]))
    if data.shape[0] == 0:
        raise DataError("dataset is empty")
    if data.ndim == 3:
        data = data[:, None]
    if data.ndim != 4 or data.shape[1] != 1:
        raise DataError(f"expected (N, H, W) grayscale images, got shape {tuple(data.shape)}")
    return data.to(torch.float32)


def _step_generator(seed: int, step: int) -> torch.Generator:
    # per-step stream so that resuming never replays or skips randomness
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2**63))


def train_denoiser(dataset, schedule: DiffusionSchedule, config: TrainConfig, arch: UNetConfig | None = None,
                   value_range=DEFAULT_RANGE, out_dir=None, resume_from=None,
                   on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit a NetworkDenoiser by noise regression at uniformly drawn timesteps 1..T.

    ``dataset`` holds images already normalized to ``value_range``. When
    ``out_dir`` is given, checkpoints ``step_XXXXXXX.pt`` and ``last.pt`` are
    written every ``config.checkpoint_every`` steps and at the end.
    """
    data = _stack_dataset(dataset)
    n, _, h, w = data.shape
    if h != w:
        raise DataError(f"images must be square, got {h}x{w}")
    arch = arch or UNetConfig.preset("toy", h)
    if arch.image_size != h:
        raise DataError(f"architecture image_size {arch.image_size} does not match data {h}")

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        den = NetworkDenoiser.from_payload(payload)
        if not den.schedule.same_as(schedule):
            raise ConfigurationError("resume checkpoint schedule differs from requested schedule")
        if payload.get("train_config", {}).get("seed", config.seed) != config.seed:
            raise ConfigurationError("resume checkpoint was trained with a different seed")
        start = payload["step"]
        losses = list(payload.get("losses", []))
        opt_state = payload.get("optimizer")
        ema_state = payload.get("ema")
    else:
        den = NetworkDenoiser(arch, schedule, value_range, seed=config.seed)
        start, losses, opt_state, ema_state = 0, [], None, None

    net = den.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    if opt_state is not None:
        opt.load_state_dict(opt_state)
    ema = None
    if config.ema_decay is not None:
        ema = ema_state if ema_state is not None else {k: v.detach().clone() for k, v in net.state_dict().items()}

    result = TrainResult(den, losses)
    out_dir = Path(out_dir) if out_dir is not None else None

    def checkpoint(step: int):
        if out_dir is None:
            return
        den.step = step
        extra = {"optimizer": opt.state_dict(), "losses": list(losses), "ema": ema,
                 "train_config": dataclasses.asdict(config)}
        path = out_dir / f"step_{step:07d}.pt"
        den.save(path, extra)
        den.save(out_dir / "last.pt", extra)
        result.checkpoints.append(path)

    T = schedule.T
    for step in range(start, config.steps):
        gen = _step_generator(config.seed, step)
        idx = torch.randint(0, n, (config.batch_size,), generator=gen)
        x0 = data[idx]
        if config.hflip:
            flip = torch.rand(config.batch_size, generator=gen) < 0.5
            x0 = torch.where(flip[:, None, None, None], x0.flip(-1), x0)
        t = torch.randint(1, T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        x_t = schedule.q_sample_batch(x0, t, eps)
        lr = config.lr * min(1.0, (step + 1) / config.warmup) if config.warmup else config.lr
        for g in opt.param_groups:
            g["lr"] = lr
        loss = (net(x_t, t) - eps).square().mean()
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergenceError(step, value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip:
            torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for k, v in net.state_dict().items():
                    if v.dtype.is_floating_point:
                        ema[k].mul_(config.ema_decay).add_(v, alpha=1 - config.ema_decay)
                    else:
                        ema[k].copy_(v)
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if (step + 1) % config.log_every == 0:
            log.info("step %d loss %.5f (smoothed %.5f)", step + 1, value, smooth(losses)[-1])
        if (step + 1) % config.checkpoint_every == 0 and step + 1 < config.steps:
            checkpoint(step + 1)

    den.step = max(start, config.steps)
    if config.steps > start:
        checkpoint(den.step)
    if ema is not None:
        net.load_state_dict(ema)
    net.eval()
    return result


def eps_loss(denoiser, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> float:
    """Mean squared noise-regression error on fixed (x0, t, eps) draws."""
    sched = denoiser.schedule
    x_t = sched.q_sample_batch(x0, t, eps)
    total = 0.0
    with torch.no_grad():
        for tt in torch.unique(t).tolist():
            sel = t == tt
            pred = denoiser.predict_eps(x_t[sel], int(tt))
            total += float((pred - eps[sel]).square().sum())
    return total / eps.numel()

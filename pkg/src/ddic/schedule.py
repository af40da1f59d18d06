"""Cosine variance schedule and closed-form forward noising."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError

DEFAULT_T = 1000
DEFAULT_S = 0.008
DEFAULT_MAX_BETA = 0.999


def cosine_alpha_bar(t, T: int, s: float = DEFAULT_S):
    """Unclipped closed-form signal retention f(t)/f(0)."""
    t = np.asarray(t, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * (math.pi / 2)) ** 2
    f0 = math.cos((s / (1 + s)) * (math.pi / 2)) ** 2
    return f / f0


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Precomputed beta / alpha / alpha-bar tables.

    Index ``t`` runs over 0..T. ``betas[0]`` and ``alphas[0]`` are padding
    (0 and 1) so that ``alpha_bars[t] = prod(alphas[1..t])`` and
    ``alpha_bars[0] = 1``.
    """

    T: int
    s: float
    max_beta: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def params(self) -> dict:
        return {"kind": "cosine", "T": self.T, "s": self.s, "max_beta": self.max_beta}

    def same_as(self, other: "DiffusionSchedule") -> bool:
        return self.params() == other.params()

    def __eq__(self, other):
        if not isinstance(other, DiffusionSchedule):
            return NotImplemented
        return self.same_as(other) and np.array_equal(self.betas, other.betas)

    def __hash__(self):
        return hash(tuple(self.params().items()))

    def check_t(self, t: int, lo: int = 0) -> int:
        if not (lo <= int(t) <= self.T) or int(t) != t:
            raise IndexError(f"timestep {t} outside [{lo}, {self.T}]")
        return int(t)

    def q_step(self, x_prev, t: int, noise):
        """One forward noising step x_{t-1} -> x_t."""
        t = self.check_t(t, lo=1)
        _check_like(x_prev, noise)
        beta = float(self.betas[t])
        return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise

    def q_sample(self, x0, t: int, eps):
        """Jump straight from x_0 to x_t."""
        t = self.check_t(t)
        _check_like(x0, eps)
        if t == 0:
            return x0
        ab = float(self.alpha_bars[t])
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps

    def q_sample_batch(self, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        """Vectorized q_sample with one timestep per leading-batch element."""
        ab = torch.tensor(self.alpha_bars, dtype=x0.dtype)[t]
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def _check_like(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"noise shape {tuple(b.shape)} does not match image shape {tuple(a.shape)}")


def cosine_schedule(T: int = DEFAULT_T, s: float = DEFAULT_S, max_beta: float = DEFAULT_MAX_BETA) -> DiffusionSchedule:
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    if not (s > 0) or not math.isfinite(s):
        raise ConfigurationError(f"s must be positive, got {s!r}")
    if not (0 < max_beta < 1):
        raise ConfigurationError(f"max_beta must lie in (0, 1), got {max_beta!r}")
    T = int(T)
    ab = cosine_alpha_bar(np.arange(T + 1), T, s)
    betas = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return DiffusionSchedule(T=T, s=float(s), max_beta=float(max_beta), betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def schedule_from_betas(betas, validate: bool = True) -> DiffusionSchedule:
    """Schedule from an explicit beta_1..beta_T sequence (reported as kind "custom")."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ConfigurationError("betas must be a non-empty 1-D sequence")
    if validate and not np.all((betas > 0) & (betas < 1)):
        raise ConfigurationError("every beta must lie in (0, 1)")
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return DiffusionSchedule(T=betas.size - 1, s=float("nan"), max_beta=float("nan"),
                             betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def schedule_from_params(params: dict) -> DiffusionSchedule:
    kind = params.get("kind", "cosine")
    if kind != "cosine":
        raise ConfigurationError(f"unsupported schedule kind {kind!r}")
    return cosine_schedule(int(params["T"]), float(params["s"]), float(params["max_beta"]))

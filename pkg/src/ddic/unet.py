"""Small U-Net noise predictor with sinusoidal timestep embedding."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

PRESETS = {
    # desk-scale toy net used by tests and phantom runs
    "toy": dict(base_channels=16, channel_mults=(1, 2, 2), num_res_blocks=1, time_dim=64),
    "small": dict(base_channels=32, channel_mults=(1, 2, 2), num_res_blocks=2, time_dim=128),
    "base": dict(base_channels=64, channel_mults=(1, 1, 2, 2, 4), num_res_blocks=2, time_dim=256),
}


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 2
    time_dim: int = 128
    groups: int = 8

    @classmethod
    def preset(cls, name: str, image_size: int) -> "UNetConfig":
        if name not in PRESETS:
            raise KeyError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(image_size=image_size, **PRESETS[name])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        levels = len(cfg.channel_mults)
        if cfg.image_size % (2 ** (levels - 1)):
            raise ValueError(f"image_size {cfg.image_size} not divisible by 2^{levels - 1}")
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim * 2), nn.SiLU(), nn.Linear(cfg.time_dim * 2, cfg.time_dim)
        )
        tdim = cfg.time_dim
        ch = cfg.base_channels
        self.inp = nn.Conv2d(1, ch, 3, padding=1)

        self.down = nn.ModuleList()
        skips = [ch]
        for i, mult in enumerate(cfg.channel_mults):
            cout = cfg.base_channels * mult
            for _ in range(cfg.num_res_blocks):
                self.down.append(ResBlock(ch, cout, tdim, cfg.groups))
                ch = cout
                skips.append(ch)
            if i < levels - 1:
                self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skips.append(ch)

        self.mid1 = ResBlock(ch, ch, tdim, cfg.groups)
        self.mid2 = ResBlock(ch, ch, tdim, cfg.groups)

        self.up = nn.ModuleList()
        for i, mult in reversed(list(enumerate(cfg.channel_mults))):
            cout = cfg.base_channels * mult
            for _ in range(cfg.num_res_blocks + 1):
                self.up.append(ResBlock(ch + skips.pop(), cout, tdim, cfg.groups))
                ch = cout
            if i > 0:
                self.up.append(nn.Upsample(scale_factor=2, mode="nearest"))
                self.up.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.out_norm = nn.GroupNorm(min(cfg.groups, ch), ch)
        self.out = nn.Conv2d(ch, 1, 3, padding=1)
        # start as the zero predictor
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(x.dtype))
        h = self.inp(x)
        hs = [h]
        for layer in self.down:
            h = layer(h, temb) if isinstance(layer, ResBlock) else layer(h)
            hs.append(h)
        h = self.mid2(self.mid1(h, temb), temb)
        for layer in self.up:
            if isinstance(layer, ResBlock):
                h = layer(torch.cat([h, hs.pop()], dim=1), temb)
            else:
                h = layer(h)
        return self.out(F.silu(self.out_norm(h)))

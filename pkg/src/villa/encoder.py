"""Stand-in visual encoder: learned patch embedding plus a pooled feature pyramid."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DimensionError
from .numerics import DTYPE, as_tensor, matmul


@dataclass
class VideoClip:
    frames: np.ndarray  # T x H x W x 3, intensities in [0, 1]
    fps: float = 8.0
    id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3 or f.shape[0] < 1:
            raise DimensionError(f"clip frames must be T x H x W x 3, got {f.shape}")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise ConfigError("clip intensities must lie in [0, 1]")
        self.frames = f

    @property
    def shape(self) -> tuple[int, int, int]:
        t, h, w, _ = self.frames.shape
        return t, h, w


@dataclass
class EncoderConfig:
    patch: int = 4
    channels: int = 32
    scales: int = 3
    position_scale: float = 0.25
    embed_gain: float = 8.0  # init scale of the patch projection; intensities are low-variance

    def validate(self):
        if self.patch < 1 or self.scales < 1 or self.channels < 1:
            raise ConfigError(f"invalid encoder config {self}")


@dataclass
class MultiScaleFeatures:
    """``levels[0]`` is the finest map; each level is ``T x N_l x C``."""

    levels: list[torch.Tensor]
    grids: list[tuple[int, int]]
    positions: list[torch.Tensor] = field(default_factory=list)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]

    @property
    def top(self) -> torch.Tensor:
        return self.levels[-1]

    def counts(self) -> list[int]:
        return [lvl.shape[1] for lvl in self.levels]


def positional_codes(h: int, w: int, channels: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal codes, ``(h*w) x channels``; first half encodes y, second x."""
    half = channels // 2
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij"
    )
    out = torch.zeros(h * w, channels, dtype=DTYPE)
    for part, coord, width in ((0, ys.reshape(-1), half), (half, xs.reshape(-1), channels - half)):
        for c in range(width):
            freq = 1.0 / (10000.0 ** (2 * (c // 2) / max(width, 1)))
            fn = torch.sin if c % 2 == 0 else torch.cos
            out[:, part + c] = fn(coord * freq)
    return out


def check_divisible(h: int, w: int, cfg: EncoderConfig):
    step = cfg.patch * 2 ** (cfg.scales - 1)
    if h % step or w % step:
        raise ConfigError(
            f"frame size {h}x{w} not divisible by patch {cfg.patch} x 2^{cfg.scales - 1}"
        )


class VisualEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        p, c = cfg.patch, cfg.channels
        fan_in = p * p * 3
        self.patch_embed = nn.Parameter(
            torch.empty(fan_in, c, dtype=DTYPE).uniform_(-1, 1) * cfg.embed_gain * math.sqrt(3.0 / fan_in)
        )
        self.mix = nn.ParameterList(
            nn.Parameter(torch.eye(c, dtype=DTYPE) + 0.1 * torch.randn(c, c, dtype=DTYPE) / math.sqrt(c))
            for _ in range(cfg.scales - 1)
        )
        self._pos_cache: dict[tuple[int, int], torch.Tensor] = {}

    def positions(self, h: int, w: int) -> torch.Tensor:
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = self.cfg.position_scale * positional_codes(h, w, self.cfg.channels)
        return self._pos_cache[key]

    def patchify(self, frames: torch.Tensor) -> torch.Tensor:
        t, h, w, _ = frames.shape
        p = self.cfg.patch
        x = frames.reshape(t, h // p, p, w // p, p, 3).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(t, (h // p) * (w // p), p * p * 3)

    def forward(self, frames) -> MultiScaleFeatures:
        frames = as_tensor(frames)
        t, h, w, _ = frames.shape
        check_divisible(h, w, self.cfg)
        gh, gw = h // self.cfg.patch, w // self.cfg.patch
        pos = self.positions(gh, gw)
        level = matmul(self.patchify(frames), self.patch_embed) + pos
        levels, grids, positions = [level], [(gh, gw)], [pos]
        for mix in self.mix:
            grid = level.reshape(t, gh, gw, -1)
            pooled = grid.reshape(t, gh // 2, 2, gw // 2, 2, -1).mean(dim=(2, 4))
            gh, gw = gh // 2, gw // 2
            level = matmul(pooled.reshape(t, gh * gw, -1), mix)
            levels.append(level)
            grids.append((gh, gw))
        return MultiScaleFeatures(levels=levels, grids=grids, positions=positions)


def encode_frames(clip: VideoClip, encoder: VisualEncoder) -> MultiScaleFeatures:
    return encoder(clip.frames)


def project_visual(f_top: torch.Tensor, proj: torch.Tensor) -> torch.Tensor:
    """Vision-to-language projection: ``N x C`` features into the responder width."""
    if f_top.shape[-1] != proj.shape[0]:
        raise DimensionError(
            f"projection expects {proj.shape[0]} channels, features have {f_top.shape[-1]}"
        )
    return matmul(f_top, proj)

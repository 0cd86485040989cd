"""Video-frame decoder: per-scale masked cross-attention, self-attention and FFN
layers over frame and video segmentation embeddings, the momentum update that
folds frame embeddings into video embeddings, and the mask head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .context import FFN
from .encoder import MultiScaleFeatures
from .errors import ConfigError, DimensionError
from .numerics import DTYPE, matmul, scaled_dot_attention, softmax_rows

AGGREGATIONS = ("sequential", "stacked", "fusion")


@dataclass
class DecoderConfig:
    layers: int = 3
    gamma: float = 0.03
    mask_threshold: float = 0.5
    width: int = 32
    aggregation: str = "sequential"
    frame_branch: bool = True
    masked_attention: bool = True

    def validate(self, scales: Optional[int] = None):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.layers < 0 or (scales is not None and self.layers > scales):
            raise ConfigError(f"decoder layers {self.layers} exceed feature scales {scales}")


@dataclass
class DecoderState:
    q_f: Optional[torch.Tensor]  # T x N_tok x d (None without the frame branch)
    q_v: torch.Tensor  # N_tok x d
    layer: int = 0


@dataclass
class MaskTracklet:
    masks: np.ndarray  # T x H x W bool
    logits: Optional[np.ndarray] = None
    confidence: float = 1.0
    token_index: int = -1

    @property
    def shape(self):
        return self.masks.shape


def video_frame_aggregate(q_v: torch.Tensor, q_f_t: torch.Tensor, gamma: float) -> torch.Tensor:
    """Momentum blend ``gamma * softmax(q_v q_f^T) q_f + (1 - gamma) * q_v``."""
    if q_v.shape[-1] != q_f_t.shape[-1]:
        raise DimensionError(f"widths differ: {tuple(q_v.shape)} vs {tuple(q_f_t.shape)}")
    attn = softmax_rows(matmul(q_v, q_f_t.transpose(-1, -2)))
    return gamma * matmul(attn, q_f_t) + (1.0 - gamma) * q_v


def aggregate_frames(q_v: torch.Tensor, q_f: torch.Tensor, gamma: float, strategy: str) -> torch.Tensor:
    if strategy == "sequential":
        for t in range(q_f.shape[0]):
            q_v = video_frame_aggregate(q_v, q_f[t], gamma)
        return q_v
    if strategy == "stacked":
        return video_frame_aggregate(q_v, q_f.reshape(-1, q_f.shape[-1]), gamma)
    if strategy == "fusion":
        return gamma * q_f.mean(dim=0) + (1.0 - gamma) * q_v
    raise ConfigError(f"unknown aggregation {strategy!r}")


def with_fallback(mask: torch.Tensor) -> torch.Tensor:
    """Rows with no admissible key attend everywhere instead."""
    empty = ~mask.any(dim=-1, keepdim=True)
    return mask | empty


class Attention(nn.Module):
    def __init__(self, d: int, kv_dim: Optional[int] = None):
        super().__init__()
        kv_dim = kv_dim or d
        self.wq = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.wk = nn.Linear(kv_dim, d, bias=False, dtype=DTYPE)
        self.wv = nn.Linear(kv_dim, d, bias=False, dtype=DTYPE)
        self.wo = nn.Linear(d, d, bias=False, dtype=DTYPE)

    def forward(self, q, kv, mask=None):
        out, w = scaled_dot_attention(self.wq(q), self.wk(kv), self.wv(kv), mask=mask)
        return self.wo(out), w


class ScaleBlock(nn.Module):
    """Masked cross-attention, self-attention, FFN; pre-norm residual sublayers."""

    def __init__(self, d: int, channels: int):
        super().__init__()
        self.ca_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.ca = Attention(d, channels)
        self.sa_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.sa = Attention(d)
        self.ffn_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.ffn = FFN(d, 2 * d)
        # residual branches start small so the queries' identity survives early training
        with torch.no_grad():
            for lin in (self.ca.wo, self.sa.wo, self.ffn.fc2):
                lin.weight.mul_(0.1)
            self.ffn.fc2.bias.mul_(0.1)

    def forward(self, q, memory, mask=None):
        if mask is not None:
            mask = with_fallback(mask)
        ca, _ = self.ca(self.ca_norm(q), memory, mask)
        q = q + ca
        h = self.sa_norm(q)
        sa, _ = self.sa(h, h)
        q = q + sa
        return q + self.ffn(self.ffn_norm(q))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, channels: int, frame_branch: bool = True):
        super().__init__()
        self.video = ScaleBlock(d, channels)
        self.frame = ScaleBlock(d, channels) if frame_branch else None


def decoder_layer(
    layer: DecoderLayer,
    state: DecoderState,
    f_level: torch.Tensor,
    prev_masks: Optional[tuple[Optional[torch.Tensor], torch.Tensor]] = None,
) -> DecoderState:
    """One cascade step at a single feature scale.

    ``f_level`` is ``T x N_l x C``. ``prev_masks`` holds boolean attention masks
    ``(frame: T x N_tok x N_l, video: N_tok x (T * N_l))`` or None for the
    unmasked first layer.
    """
    t, n_l, c = f_level.shape
    mask_f, mask_v = prev_masks if prev_masks is not None else (None, None)
    q_f = state.q_f
    if layer.frame is not None and q_f is not None:
        q_f = layer.frame(q_f, f_level, mask_f)
    q_v = layer.video(state.q_v, f_level.reshape(t * n_l, c), mask_v)
    return DecoderState(q_f=q_f, q_v=q_v, layer=state.layer + 1)


class MaskHead(nn.Module):
    def __init__(self, d: int, channels: int):
        super().__init__()
        self.mlp = FFN(d, d, channels)
        # per-pixel embedding of the finest map; nonlinear so colours can be isolated
        self.pixel = FFN(channels, 2 * channels, channels)
        self.score = nn.Linear(d, 1, dtype=DTYPE)  # objectness logit per token


def mask_logits_grid(mask_embed: torch.Tensor, pixel: torch.Tensor) -> torch.Tensor:
    """Dot products of ``(..., N_tok, C)`` embeddings with ``(..., P, C)`` pixel features."""
    if mask_embed.shape[-1] != pixel.shape[-1]:
        raise DimensionError(
            f"mask embedding width {mask_embed.shape[-1]} != pixel width {pixel.shape[-1]}"
        )
    return matmul(mask_embed, pixel.transpose(-1, -2))


def upsample(grid_logits: torch.Tensor, grid: tuple[int, int], size: tuple[int, int]) -> torch.Tensor:
    lead = grid_logits.shape[:-1]
    x = grid_logits.reshape(-1, 1, *grid)
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return x.reshape(*lead, *size)


def predict_masks(
    q: torch.Tensor,
    pixel_features: torch.Tensor,
    mlp: nn.Module,
    grid: tuple[int, int],
    size: tuple[int, int],
    per_frame: bool = False,
) -> torch.Tensor:
    """Mask logits at full resolution.

    Video tokens (``q``: N_tok x d) score every frame -> ``N_tok x T x H x W``.
    With ``per_frame`` (``q``: T x N_tok x d) token t scores frame t only ->
    ``T x N_tok x H x W``.
    """
    emb = mlp(q)
    if per_frame:
        grid_logits = mask_logits_grid(emb, pixel_features)
    else:
        grid_logits = mask_logits_grid(emb.unsqueeze(0), pixel_features).transpose(0, 1)
    return upsample(grid_logits, grid, size)


def attention_masks(grid_logits: torch.Tensor, grid: tuple[int, int], factor: int, threshold: float) -> torch.Tensor:
    """Threshold grid logits pooled ``factor``x down; returns flattened boolean masks."""
    lead = grid_logits.shape[:-1]
    x = grid_logits.detach().reshape(-1, 1, *grid)
    if factor > 1:
        x = F.avg_pool2d(x, factor)
    return (torch.sigmoid(x) > threshold).reshape(*lead, -1)


@dataclass
class DecoderOutput:
    video_logits: torch.Tensor  # N_tok x T x H x W
    frame_logits: Optional[torch.Tensor]  # T x N_tok x H x W
    states: list[DecoderState] = field(default_factory=list)
    threshold: float = 0.5
    video_scores: Optional[torch.Tensor] = None  # N_tok objectness logits
    frame_scores: Optional[torch.Tensor] = None  # T x N_tok

    def tracklets(self) -> list[MaskTracklet]:
        return logits_to_tracklets(self.video_logits.detach(), self.threshold, self.video_scores)


def logits_to_tracklets(
    video_logits: torch.Tensor, threshold: float = 0.5, scores: Optional[torch.Tensor] = None
) -> list[MaskTracklet]:
    """Threshold each token's logits; confidence is the mean probability inside
    the mask, times the token's objectness probability when scores are given."""
    out = []
    for n in range(video_logits.shape[0]):
        logits = video_logits[n].detach().cpu().numpy().astype(np.float64)
        prob = 1.0 / (1.0 + np.exp(-logits))
        masks = prob > threshold
        conf = float(prob[masks].mean()) if masks.any() else 0.0
        if scores is not None:
            conf *= float(torch.sigmoid(scores[n].detach()))
        out.append(MaskTracklet(masks=masks, logits=logits, confidence=conf, token_index=n))
    return out


class VideoFrameDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, channels: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.layers = nn.ModuleList(
            DecoderLayer(d, channels, cfg.frame_branch) for _ in range(cfg.layers)
        )
        self.norm = nn.LayerNorm(d, dtype=DTYPE)
        self.head = MaskHead(d, channels)

    def level_schedule(self, scales: int) -> list[int]:
        """Feature level per layer, coarse to fine over the finest ``layers`` levels."""
        self.cfg.validate(scales)
        return [self.cfg.layers - 1 - l for l in range(self.cfg.layers)]

    def _grid_logits(self, state: DecoderState, pixel: torch.Tensor):
        head = self.head.mlp
        video = mask_logits_grid(head(self.norm(state.q_v)).unsqueeze(0), pixel).transpose(0, 1)
        frame = None
        if state.q_f is not None:
            frame = mask_logits_grid(head(self.norm(state.q_f)), pixel)
        return frame, video

    def forward(self, q_f: torch.Tensor, q_v: torch.Tensor, feats: MultiScaleFeatures, size: tuple[int, int]) -> DecoderOutput:
        return run_decoder(self, q_f, q_v, feats, size)


def run_decoder(
    decoder: VideoFrameDecoder,
    q_f: torch.Tensor,
    q_v: torch.Tensor,
    feats: MultiScaleFeatures,
    size: tuple[int, int],
) -> DecoderOutput:
    cfg = decoder.cfg
    schedule = decoder.level_schedule(len(feats.levels))
    t = feats.levels[0].shape[0]
    pixel = decoder.head.pixel(feats.levels[0])
    grid0 = feats.grids[0]
    frame_on = cfg.frame_branch
    state = DecoderState(q_f=q_f.unsqueeze(0).expand(t, -1, -1) if frame_on else None, q_v=q_v)
    states = [state]
    masks = None
    for i, level in enumerate(schedule):
        state = decoder_layer(decoder.layers[i], state, feats.levels[level], masks)
        if frame_on:
            state.q_v = aggregate_frames(state.q_v, state.q_f, cfg.gamma, cfg.aggregation)
        states.append(state)
        if cfg.masked_attention and i + 1 < len(schedule):
            nxt = schedule[i + 1]
            frame_g, video_g = decoder._grid_logits(state, pixel)
            factor = 2 ** nxt
            mv = attention_masks(video_g, grid0, factor, cfg.mask_threshold)  # N x T x P
            mv = mv.reshape(mv.shape[0], -1)
            mf = None
            if frame_g is not None:
                mf = attention_masks(frame_g, grid0, factor, cfg.mask_threshold)
            masks = (mf, mv)

    head = decoder.head.mlp
    q_v = decoder.norm(state.q_v)
    video_logits = predict_masks(q_v, pixel, head, grid0, size)
    video_scores = decoder.head.score(q_v).squeeze(-1)
    frame_logits = frame_scores = None
    if frame_on:
        q_f = decoder.norm(state.q_f)
        frame_logits = predict_masks(q_f, pixel, head, grid0, size, per_frame=True)
        frame_scores = decoder.head.score(q_f).squeeze(-1)
    return DecoderOutput(video_logits, frame_logits, states, cfg.mask_threshold, video_scores, frame_scores)

"""End-to-end model: encoder -> context aggregation -> responder -> decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .bench import ANSWER_WORDS, KINDS, PALETTE, QUERY_WORDS, QueryEpisode
from .config import RunConfig
from .context import ContextAggregation, CondensedEmbeddings
from .decoder import DecoderOutput, MaskTracklet, VideoFrameDecoder
from .errors import ConfigError
from .encoder import MultiScaleFeatures, VisualEncoder, project_visual
from .numerics import DTYPE, as_tensor, scaled_dot_attention
from .reasoning import (
    Responder,
    Response,
    SegTokenBank,
    Vocabulary,
    build_seg_codebook,
    generate_response,
    project_seg_tokens,
    text_loss,
)
from .supervision import LossBreakdown, frame_mask_loss, matched_mask_loss, total_loss


def _matrix(rows: int, cols: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(rows)
    return nn.Parameter(torch.empty(rows, cols, dtype=DTYPE).uniform_(-bound, bound))


@dataclass
class ModelOutput:
    features: MultiScaleFeatures
    context: list[CondensedEmbeddings]
    response: Response
    q_f: torch.Tensor
    q_v: torch.Tensor
    decoded: DecoderOutput

    def tracklets(self) -> list[MaskTracklet]:
        return self.decoded.tracklets()


class ViLLa(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg = cfg.validate()
        self.cfg = cfg
        c, d = cfg.encoder.channels, cfg.responder.hidden
        n = cfg.responder.seg_tokens
        self.vocab = Vocabulary.build(QUERY_WORDS + ANSWER_WORDS, n)
        torch.manual_seed(cfg.seed)
        self.encoder = VisualEncoder(cfg.encoder)
        # slots start large so each one attends sharply to a few instruction words
        self.query_slots = nn.Parameter(3.0 * torch.randn(cfg.cam.queries, c, dtype=DTYPE))
        self.cam = ContextAggregation(c, cfg.cam)
        self.visual_proj = _matrix(c, d)
        self.context_proj = _matrix(c, d)
        self.responder = Responder(cfg.responder, self.vocab)
        self.text_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.text_key = nn.Parameter(torch.empty(d, c, dtype=DTYPE).uniform_(-1, 1) * math.sqrt(3.0 / d))
        self.text_proj = nn.Parameter(torch.empty(d, c, dtype=DTYPE).uniform_(-1, 1) * math.sqrt(3.0 / d))
        bank = build_seg_codebook(n, d, cfg.seed)
        self.bank_frame = nn.Parameter(bank.frame)
        self.bank_video = nn.Parameter(bank.video)
        self.phi = _matrix(d, cfg.decoder.width)
        self.decoder = VideoFrameDecoder(cfg.decoder, c)

    @property
    def bank(self) -> SegTokenBank:
        return SegTokenBank(frame=self.bank_frame, video=self.bank_video)

    def text_rows(self, tokens: Sequence[str]) -> torch.Tensor:
        """``M x C`` text queries: learned slots cross-attending over the
        instruction's word embeddings (a one-layer stand-in for a query former)."""
        if not tokens:
            raise ConfigError("empty instruction")
        words = self.text_norm(self.responder.embed(list(tokens)))
        out, _ = scaled_dot_attention(self.query_slots, words @ self.text_key, words @ self.text_proj)
        return out

    def forward(
        self,
        frames,
        query_tokens: Sequence[str],
        answer: Optional[Sequence[str]] = None,
        supervise: Optional[Sequence[str]] = None,
    ) -> ModelOutput:
        frames = as_tensor(frames)
        t, h, w, _ = frames.shape
        feats = self.encoder(frames)
        x_txt = self.text_rows(query_tokens)
        if self.cfg.ablation.cam_on:
            context = self.cam(x_txt, feats.top)
        else:
            context = [CondensedEmbeddings(rows=x_txt, source_indices=list(range(x_txt.shape[0])))]
        ctx = torch.cat([c.rows for c in context], dim=0) @ self.context_proj
        visual = project_visual(feats.top.mean(dim=0), self.visual_proj)
        response = generate_response(
            visual, ctx, self.bank, self.responder, answer=answer, object_words=(tuple(PALETTE), KINDS), supervise=supervise
        )
        q_f, q_v = project_seg_tokens(response.seg_states, self.phi)
        decoded = self.decoder(q_f, q_v, feats, (h, w))
        return ModelOutput(feats, context, response, q_f, q_v, decoded)

    def episode_forward(self, ep: QueryEpisode, supervised: bool = True) -> ModelOutput:
        """With ``supervised`` the reference answer is fed in (teacher forcing);
        otherwise the object slots are decoded greedily."""
        if supervised:
            return self(ep.clip.frames, ep.query_tokens(), answer=ep.answer)
        return self(ep.clip.frames, ep.query_tokens())

    def loss(self, ep: QueryEpisode, out: Optional[ModelOutput] = None) -> LossBreakdown:
        out = out or self.episode_forward(ep, supervised=True)
        weights = self.cfg.losses
        gt = torch.as_tensor(np.stack([tr.masks for tr in ep.target_tracklets()]), dtype=DTYPE)
        txt = text_loss(out.response.logits, out.response.targets)
        ce_v, dice_v = matched_mask_loss(out.decoded.video_logits, gt, weights, "v", out.decoded.video_scores)
        if out.decoded.frame_logits is not None:
            ce_f, dice_f = frame_mask_loss(out.decoded.frame_logits, gt, weights, out.decoded.frame_scores)
        else:
            ce_f = dice_f = torch.zeros((), dtype=DTYPE)
        total = total_loss(txt, ce_f, ce_v, dice_f, dice_v, weights)
        return LossBreakdown(total, txt, ce_f, ce_v, dice_f, dice_v)

    @torch.no_grad()
    def infer(self, ep: QueryEpisode) -> tuple[list[MaskTracklet], Response]:
        out = self.episode_forward(ep, supervised=False)
        return out.tracklets(), out.response

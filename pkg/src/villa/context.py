"""Context aggregation: text queries attend to the top-level visual map, then the
K most peaked queries are kept per frame."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DimensionError, EmptyContextError
from .numerics import DTYPE, attention_logits, scaled_dot_attention

SCORE_STRATEGIES = ("max", "logit")


@dataclass
class TextEmbeddings:
    rows: torch.Tensor  # M x C
    tokens: list[str] = field(default_factory=list)


@dataclass
class CondensedEmbeddings:
    rows: torch.Tensor  # K x C
    source_indices: list[int]


@dataclass
class CAMConfig:
    queries: int = 8  # M
    keep: int = 4  # K
    score: str = "max"
    residual: bool = False

    def validate(self):
        if not 1 <= self.keep <= self.queries:
            raise ConfigError(f"need 1 <= K <= M, got K={self.keep}, M={self.queries}")
        if self.score not in SCORE_STRATEGIES:
            raise ConfigError(f"unknown score strategy {self.score!r}")


class FFN(nn.Module):
    """Two-layer GELU feed-forward map."""

    def __init__(self, dim: int, hidden: int, out: Optional[int] = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, out or dim, dtype=DTYPE)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def aggregate_context(
    x_txt: torch.Tensor,
    f_top: torch.Tensor,
    ffn: nn.Module,
    residual: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """``E = FFN(CrossAttn(x_txt, F, F))``; returns ``(E, attention weights)``.

    With ``residual`` the text rows are added back around both sublayers.
    """
    if f_top.shape[-2] == 0:
        raise EmptyContextError("visual context has no tokens")
    if x_txt.shape[-1] != f_top.shape[-1]:
        raise DimensionError(
            f"text width {x_txt.shape[-1]} != visual width {f_top.shape[-1]}"
        )
    attended, attn = scaled_dot_attention(x_txt, f_top, f_top)
    if residual:
        h = x_txt + attended
        return h + ffn(h), attn
    return ffn(attended), attn


def response_scores(attn_or_logits: torch.Tensor) -> torch.Tensor:
    return attn_or_logits.max(dim=-1).values


def condense_top_k(e_t: torch.Tensor, scores_from: torch.Tensor, k: int) -> CondensedEmbeddings:
    """Keep the ``k`` rows with the highest row-maximum of ``scores_from``.

    Ties go to the smaller index; kept rows stay in ascending index order.
    ``scores_from`` is the attention matrix (or its pre-softmax logits).
    """
    m = e_t.shape[0]
    if not 1 <= k <= m:
        raise ConfigError(f"cannot keep K={k} of M={m} queries")
    scores = response_scores(scores_from.detach()).tolist()
    ranked = sorted(range(m), key=lambda i: (-scores[i], i))
    keep = sorted(ranked[:k])
    return CondensedEmbeddings(rows=e_t[keep], source_indices=keep)


class ContextAggregation(nn.Module):
    def __init__(self, channels: int, cfg: CAMConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.ffn = FFN(channels, 2 * channels)

    def forward(self, x_txt: torch.Tensor, f_top: torch.Tensor) -> list[CondensedEmbeddings]:
        """``f_top`` is ``T x N x C``; returns one condensed set per frame."""
        e, attn = aggregate_context(x_txt, f_top, self.ffn, self.cfg.residual)
        if self.cfg.score == "logit":
            basis = attention_logits(x_txt, f_top)
        else:
            basis = attn
        return [condense_top_k(e[t], basis[t], self.cfg.keep) for t in range(f_top.shape[0])]

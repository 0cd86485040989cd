"""Segmentation-token codebook, a small causal transformer responder, the
projection of emitted seg states to decoder width, and the text loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .context import FFN, CondensedEmbeddings
from .errors import ConfigError, DimensionError, EncodingError
from .numerics import DTYPE, matmul, scaled_dot_attention

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
MAX_VOCAB = 64


def seg_symbols(n_tok: int) -> list[str]:
    return [f"<seg_f_{i + 1}>" for i in range(n_tok)] + [f"<seg_v_{i + 1}>" for i in range(n_tok)]


class Vocabulary:
    def __init__(self, symbols: Sequence[str]):
        if len(set(symbols)) != len(symbols):
            raise ConfigError("vocabulary has duplicate symbols")
        if len(symbols) > MAX_VOCAB:
            raise ConfigError(f"vocabulary has {len(symbols)} symbols, limit is {MAX_VOCAB}")
        self.symbols = list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}

    @classmethod
    def build(cls, words: Sequence[str], n_tok: int) -> "Vocabulary":
        base = [PAD, BOS, EOS] + seg_symbols(n_tok)
        return cls(base + [w for w in dict.fromkeys(words) if w not in base])

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, sym):
        return sym in self.index

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise EncodingError(f"symbol {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    def require_placeholders(self, n_tok: int):
        missing = [s for s in seg_symbols(n_tok) + [EOS, BOS] if s not in self.index]
        if missing:
            raise ConfigError(f"vocabulary lacks placeholders {missing}")


@dataclass
class ResponderConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 1
    max_len: int = 64
    seg_tokens: int = 4

    def validate(self):
        if self.heads != 1:
            raise ConfigError("only single-head attention is supported")
        if self.seg_tokens < 1 or self.layers < 0 or self.hidden < 1:
            raise ConfigError(f"invalid responder config {self}")


@dataclass
class SegTokenBank:
    frame: torch.Tensor  # N_tok x d
    video: torch.Tensor  # N_tok x d

    @property
    def n_tok(self) -> int:
        return self.frame.shape[0]

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.frame, self.video], dim=0)


def build_seg_codebook(n_tok: int, d: int, seed: int) -> SegTokenBank:
    if n_tok < 1:
        raise ConfigError("need at least one segmentation token per scale")
    bound = 1.0 / math.sqrt(d)
    vals = np.random.default_rng(seed).uniform(-bound, bound, size=(2 * n_tok, d))
    vals = torch.as_tensor(vals, dtype=DTYPE)
    return SegTokenBank(frame=vals[:n_tok].clone(), video=vals[n_tok:].clone())


@dataclass
class Response:
    text_tokens: list[str]
    seg_states: torch.Tensor  # 2 N_tok x d, frame scale first
    logits: torch.Tensor  # answer positions x vocab
    targets: list[int]


class CausalBlock(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.wq = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.wk = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.wv = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.wo = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.mlp = FFN(d, 2 * d)

    def forward(self, x):
        s = x.shape[0]
        causal = torch.ones(s, s, dtype=torch.bool).tril()
        h = self.ln1(x)
        att, _ = scaled_dot_attention(self.wq(h), self.wk(h), self.wv(h), mask=causal)
        x = x + self.wo(att)
        return x + self.mlp(self.ln2(x))


class Responder(nn.Module):
    """Two-layer causal transformer over embedded input rows."""

    def __init__(self, cfg: ResponderConfig, vocab: Vocabulary):
        super().__init__()
        cfg.validate()
        vocab.require_placeholders(cfg.seg_tokens)
        self.cfg, self.vocab = cfg, vocab
        d = cfg.hidden
        self.tok_embed = nn.Parameter(torch.randn(len(vocab), d, dtype=DTYPE) * 0.1)
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_len, d, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(CausalBlock(d) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(d, dtype=DTYPE)
        self.lm_head = nn.Linear(d, len(vocab), dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        s = x.shape[0]
        if s > self.cfg.max_len:
            raise ConfigError(f"sequence length {s} exceeds max_len {self.cfg.max_len}")
        h = x + self.pos_embed[:s]
        for block in self.blocks:
            h = block(h)
        h = self.ln_f(h)
        return h, self.lm_head(h)

    def embed(self, words: Sequence[str]) -> torch.Tensor:
        return self.tok_embed[self.vocab.encode(words)]


def generate_response(
    visual: torch.Tensor,
    context: Sequence[CondensedEmbeddings] | torch.Tensor,
    bank: SegTokenBank,
    responder: Responder,
    answer: Optional[Sequence[str]] = None,
    object_words: Sequence[str] = (),
    supervise: Optional[Sequence[str]] = None,
) -> Response:
    """Run the responder on ``visual ++ context ++ answer prefix ++ placeholders``.

    ``answer`` is a teacher-forced prefix (e.g. ``["the", "red", "circle", "is"]``).
    Without it the slots between ``the`` and ``is`` are decoded greedily, one
    per option list in ``object_words`` (a flat list means a single slot). ``supervise`` replaces the decoded prefix as the loss
    target while keeping the decoded words as input.
    """
    vocab = responder.vocab
    n = bank.n_tok
    vocab.require_placeholders(n)
    if isinstance(context, torch.Tensor):
        ctx = context
    else:
        ctx = torch.cat([c.rows for c in context], dim=0) if context else visual[:0]
    d = responder.cfg.hidden
    for name, t in (("visual", visual), ("context", ctx), ("bank", bank.frame)):
        if t.shape[-1] != d:
            raise DimensionError(f"{name} width {t.shape[-1]} != responder width {d}")
    prompt = torch.cat([visual, ctx], dim=0)

    if answer is None:
        slots = [object_words] if object_words and isinstance(object_words[0], str) else list(object_words)
        if not slots or not all(slots):
            raise ConfigError("greedy decoding needs a non-empty object word set")
        words = [BOS, "the"]
        for options in slots:
            _, logits = responder(torch.cat([prompt, responder.embed(words)], dim=0))
            scores = logits[-1, vocab.encode(options)]
            words.append(options[int(torch.argmax(scores))])
        words.append("is")
    else:
        words = [BOS] + list(answer)

    placeholders = seg_symbols(n)
    seq = torch.cat([prompt, responder.embed(words), bank.frame, bank.video], dim=0)
    hidden, logits = responder(seq)
    start = prompt.shape[0]
    text = words[1:] + placeholders + [EOS]
    target_words = list(supervise) + placeholders + [EOS] if supervise is not None else text
    if len(target_words) != len(text):
        raise DimensionError(f"supervised answer {supervise} does not fit the template")
    return Response(
        text_tokens=text,
        seg_states=hidden[-2 * n:],
        logits=logits[start:],
        targets=vocab.encode(target_words),
    )


def project_seg_tokens(seg_states: torch.Tensor, phi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if seg_states.shape[0] % 2:
        raise DimensionError(f"expected an even number of seg states, got {seg_states.shape[0]}")
    if seg_states.shape[-1] != phi.shape[0]:
        raise DimensionError(
            f"seg state width {seg_states.shape[-1]} != projection input {phi.shape[0]}"
        )
    q = matmul(seg_states, phi)
    n = q.shape[0] // 2
    return q[:n], q[n:]


def text_loss(logits: torch.Tensor, targets: Sequence[int]) -> torch.Tensor:
    """Mean next-token cross entropy; ``logits[i]`` predicts ``targets[i]``."""
    v = logits.shape[-1]
    tgt = torch.as_tensor(list(targets), dtype=torch.long)
    if tgt.numel() != logits.shape[0]:
        raise DimensionError(f"{logits.shape[0]} logit rows for {tgt.numel()} targets")
    if tgt.numel() and (int(tgt.min()) < 0 or int(tgt.max()) >= v):
        raise EncodingError(f"target symbol outside vocabulary of size {v}")
    logp = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -logp[torch.arange(tgt.numel()), tgt].mean()

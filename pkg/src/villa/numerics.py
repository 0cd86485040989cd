"""Dense float64 tensor helpers: matmul, row softmax, scaled dot attention,
and a central-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects in float64. Every function accepts
optional leading batch dimensions; the documented shapes refer to the last two.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import torch

from .errors import DimensionError, EvaluationError, MaskedRowError

DTYPE = torch.float64
MASK_FILL = -1e30


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    shifted = m - m.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def attention_logits(q: torch.Tensor, k: torch.Tensor, scaled: bool = True) -> torch.Tensor:
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"attention channel mismatch: query {tuple(q.shape)} vs key {tuple(k.shape)}"
        )
    logits = matmul(q, k.transpose(-1, -2))
    if scaled:
        logits = logits / math.sqrt(q.shape[-1])
    return logits


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    scaled: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-head attention ``softmax(q k^T / sqrt(C)) v``.

    ``mask`` is boolean (or 0/1) with True marking keys a query may attend to.
    A query row with no admissible key raises ``MaskedRowError``; callers that
    want the unmasked fallback must resolve it before calling.
    """
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"key/value length mismatch: {tuple(k.shape)} vs {tuple(v.shape)}"
        )
    logits = attention_logits(q, k, scaled)
    if mask is not None:
        mask = torch.as_tensor(mask).bool()
        if mask.shape[-2:] != logits.shape[-2:]:
            raise DimensionError(
                f"mask shape {tuple(mask.shape)} does not match logits {tuple(logits.shape)}"
            )
        if not bool(mask.any(dim=-1).all()):
            raise MaskedRowError("attention mask has a row with no admissible key")
        logits = logits + torch.where(mask, 0.0, MASK_FILL).to(logits.dtype)
    weights = softmax_rows(logits)
    return matmul(weights, v), weights


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * weight + bias


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    eps: float
    checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def finite_diff_grad_check(
    f: Callable[[torch.Tensor], torch.Tensor | float],
    x: torch.Tensor,
    analytic_grad: torch.Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> GradCheckReport:
    """Compare ``analytic_grad`` against central differences of ``f`` at ``x``.

    The relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``indices`` restricts the check to a subset of flat positions.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    x = x.detach().to(DTYPE)
    analytic = torch.as_tensor(analytic_grad, dtype=DTYPE).reshape(-1)
    if analytic.numel() != x.numel():
        raise DimensionError(
            f"gradient has {analytic.numel()} entries, input has {x.numel()}"
        )
    flat = x.reshape(-1).clone()
    positions = range(flat.numel()) if indices is None else list(indices)

    def evaluate(vec):
        with torch.no_grad():
            val = float(f(vec.reshape(x.shape)))
        if not math.isfinite(val):
            raise EvaluationError(f"non-finite function value {val}")
        return val

    worst, worst_i, count = 0.0, -1, 0
    for i in positions:
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = evaluate(flat)
        flat[i] = orig - eps
        fm = evaluate(flat)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic[i].item()
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        count += 1
        if rel > worst or worst_i < 0:
            worst, worst_i = max(rel, worst), i
    return GradCheckReport(max_rel_error=worst, worst_index=worst_i, eps=eps, checked=count)


def autograd_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> GradCheckReport:
    """Gradient of ``f`` from autograd, verified by ``finite_diff_grad_check``."""
    xg = x.detach().clone().to(DTYPE).requires_grad_(True)
    (grad,) = torch.autograd.grad(f(xg), xg)
    return finite_diff_grad_check(f, x, grad, eps=eps, indices=indices)


def param_grad_check(
    loss_fn: Callable[[], torch.Tensor],
    param: torch.Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> GradCheckReport:
    """Check the gradient of ``loss_fn()`` with respect to a parameter tensor in place."""
    (grad,) = torch.autograd.grad(loss_fn(), param)
    saved = param.detach().clone()

    def f(value):
        with torch.no_grad():
            param.copy_(value)
        return loss_fn()

    try:
        return finite_diff_grad_check(f, saved, grad, eps=eps, indices=indices)
    finally:
        with torch.no_grad():
            param.copy_(saved)

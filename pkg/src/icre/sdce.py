"""Semantic distillation cascade: cross-attention then self-attention over spatial tokens."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "to_tokens",
    "from_tokens",
    "attention_weights",
    "multihead_attention",
    "QKVProjection",
    "JointInteractionBlock",
    "TransformerBlock",
    "SDCE",
]


def to_tokens(fmap: torch.Tensor) -> torch.Tensor:
    """``(N, C, H, W)`` -> ``(N, H*W, C)``, raster order over (H, W)."""
    return fmap.flatten(2).transpose(1, 2)


def from_tokens(tokens: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Inverse of :func:`to_tokens`."""
    n, t, c = tokens.shape
    h, w = hw
    if t != h * w:
        raise ValueError(f"{t} tokens cannot fill a {h}x{w} grid")
    return tokens.transpose(1, 2).reshape(n, c, h, w)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    n, t, c = x.shape
    return x.view(n, t, heads, c // heads).transpose(1, 2)


def attention_weights(q: torch.Tensor, k: torch.Tensor, heads: int) -> torch.Tensor:
    """Per-head softmax(QK^T / sqrt(C / heads)), shape ``(N, heads, T_q, T_k)``."""
    c = q.shape[-1]
    if c % heads:
        raise ValueError(f"channel width {c} is not divisible by {heads} heads")
    qh, kh = _split_heads(q, heads), _split_heads(k, heads)
    logits = qh @ kh.transpose(-2, -1) / math.sqrt(c // heads)
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite attention logits")
    return logits.softmax(dim=-1)


def multihead_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ValueError("Q, K, V shapes are inconsistent")
    attn = attention_weights(q, k, heads)
    out = attn @ _split_heads(v, heads)
    return out.transpose(1, 2).reshape(q.shape)


class QKVProjection(nn.Module):
    """Linear projections, each followed by its own LayerNorm."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_q = nn.Linear(dim, dim)
        self.w_k = nn.Linear(dim, dim)
        self.w_v = nn.Linear(dim, dim)
        self.ln_q = nn.LayerNorm(dim)
        self.ln_k = nn.LayerNorm(dim)
        self.ln_v = nn.LayerNorm(dim)

    def forward(self, query_tokens: torch.Tensor, context_tokens: torch.Tensor):
        if query_tokens.shape[-1] != self.w_q.in_features or context_tokens.shape[-1] != self.w_k.in_features:
            raise ValueError("token width does not match the projection width")
        q = self.ln_q(self.w_q(query_tokens))
        k = self.ln_k(self.w_k(context_tokens))
        v = self.ln_v(self.w_v(context_tokens))
        return q, k, v


class JointInteractionBlock(nn.Module):
    """Feed-forward branch gated by a depthwise-conv spatial weight, with residual.

    ``gate=False`` drops the depthwise branch and leaves a plain
    FC -> GELU -> FC feed-forward.
    """

    def __init__(self, dim: int, hidden: int | None = None, gate: bool = True):
        super().__init__()
        hidden = hidden or 2 * dim
        self.gate = gate
        self.fc1 = nn.Linear(dim, hidden) if gate else None
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden) if gate else None
        self.fc2 = nn.Linear(dim, hidden)
        self.fc3 = nn.Linear(hidden, dim)

    def spatial_weight(self, tokens: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
        grid = from_tokens(self.fc1(tokens), hw)
        return to_tokens(self.dwconv(grid))

    def forward(self, tokens: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
        hidden = self.fc2(tokens)
        if self.gate:
            weight = self.spatial_weight(tokens, hw)
            if weight.shape != hidden.shape:
                raise ValueError("gate and feed-forward branches disagree in shape")
            hidden = hidden * weight
        return self.fc3(F.gelu(hidden)) + tokens


class TransformerBlock(nn.Module):
    """Q from one token set, K/V from another, optional per-channel modulation."""

    def __init__(self, dim: int, heads: int, modulate: bool, gate: bool = True, hidden: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"channel width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = QKVProjection(dim)
        self.beta = nn.Parameter(torch.ones(dim)) if modulate else None
        self.norm = nn.LayerNorm(dim)
        self.jib = JointInteractionBlock(dim, hidden, gate=gate)

    def attend(self, q, k, v):
        a = multihead_attention(q, k, v, self.heads)
        if self.beta is not None:
            a = self.beta * a
        return self.norm(a + v)

    def forward(self, query_tokens, context_tokens, hw):
        q, k, v = self.qkv(query_tokens, context_tokens)
        return self.jib(self.attend(q, k, v), hw)


class SDCE(nn.Module):
    """Cross-attention block (queries from ``f_h``, keys/values from the fused map)
    cascaded into a self-attention block. Output has the shape of ``f_h``."""

    def __init__(
        self,
        dim: int,
        heads: int = 4,
        hidden: int | None = None,
        self_block: bool = True,
        jib: bool = True,
        beta_cross: bool = True,
        beta_self: bool = False,
    ):
        super().__init__()
        self.cross = TransformerBlock(dim, heads, modulate=beta_cross, gate=jib, hidden=hidden)
        self.self_attn = TransformerBlock(dim, heads, modulate=beta_self, gate=jib, hidden=hidden) if self_block else None

    def forward(self, f_h: torch.Tensor, f_fused: torch.Tensor) -> torch.Tensor:
        if f_h.shape != f_fused.shape:
            raise ValueError(f"f_h {tuple(f_h.shape)} and fused map {tuple(f_fused.shape)} differ in shape")
        hw = tuple(f_h.shape[-2:])
        t = self.cross(to_tokens(f_h), to_tokens(f_fused), hw)
        if self.self_attn is not None:
            t = self.self_attn(t, t, hw)
        return from_tokens(t, hw)

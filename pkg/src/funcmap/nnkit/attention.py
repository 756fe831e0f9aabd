"""Masked multi-head attention and pre-LN transformer blocks."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def attention(q, k, v, key_valid=None, fused: bool = True):
    """softmax(q k^T / sqrt(d_h)) v over the last two dims.

    q: (..., Tq, dh); k, v: (..., Tk, dh); key_valid: bool, broadcastable to
    (..., Tk) with True marking real keys. Masked keys get exactly zero weight.
    ``fused`` dispatches to torch's scaled_dot_product_attention kernel, which
    avoids materializing the score tensor; ``fused=False`` is the explicit
    reference computation.
    """
    mask = None
    if key_valid is not None:
        mask = key_valid.unsqueeze(-2)
        if not bool(mask.any(dim=-1).all()):
            raise ValueError("every key is masked for some query; softmax undefined")
    if fused:
        return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    w = torch.softmax(scores, dim=-1)
    return w @ v


class MultiHeadAttention(nn.Module):
    """Concat_h[Attn(X W_i^Q, Y W_i^K, Y W_i^V)] W^O."""

    def __init__(self, d: int, h: int, dropout: float = 0.0):
        super().__init__()
        if d % h:
            raise ValueError(f"model width {d} is not divisible by {h} heads")
        self.d, self.h = d, h
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def _heads(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.h, self.d // self.h).transpose(1, 2)

    def forward(self, x, kv=None, key_valid=None):
        kv = x if kv is None else kv
        q, k, v = self._heads(self.q(x)), self._heads(self.k(kv)), self._heads(self.v(kv))
        kvm = None if key_valid is None else key_valid[:, None, :]
        out = attention(q, k, v, kvm)
        b, _, t, _ = out.shape
        return self.drop(self.o(out.transpose(1, 2).reshape(b, t, self.d)))


class FeedForward(nn.Module):
    def __init__(self, d: int, ff: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d, ff)
        self.fc2 = nn.Linear(ff, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(F.gelu(self.fc1(x)))))


class EncoderBlock(nn.Module):
    def __init__(self, d, h, ff, dropout):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, h, dropout)
        self.ln2 = nn.LayerNorm(d)
        self.ff = FeedForward(d, ff, dropout)

    def forward(self, x, valid):
        x = x + self.attn(self.ln1(x), key_valid=valid)
        return x + self.ff(self.ln2(x))


class DecoderBlock(nn.Module):
    def __init__(self, d, h, ff, dropout):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, h, dropout)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, h, dropout)
        self.ln3 = nn.LayerNorm(d)
        self.ff = FeedForward(d, ff, dropout)

    def forward(self, q, q_valid, memory, mem_valid):
        q = q + self.self_attn(self.ln1(q), key_valid=q_valid)
        q = q + self.cross_attn(self.ln2(q), kv=memory, key_valid=mem_valid)
        return q + self.ff(self.ln3(q))

"""Small attention building blocks shared by the decoder and classifiers.

Written out by hand (rather than ``nn.MultiheadAttention``) so that masking
semantics are explicit: a query whose keys are all masked receives a zero
attention output instead of NaN, and there is no fast path whose numerics
differ between train and eval mode.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        # no value bias: an all-masked row then equals attending over zero features
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim)

    def forward(self, query, key, value, mask=None):
        """``mask`` is bool, True = blocked; shape (B, S) or (B, Nq, S)."""
        b, nq, d = query.shape
        s = key.shape[1]
        h = self.heads
        q = self.q(query).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k(key).view(b, s, h, d // h).transpose(1, 2)
        v = self.v(value).view(b, s, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            if mask.dim() == 2:
                mask = mask[:, None, None, :]
            else:
                mask = mask[:, None]
            scores = scores.masked_fill(mask, float("-inf"))
            blocked = mask.all(-1, keepdim=True)
            scores = scores.masked_fill(blocked, 0.0)
            attn = scores.softmax(-1).masked_fill(mask, 0.0)
        else:
            attn = scores.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block without positional encoding."""

    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden)

    def forward(self, x, key_mask=None):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, key_mask)
        return x + self.ffn(self.norm2(x))


def sine_position_encoding(dim: int, h: int, w: int, dtype=torch.float32):
    """Fixed 2D sine/cosine encoding, (h * w, dim)."""
    if dim % 4:
        raise ValueError("positional encoding dim must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    py = ys[:, None] * freqs[None]
    px = xs[:, None] * freqs[None]
    enc = torch.cat([
        torch.sin(py)[:, None, :].expand(h, w, quarter),
        torch.cos(py)[:, None, :].expand(h, w, quarter),
        torch.sin(px)[None, :, :].expand(h, w, quarter),
        torch.cos(px)[None, :, :].expand(h, w, quarter),
    ], dim=-1)
    return enc.reshape(h * w, dim).to(dtype)

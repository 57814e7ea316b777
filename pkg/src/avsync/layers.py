"""Transformer building blocks shared by the backbone and the SR head."""

import math

import torch
from torch import nn


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64, device=device)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64, device=device)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


def lengths_to_pad_mask(lengths, max_len: int, device=None) -> torch.Tensor:
    """Boolean (B, max_len) mask, True at padded positions."""
    lengths = torch.as_tensor(lengths, device=device)
    return torch.arange(max_len, device=device)[None, :] >= lengths[:, None]


def causal_mask(size: int, device=None) -> torch.Tensor:
    return torch.triu(torch.ones(size, size, dtype=torch.bool, device=device), diagonal=1)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(dropout), nn.Linear(hidden, dim))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None):
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.drop(h)
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderBlock(nn.Module):
    """Pre-norm causal self-attention, cross-attention to memory, feed-forward."""

    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0, ff_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, num_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, num_heads, dropout=dropout, batch_first=True)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, y, memory, memory_pad_mask=None, tgt_pad_mask=None):
        h = self.norm1(y)
        h, _ = self.self_attn(
            h, h, h, attn_mask=causal_mask(y.shape[1], y.device), key_padding_mask=tgt_pad_mask,
            need_weights=False,
        )
        y = y + self.drop(h)
        h, _ = self.cross_attn(
            self.norm2(y), memory, memory, key_padding_mask=memory_pad_mask, need_weights=False
        )
        y = y + self.drop(h)
        return y + self.drop(self.ff(self.norm3(y)))


def scaled_init_(module: nn.Module, gain: float = 1.0) -> None:
    """Fan-in scaled normal init for linear and conv weights; zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d, nn.Conv2d, nn.Conv3d)):
            fan_in = m.weight[0].numel()
            nn.init.normal_(m.weight, std=gain / math.sqrt(fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)

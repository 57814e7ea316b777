"""Representation backbone: audio conv encoder, 3D-CNN lip encoder and a
shared transformer context encoder with A / V / AV input modes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ModeError, ShapeError
from .layers import EncoderBlock, lengths_to_pad_mask, scaled_init_, sinusoidal_positions

MODES = ("A", "V", "AV")


@dataclass(frozen=True)
class BackboneConfig:
    feat_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    mel_bins: int = 80
    dropout: float = 0.1
    audio_channels: Tuple[int, int] = (32, 64)
    video_channels: Tuple[int, int] = (16, 32)

    def validate(self) -> "BackboneConfig":
        if self.feat_dim % self.num_heads:
            raise ConfigError(f"feat_dim {self.feat_dim} not divisible by num_heads {self.num_heads}")
        if self.mel_bins < 1 or self.num_blocks < 0:
            raise ConfigError("bad backbone config")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        for k in ("audio_channels", "video_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["audio_channels"] = list(self.audio_channels)
        d["video_channels"] = list(self.video_channels)
        return d


class AudioEncoder(nn.Module):
    """Two stride-2 3x3 convolutions with GELU; time 4T -> T, bins B -> ceil(B/4)."""

    def __init__(self, mel_bins: int, dim: int, channels=(32, 64)):
        super().__init__()
        c1, c2 = channels
        self.conv1 = nn.Conv2d(1, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        reduced = math.ceil(math.ceil(mel_bins / 2) / 2)
        self.proj = nn.Linear(c2 * reduced, dim)

    def forward(self, log_mel: torch.Tensor) -> torch.Tensor:
        squeeze = log_mel.dim() == 2
        if squeeze:
            log_mel = log_mel[None]
        if log_mel.shape[1] % 4:
            raise ShapeError(f"mel row count {log_mel.shape[1]} is not divisible by 4")
        x = F.gelu(self.conv1(log_mel[:, None]))
        x = F.gelu(self.conv2(x))  # (B, C, T, bins')
        b, c, t, f = x.shape
        x = self.proj(x.permute(0, 2, 1, 3).reshape(b, t, c * f))
        return x[0] if squeeze else x


class ResBlock2d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1, stride=stride) if (cin != cout or stride != 1) else None

    def forward(self, x):
        h = self.conv2(F.relu(self.conv1(x)))
        s = x if self.skip is None else self.skip(x)
        return F.relu(h + s)


def standardize_frames(frames: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Zero-mean, unit-variance per frame. All-zero (padding) frames stay zero."""
    mean = frames.mean(dim=(-2, -1), keepdim=True)
    var = frames.var(dim=(-2, -1), unbiased=False, keepdim=True)
    return (frames - mean) / torch.sqrt(var + eps)


class VideoEncoder(nn.Module):
    """Per-frame standardization, 3D conv stem (temporal kernel 5, stride 1) then per-frame residual 2D trunk and global average pooling."""

    def __init__(self, dim: int, channels=(16, 32)):
        super().__init__()
        c1, c2 = channels
        self.stem = nn.Conv3d(1, c1, kernel_size=(5, 3, 3), stride=(1, 2, 2), padding=(2, 1, 1))
        self.block1 = ResBlock2d(c1, c1)
        self.block2 = ResBlock2d(c1, c2, stride=2)
        self.proj = nn.Linear(c2, dim)

    def stem_features(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W) -> (B, C, T, H', W')."""
        return F.relu(self.stem(standardize_frames(frames)[:, None]))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        squeeze = frames.dim() == 3
        if squeeze:
            frames = frames[None]
        if frames.dim() != 4 or frames.shape[1] < 1:
            raise ShapeError(f"expected (T, H, W) or (B, T, H, W) frames, got {tuple(frames.shape)}")
        x = self.stem_features(frames)
        b, c, t, h, w = x.shape
        x = x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
        x = self.block2(self.block1(x)).mean(dim=(2, 3))
        x = self.proj(x).reshape(b, t, -1)
        return x[0] if squeeze else x


class ContextEncoder(nn.Module):
    def __init__(self, dim: int, num_blocks: int, num_heads: int, dropout: float):
        super().__init__()
        self.fusion = nn.Linear(2 * dim, dim)
        self.blocks = nn.ModuleList(EncoderBlock(dim, num_heads, dropout) for _ in range(num_blocks))
        self.norm = nn.LayerNorm(dim)

    def forward(self, f_a=None, f_v=None, mode: str = "AV", pad_mask=None):
        if mode not in MODES:
            raise ModeError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode in ("A", "AV") and f_a is None:
            raise ModeError(f"mode {mode} requires audio features")
        if mode in ("V", "AV") and f_v is None:
            raise ModeError(f"mode {mode} requires visual features")
        if mode == "A":
            x = f_a
        elif mode == "V":
            x = f_v
        else:
            if f_a.shape[:-1] != f_v.shape[:-1]:
                raise ShapeError(f"audio/visual length mismatch: {tuple(f_a.shape)} vs {tuple(f_v.shape)}")
            x = self.fusion(torch.cat([f_a, f_v], dim=-1))
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype, x.device)
        for blk in self.blocks:
            x = blk(x, pad_mask)
        x = self.norm(x)
        return x[0] if squeeze else x


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        d = cfg.feat_dim
        self.audio_encoder = AudioEncoder(cfg.mel_bins, d, cfg.audio_channels)
        self.video_encoder = VideoEncoder(d, cfg.video_channels)
        self.context = ContextEncoder(d, cfg.num_blocks, cfg.num_heads, cfg.dropout)
        scaled_init_(self)

    def encode_audio(self, log_mel: torch.Tensor) -> torch.Tensor:
        return self.audio_encoder(log_mel)

    def encode_video(self, frames: torch.Tensor) -> torch.Tensor:
        return self.video_encoder(frames)

    def encode_context(self, f_a=None, f_v=None, mode: str = "AV", pad_mask=None) -> torch.Tensor:
        return self.context(f_a, f_v, mode, pad_mask)

    def forward(
        self,
        log_mel: Optional[torch.Tensor],
        video: Optional[torch.Tensor],
        mode: str,
        lengths=None,
    ) -> torch.Tensor:
        """Batched (B, 4T, bins) / (B, T, H, W) inputs -> (B, T, D) context features."""
        if mode not in MODES:
            raise ModeError(f"unknown mode {mode!r}")
        f_a = self.encode_audio(log_mel) if mode in ("A", "AV") else None
        f_v = self.encode_video(video) if mode in ("V", "AV") else None
        ref = f_a if f_a is not None else f_v
        pad_mask = None
        if lengths is not None and ref.dim() == 3:
            pad_mask = lengths_to_pad_mask(lengths, ref.shape[1], ref.device)
        return self.encode_context(f_a, f_v, mode, pad_mask)

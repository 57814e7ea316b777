"""Feature adaptation between the 25 fps backbone and the 50 fps SR head.

``DeltaUpsampler`` doubles the frame rate from temporal differences,
``GatedFFN`` is the residual gated feed-forward ``x + sigmoid(h) * h`` with
``h = FFN(x)``, and ``FeatureAdapter`` chains upsampling, projection,
multi-head attention (self, or cross with an audio query) and the FFN.

Every residual branch is zero-initialised, so a fresh adapter is exactly a
repetition upsample followed by the input projection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, ModeError, ShapeError
from .layers import lengths_to_pad_mask, scaled_init_

# Ablation arms for the adapter (upsampler, ffn kind, attention on/off).
ARMS = {
    "none": dict(upsampler="repeat", ffn="none", use_attention=False),
    "ffn_mha": dict(upsampler="delta", ffn="plain", use_attention=True),
    "gateffn_mha_norep": dict(upsampler="repeat", ffn="gated", use_attention=True),
    "full": dict(upsampler="delta", ffn="gated", use_attention=True),
}


@dataclass(frozen=True)
class AdapterConfig:
    in_dim: int = 64
    out_dim: int = 64
    num_heads: int = 4
    hidden_mult: float = 4.0
    attention_mode: str = "self"
    upsampler: str = "delta"
    ffn: str = "gated"
    use_attention: bool = True

    def validate(self) -> "AdapterConfig":
        if self.out_dim % self.num_heads:
            raise ConfigError(f"out_dim {self.out_dim} not divisible by num_heads {self.num_heads}")
        if self.attention_mode not in ("self", "cross"):
            raise ConfigError(f"attention_mode must be 'self' or 'cross', got {self.attention_mode!r}")
        if self.upsampler not in ("delta", "repeat"):
            raise ConfigError(f"upsampler must be 'delta' or 'repeat', got {self.upsampler!r}")
        if self.ffn not in ("gated", "plain", "none"):
            raise ConfigError(f"ffn must be 'gated', 'plain' or 'none', got {self.ffn!r}")
        if self.attention_mode == "cross" and not self.use_attention:
            raise ConfigError("cross attention mode needs use_attention")
        if self.hidden_mult <= 0:
            raise ConfigError("hidden_mult must be positive")
        return self

    def with_arm(self, arm: str) -> "AdapterConfig":
        if arm not in ARMS:
            raise ConfigError(f"unknown adapter arm {arm!r}; expected one of {sorted(ARMS)}")
        return replace(self, **ARMS[arm]).validate()

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def repeat_upsample(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour doubling along time: [a, b] -> [a, a, b, b]."""
    return x.repeat_interleave(2, dim=-2)


class DeltaUpsampler(nn.Module):
    """Interleave even/odd frames built from a depthwise temporal difference.

    E_t = F_t + P_e(delta_t), O_t = F_t + P_o(delta_t), output [E_1, O_1, E_2, O_2, ...].
    """

    def __init__(self, dim: int):
        super().__init__()
        self.delta = nn.Conv1d(dim, dim, kernel_size=3, padding=1, groups=dim, bias=False)
        self.proj_even = nn.Linear(dim, dim)
        self.proj_odd = nn.Linear(dim, dim)
        with torch.no_grad():
            self.delta.weight.copy_(torch.tensor([-0.5, 0.0, 0.5]).expand_as(self.delta.weight))
        for lin in (self.proj_even, self.proj_odd):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        if x.shape[1] < 1:
            raise ShapeError("need at least one frame")
        d = self.delta(x.transpose(1, 2)).transpose(1, 2)
        even = x + self.proj_even(d)
        odd = x + self.proj_odd(d)
        out = torch.stack([even, odd], dim=2).reshape(x.shape[0], 2 * x.shape[1], x.shape[2])
        return out[0] if squeeze else out


class GatedFFN(nn.Module):
    """Residual feed-forward; ``gated=False`` gives the plain ``x + FFN(x)`` variant."""

    def __init__(self, dim: int, hidden_mult: float = 4.0, gated: bool = True):
        super().__init__()
        hidden = max(1, int(round(hidden_mult * dim)))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.gated = gated
        scaled_init_(self.fc1)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        h = self.fc2(F.gelu(self.fc1(x)))
        if self.gated:
            return x + torch.sigmoid(h) * h
        return x + h


class FeatureAdapter(nn.Module):
    def __init__(self, cfg: AdapterConfig = AdapterConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        self.upsampler = DeltaUpsampler(cfg.in_dim) if cfg.upsampler == "delta" else None
        self.in_proj = nn.Linear(cfg.in_dim, cfg.out_dim)
        scaled_init_(self.in_proj)
        if cfg.use_attention:
            self.norm_q = nn.LayerNorm(cfg.out_dim)
            self.norm_kv = nn.LayerNorm(cfg.out_dim) if cfg.attention_mode == "cross" else None
            self.attn = nn.MultiheadAttention(cfg.out_dim, cfg.num_heads, batch_first=True)
            nn.init.zeros_(self.attn.out_proj.weight)
            nn.init.zeros_(self.attn.out_proj.bias)
        else:
            self.attn = None
        self.ffn = None if cfg.ffn == "none" else GatedFFN(cfg.out_dim, cfg.hidden_mult, gated=cfg.ffn == "gated")

    def upsample(self, x: torch.Tensor) -> torch.Tensor:
        return repeat_upsample(x) if self.upsampler is None else self.upsampler(x)

    def adapt_features(self, x_up: torch.Tensor, audio_query=None, pad_mask=None) -> torch.Tensor:
        """Projection, attention with residual, then the FFN. (B, 2T, in_dim) -> (B, 2T, out_dim)."""
        squeeze = x_up.dim() == 2
        if squeeze:
            x_up = x_up[None]
            if audio_query is not None and audio_query.dim() == 2:
                audio_query = audio_query[None]
        x = self.in_proj(x_up)
        if self.attn is not None:
            if self.cfg.attention_mode == "cross":
                if audio_query is None:
                    raise ModeError("cross attention mode requires an audio query")
                if audio_query.shape[:2] != x.shape[:2]:
                    raise ShapeError(
                        f"audio query length {tuple(audio_query.shape[:2])} != visual length {tuple(x.shape[:2])}"
                    )
                q = self.norm_q(audio_query)
                kv = self.norm_kv(x)
                h, _ = self.attn(q, kv, kv, key_padding_mask=pad_mask, need_weights=False)
                x = audio_query + h
            else:
                h = self.norm_q(x)
                h, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
                x = x + h
        if self.ffn is not None:
            x = self.ffn(x)
        return x[0] if squeeze else x

    def forward(self, feats: torch.Tensor, lengths=None, audio_query=None) -> torch.Tensor:
        """(B, T, in_dim) backbone features -> (B, 2T, out_dim)."""
        pad_mask = None
        if lengths is not None and feats.dim() == 3:
            valid = ~lengths_to_pad_mask(lengths, feats.shape[1], feats.device)
            # padded frames must be zero so the difference conv sees the same borders as an unpadded run
            feats = feats * valid[..., None].to(feats.dtype)
            pad_mask = lengths_to_pad_mask(2 * torch.as_tensor(lengths), 2 * feats.shape[1], feats.device)
        return self.adapt_features(self.upsample(feats), audio_query, pad_mask)


def delta_upsample(feats: torch.Tensor, module: DeltaUpsampler = None) -> torch.Tensor:
    """Upsample T x D features to 2T x D (fresh zero-initialised module if none given)."""
    if module is None:
        module = DeltaUpsampler(feats.shape[-1]).to(feats.dtype)
    return module(feats)

"""Frame-wise audio-visual similarity, the sequence-level sync score and its BCE objective."""

from __future__ import annotations

from dataclasses import dataclass
import torch

from .errors import BatchError, ShapeError

NORM_EPS = 1e-8
LOG_EPS = 1e-7


@dataclass
class SyncScore:
    d_bar: torch.Tensor
    per_frame: torch.Tensor


def frame_cosines(f_a: torch.Tensor, f_v: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Cosine between matching frames, norms clamped below by ``eps``. (..., T, D) -> (..., T).

    The result is clamped to [-1, 1] to absorb rounding.
    """
    if f_a.shape != f_v.shape:
        raise ShapeError(f"feature shapes differ: {tuple(f_a.shape)} vs {tuple(f_v.shape)}")
    na = f_a.norm(dim=-1).clamp_min(eps)
    nv = f_v.norm(dim=-1).clamp_min(eps)
    return ((f_a * f_v).sum(-1) / (na * nv)).clamp(-1.0, 1.0)


def frame_similarity(f_a: torch.Tensor, f_v: torch.Tensor, eps: float = NORM_EPS, mask=None) -> SyncScore:
    """Temporal mean of ReLU-clamped frame cosines.

    Works on a single (T, D) pair or a batch (B, T, D); ``mask`` is a boolean
    (B, T) tensor that is True on valid frames.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    per_frame = torch.relu(frame_cosines(f_a, f_v, eps))
    if mask is None:
        d_bar = per_frame.mean(-1)
    else:
        m = mask.to(per_frame.dtype)
        per_frame = per_frame * m
        d_bar = per_frame.sum(-1) / m.sum(-1).clamp_min(1.0)
    return SyncScore(d_bar=d_bar, per_frame=per_frame)


def contrastive_loss(scores, labels, eps_log: float = LOG_EPS) -> torch.Tensor:
    """Mean binary cross-entropy between sync scores and alignment labels.

    ``scores`` may be a sequence of :class:`SyncScore`, a sequence of floats or
    a 1-D tensor of d_bar values.
    """
    if isinstance(scores, SyncScore):
        d = scores.d_bar.reshape(-1)
    elif isinstance(scores, torch.Tensor):
        d = scores.reshape(-1)
    else:
        scores = list(scores)
        if not scores:
            raise BatchError("empty batch")
        d = torch.stack([
            s.d_bar.reshape(()) if isinstance(s, SyncScore) else torch.as_tensor(s, dtype=torch.float64)
            for s in scores
        ])
    y = torch.as_tensor(labels, dtype=d.dtype, device=d.device).reshape(-1)
    if d.numel() == 0:
        raise BatchError("empty batch")
    if d.numel() != y.numel():
        raise BatchError(f"{d.numel()} scores but {y.numel()} labels")
    d = d.clamp(eps_log, 1.0 - eps_log)
    return -(y * torch.log(d) + (1.0 - y) * torch.log1p(-d)).mean()


def similarity_matrix(f_a: torch.Tensor, f_v: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Raw cosine between every audio frame (rows) and every video frame (columns)."""
    if f_a.shape[-1] != f_v.shape[-1]:
        raise ShapeError(f"feature widths differ: {f_a.shape[-1]} vs {f_v.shape[-1]}")
    a = f_a / f_a.norm(dim=-1, keepdim=True).clamp_min(eps)
    v = f_v / f_v.norm(dim=-1, keepdim=True).clamp_min(eps)
    return (a @ v.transpose(-1, -2)).clamp(-1.0, 1.0)


def shifted_overlap(f_a: torch.Tensor, f_v: torch.Tensor, shift: int):
    """Pair audio frame t with video frame t - shift over the overlapping range."""
    t_a, t_v = f_a.shape[0], f_v.shape[0]
    lo = max(0, shift)
    hi = min(t_a, t_v + shift)
    if hi - lo < 1:
        raise ShapeError(f"shift {shift} leaves no overlap")
    return f_a[lo:hi], f_v[lo - shift:hi - shift]


def offset_scores(f_a: torch.Tensor, f_v: torch.Tensor, max_shift: int, eps: float = NORM_EPS) -> dict:
    return {
        s: float(frame_similarity(*shifted_overlap(f_a, f_v, s), eps=eps).d_bar)
        for s in range(-max_shift, max_shift + 1)
    }


def best_offset(f_a: torch.Tensor, f_v: torch.Tensor, max_shift: int, eps: float = NORM_EPS, tol: float = 1e-12) -> int:
    """Shift ``s`` maximising the sync score of audio[t] against video[t - s].

    Ties (within ``tol``) prefer smaller ``|s|``, then negative ``s``.
    """
    if max_shift < 0:
        raise ShapeError("max_shift must be non-negative")
    if max_shift >= min(f_a.shape[0], f_v.shape[0]):
        raise ShapeError(f"max_shift {max_shift} must be shorter than the sequences")
    with torch.no_grad():
        scores = offset_scores(f_a, f_v, max_shift, eps)
    best = max(scores.values())
    candidates = [s for s, v in scores.items() if v >= best - tol]
    return min(candidates, key=lambda s: (abs(s), s))

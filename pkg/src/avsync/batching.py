"""Padding / collation of utterances into tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .corpus import AUDIO_PER_VIDEO, log_compress


@dataclass
class Batch:
    log_mel: torch.Tensor  # (B, 4T, bins), zero padded
    video: torch.Tensor  # (B, T, H, W), zero padded
    lengths: torch.Tensor  # (B,) valid video frames
    tokens: List[Tuple[int, ...]]

    def __len__(self):
        return len(self.tokens)


def collate(
    mels: Sequence[np.ndarray],
    videos: Sequence[np.ndarray],
    tokens: Optional[Sequence[Sequence[int]]] = None,
    dtype=torch.float32,
) -> Batch:
    """Pad linear-energy mels (log-compressed here) and videos to a common length."""
    lengths = [v.shape[0] for v in videos]
    t_max = max(lengths)
    bins = mels[0].shape[1]
    h, w = videos[0].shape[1:]
    log_mel = np.zeros((len(mels), AUDIO_PER_VIDEO * t_max, bins), dtype=np.float64)
    video = np.zeros((len(videos), t_max, h, w), dtype=np.float64)
    for i, (m, v) in enumerate(zip(mels, videos)):
        log_mel[i, : m.shape[0]] = log_compress(np.asarray(m, dtype=np.float64))
        video[i, : v.shape[0]] = v
    return Batch(
        log_mel=torch.from_numpy(log_mel).to(dtype),
        video=torch.from_numpy(video).to(dtype),
        lengths=torch.tensor(lengths, dtype=torch.long),
        tokens=[tuple(t) for t in tokens] if tokens is not None else [()] * len(mels),
    )


def collate_samples(samples, dtype=torch.float32) -> Batch:
    return collate([s.mel for s in samples], [s.video for s in samples], [s.tokens for s in samples], dtype)

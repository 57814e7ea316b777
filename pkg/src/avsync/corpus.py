"""Synthetic paired (mel, lip video, transcript) corpus.

Every content token renders deterministically in both modalities: a band of
mel bins energized over ``4 * frames_per_token`` audio frames, and a mouth
image whose aperture and width depend on the token. Speakers add a fixed
gain (audio) and brightness / position / width offset (video), so either
modality alone determines the transcript.

Mel spectrograms are kept in the linear energy domain; encoders see
``log_compress(mel)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ArtifactIOError,
    ConfigError,
    DegenerateInputError,
    MissingArtifactError,
    PairConstructionError,
    ShapeError,
)

logger = logging.getLogger(__name__)

AUDIO_PER_VIDEO = 4
SPLITS = ("train", "val", "test")
_SPEAKER_SALT = 918_273
_LOG_SCALE = 100.0


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 16
    frames_per_token: int = 2
    mel_bins: int = 80
    image_size: int = 16
    utterance_len_range: Tuple[int, int] = (4, 12)
    seed: int = 0
    num_speakers: int = 8
    num_utterances: int = 400
    split_fractions: Tuple[float, float, float] = (0.5, 0.25, 0.25)
    speaker_split: str = "shared"

    def validate(self) -> "CorpusConfig":
        lo, hi = self.utterance_len_range
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.frames_per_token < 1:
            raise ConfigError(f"frames_per_token must be >= 1, got {self.frames_per_token}")
        if self.mel_bins < 8:
            raise ConfigError(f"mel_bins must be >= 8, got {self.mel_bins}")
        if self.mel_bins < self.vocab_size:
            raise ConfigError("mel_bins must be >= vocab_size so every token owns a band")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad utterance_len_range {self.utterance_len_range}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.num_speakers < 1:
            raise ConfigError("num_speakers must be >= 1")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions):
            raise ConfigError(f"bad split_fractions {self.split_fractions}")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must sum to 1")
        if self.speaker_split not in ("shared", "disjoint"):
            raise ConfigError(f"speaker_split must be 'shared' or 'disjoint', got {self.speaker_split!r}")
        if self.speaker_split == "disjoint" and self.num_speakers < 3:
            raise ConfigError("disjoint speaker split needs at least 3 speakers")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown corpus config keys: {sorted(unknown)}")
        if "utterance_len_range" in d:
            d["utterance_len_range"] = tuple(d["utterance_len_range"])
        if "split_fractions" in d:
            sf = d["split_fractions"]
            if isinstance(sf, dict):
                sf = [sf.get(s, 0.0) for s in SPLITS]
            d["split_fractions"] = tuple(float(x) for x in sf)
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["utterance_len_range"] = list(self.utterance_len_range)
        d["split_fractions"] = list(self.split_fractions)
        return d


@dataclass
class UtteranceSample:
    tokens: Tuple[int, ...]
    mel: np.ndarray
    video: np.ndarray
    speaker_id: int
    utt_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.video.shape[0]


@dataclass(frozen=True)
class SpeakerTraits:
    gain: float
    brightness: float
    dx: int
    dy: int
    width_scale: float


def speaker_traits(speaker_id: int) -> SpeakerTraits:
    # keyed by id only, so a speaker looks and sounds the same in every corpus
    rng = np.random.default_rng([_SPEAKER_SALT, speaker_id])
    return SpeakerTraits(
        gain=float(rng.uniform(0.7, 1.3)),
        brightness=float(rng.uniform(0.55, 0.9)),
        dx=int(rng.integers(-1, 2)),
        dy=int(rng.integers(-1, 2)),
        width_scale=float(rng.uniform(0.9, 1.1)),
    )


def token_symbol(k: int) -> str:
    if k < 26:
        return chr(ord("a") + k)
    return f"t{k}"


def tokens_to_string(tokens: Sequence[int]) -> str:
    return " ".join(token_symbol(int(k)) for k in tokens)


def tokens_from_string(s: str) -> Tuple[int, ...]:
    out = []
    for sym in s.split():
        out.append(int(sym[1:]) if sym.startswith("t") and len(sym) > 1 else ord(sym) - ord("a"))
    return tuple(out)


def _envelope(n: int) -> np.ndarray:
    j = np.arange(n)
    return 0.5 + 0.5 * np.sin(np.pi * (j + 0.5) / n)


def mel_template(config: CorpusConfig, token: int, speaker_id: int) -> np.ndarray:
    """Linear-energy mel block (4 * frames_per_token, mel_bins) for one token."""
    n = AUDIO_PER_VIDEO * config.frames_per_token
    band = config.mel_bins // config.vocab_size
    block = np.zeros((n, config.mel_bins), dtype=np.float64)
    block[:, token * band:(token + 1) * band] = _envelope(n)[:, None]
    return block * speaker_traits(speaker_id).gain


def mouth_image(config: CorpusConfig, token: int, speaker_id: int, opening: float = 1.0) -> np.ndarray:
    """Grayscale mouth-ROI image in [0, 1]; ``opening`` scales the aperture."""
    tr = speaker_traits(speaker_id)
    size = config.image_size
    scale = size / 16.0
    n_w = math.ceil(math.sqrt(config.vocab_size))
    n_a = math.ceil(config.vocab_size / n_w)
    wi, ai = token % n_w, token // n_w
    half_w = (2.5 + 3.5 * wi / max(n_w - 1, 1)) * scale * tr.width_scale
    half_a = (0.7 + 2.8 * ai / max(n_a - 1, 1)) * scale * opening
    cx = (size - 1) / 2.0 + tr.dx
    cy = (size - 1) / 2.0 + tr.dy
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    d = ((x - cx) / half_w) ** 2 + ((y - cy) / half_a) ** 2
    inside = 1.0 / (1.0 + np.exp(np.clip(-6.0 * (1.0 - d), -50.0, 50.0)))
    return np.clip(tr.brightness * (1.0 - 0.8 * inside), 0.0, 1.0)


def video_template(config: CorpusConfig, token: int, speaker_id: int) -> np.ndarray:
    """(frames_per_token, H, W) clip; the mouth opens over the token so repeats stay countable."""
    fpt = config.frames_per_token
    return np.stack([
        mouth_image(config, token, speaker_id, opening=0.75 + 0.25 * (j + 1) / fpt) for j in range(fpt)
    ])


def render(config: CorpusConfig, tokens: Sequence[int], speaker_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """Render (mel, video) for a token sequence. Pure function of its arguments."""
    mel = np.concatenate([mel_template(config, k, speaker_id) for k in tokens], axis=0)
    video = np.concatenate([video_template(config, k, speaker_id) for k in tokens], axis=0)
    return mel.astype(np.float32), video.astype(np.float32)


def gen_utterance(
    config: CorpusConfig,
    speaker_id: int,
    rng_state: int,
    tokens: Optional[Sequence[int]] = None,
    utt_id: str = "",
) -> UtteranceSample:
    """Generate one utterance.

    Token count and identities are drawn from a generator seeded by
    ``(config.seed, speaker_id, rng_state)`` unless ``tokens`` is given.
    """
    config.validate()
    if speaker_id < 0:
        raise ConfigError(f"speaker_id must be >= 0, got {speaker_id}")
    if tokens is None:
        rng = np.random.default_rng([config.seed, speaker_id, int(rng_state)])
        lo, hi = config.utterance_len_range
        n = int(rng.integers(lo, hi + 1))
        tokens = rng.integers(0, config.vocab_size, size=n)
    tokens = tuple(int(k) for k in tokens)
    if not tokens or min(tokens) < 0 or max(tokens) >= config.vocab_size:
        raise ConfigError(f"tokens out of range for vocab_size {config.vocab_size}: {tokens}")
    mel, video = render(config, tokens, speaker_id)
    return UtteranceSample(tokens=tokens, mel=mel, video=video, speaker_id=speaker_id, utt_id=utt_id)


def _nearest(segments: np.ndarray, templates: np.ndarray) -> List[int]:
    flat_s = segments.reshape(len(segments), -1).astype(np.float64)
    flat_t = templates.reshape(len(templates), -1)
    dist = ((flat_s[:, None, :] - flat_t[None, :, :]) ** 2).sum(-1)
    return [int(i) for i in dist.argmin(1)]


def decode_mel_tokens(mel: np.ndarray, config: CorpusConfig, speaker_id: int) -> List[int]:
    """Nearest-template token decoding from a (clean) mel spectrogram."""
    n = AUDIO_PER_VIDEO * config.frames_per_token
    if mel.shape[0] % n:
        raise ShapeError(f"mel rows {mel.shape[0]} not a multiple of {n}")
    templates = np.stack([mel_template(config, k, speaker_id) for k in range(config.vocab_size)])
    return _nearest(mel.reshape(-1, n, mel.shape[1]), templates)


def decode_video_tokens(video: np.ndarray, config: CorpusConfig, speaker_id: int) -> List[int]:
    """Nearest-template token decoding from a lip clip."""
    fpt = config.frames_per_token
    if video.shape[0] % fpt:
        raise ShapeError(f"video frames {video.shape[0]} not a multiple of {fpt}")
    templates = np.stack([video_template(config, k, speaker_id) for k in range(config.vocab_size)])
    return _nearest(video.reshape(-1, fpt, *video.shape[1:]), templates)


def log_compress(mel):
    """Map linear mel energy to the log domain seen by encoders (0 stays 0)."""
    if isinstance(mel, np.ndarray):
        return np.log1p(_LOG_SCALE * mel)
    import torch

    return torch.log1p(_LOG_SCALE * mel)


# --------------------------------------------------------------------------- noise


def fit_noise(noise: np.ndarray, rows: int) -> np.ndarray:
    """Tile or crop ``noise`` along time to exactly ``rows`` frames."""
    reps = -(-rows // noise.shape[0])
    return np.tile(noise, (reps, 1))[:rows]


def energy(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def mix_noise(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    """Add ``noise`` to ``clean`` at the requested SNR (linear energy domain).

    ``snr_db = inf`` returns a copy of ``clean``. The result is float64.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return clean.copy()
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ShapeError(f"clean {clean.shape} and noise {noise.shape} differ; fit the noise first")
    e_clean = energy(clean)
    e_noise = energy(noise)
    if e_clean == 0.0:
        raise DegenerateInputError("clean input has zero energy")
    if e_noise == 0.0:
        raise DegenerateInputError("noise has zero energy but a finite SNR was requested")
    gain = math.sqrt(e_clean / (e_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


def measured_snr_db(clean: np.ndarray, mixture: np.ndarray) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    return 10.0 * math.log10(energy(clean) / energy(np.asarray(mixture, dtype=np.float64) - clean))


# --------------------------------------------------------------------------- pairs


@dataclass(frozen=True)
class SyncPair:
    """Audio of ``samples[audio_index]`` against video of ``samples[video_index]``.

    ``length`` is in video frames; ``shift`` is the circular video shift.
    """

    audio_index: int
    video_index: int
    label: int
    provenance: str
    length: int
    shift: int = 0

    def materialize(self, samples: Sequence[UtteranceSample]) -> Tuple[np.ndarray, np.ndarray]:
        mel = samples[self.audio_index].mel[: AUDIO_PER_VIDEO * self.length]
        video = samples[self.video_index].video
        if self.shift:
            video = np.roll(video, self.shift, axis=0)
        return mel, video[: self.length]


def make_pairs(
    samples: Sequence[UtteranceSample],
    negative_fraction: float,
    min_shift: int,
    rng_state,
) -> List[SyncPair]:
    """One pair per sample; ``floor(negative_fraction * N)`` of them negative.

    Negatives are split evenly between same-utterance circular video shifts
    and audio/video drawn from two different utterances (different speakers
    when possible), cropped to the shorter length.
    """
    n = len(samples)
    if n == 0:
        raise PairConstructionError("no samples to pair")
    if not 0.0 <= negative_fraction <= 1.0:
        raise PairConstructionError(f"negative_fraction must be in [0, 1], got {negative_fraction}")
    if min_shift < 1:
        raise PairConstructionError(f"min_shift must be >= 1, got {min_shift}")
    rng = rng_state if isinstance(rng_state, np.random.Generator) else np.random.default_rng(rng_state)

    n_neg = int(math.floor(negative_fraction * n + 1e-12))
    order = rng.permutation(n)
    neg_idx = order[:n_neg]
    n_cross = n_neg // 2
    kinds = {int(i): ("cross" if r < n_cross else "shifted") for r, i in enumerate(neg_idx)}

    pairs = []
    for i, s in enumerate(samples):
        T = s.num_frames
        kind = kinds.get(i)
        if kind is None:
            pairs.append(SyncPair(i, i, 1, "aligned", T))
            continue
        can_shift = T > 2 * min_shift
        if kind == "shifted" and not can_shift:
            kind = "cross"
        if kind == "cross" and n < 2:
            if not can_shift:
                raise PairConstructionError(
                    f"cannot build a negative for sample {i}: single sample and T={T} <= 2*min_shift"
                )
            kind = "shifted"
        if kind == "shifted":
            shift = int(rng.integers(min_shift, T - min_shift + 1))
            pairs.append(SyncPair(i, i, 0, "shifted", T, shift))
        else:
            others = [j for j in range(n) if j != i and samples[j].speaker_id != s.speaker_id]
            if not others:
                others = [j for j in range(n) if j != i]
            j = int(others[int(rng.integers(len(others)))])
            pairs.append(SyncPair(i, j, 0, "cross-speaker", min(T, samples[j].num_frames)))
    return pairs


# --------------------------------------------------------------------------- corpus on disk

_MAGIC = b"AVARR1\n"


def write_array(path, arr: np.ndarray) -> None:
    """Flat binary array: magic line, one JSON header line {dtype, shape}, raw little-endian bytes."""
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    header = json.dumps({"dtype": dt.str, "shape": list(arr.shape)}, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(header)
        f.write(arr.astype(dt, copy=False).tobytes(order="C"))


def read_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline() != _MAGIC:
            raise ArtifactIOError(f"{path}: not an array file")
        header = json.loads(f.readline())
        data = f.read()
    return np.frombuffer(data, dtype=np.dtype(header["dtype"])).reshape(header["shape"]).copy()


def split_sizes(config: CorpusConfig) -> Dict[str, int]:
    n = config.num_utterances
    val = int(math.floor(config.split_fractions[1] * n + 1e-9))
    test = int(math.floor(config.split_fractions[2] * n + 1e-9))
    return {"train": n - val - test, "val": val, "test": test}


def _split_speakers(config: CorpusConfig) -> Dict[str, List[int]]:
    speakers = list(range(config.num_speakers))
    if config.speaker_split == "shared":
        return {s: speakers for s in SPLITS}
    k = config.num_speakers
    n_val = max(1, int(round(config.split_fractions[1] * k)))
    n_test = max(1, int(round(config.split_fractions[2] * k)))
    n_train = k - n_val - n_test
    if n_train < 1:
        raise ConfigError("not enough speakers for a disjoint split")
    return {
        "train": speakers[:n_train],
        "val": speakers[n_train:n_train + n_val],
        "test": speakers[n_train + n_val:],
    }


def build_corpus(config: CorpusConfig) -> Dict[str, List[UtteranceSample]]:
    """Generate all splits in memory. Utterance ids are globally unique."""
    config.validate()
    sizes = split_sizes(config)
    speakers = _split_speakers(config)
    rng = np.random.default_rng([config.seed, 7])
    out: Dict[str, List[UtteranceSample]] = {}
    g = 0
    for split in SPLITS:
        samples = []
        for _ in range(sizes[split]):
            spk = int(speakers[split][int(rng.integers(len(speakers[split])))])
            samples.append(gen_utterance(config, spk, g, utt_id=f"{split}-{g:05d}"))
            g += 1
        out[split] = samples
    return out


def write_corpus(out_dir, corpus: Dict[str, List[UtteranceSample]], config: CorpusConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "corpus.json", "w") as f:
        json.dump({"format_version": 1, "config": config.to_dict()}, f, indent=2, sort_keys=True)
        f.write("\n")
    for split, samples in corpus.items():
        d = out / split
        (d / "arrays").mkdir(parents=True, exist_ok=True)
        lines = []
        for s in samples:
            mel_rel = f"arrays/{s.utt_id}.mel.arr"
            vid_rel = f"arrays/{s.utt_id}.video.arr"
            write_array(d / mel_rel, s.mel)
            write_array(d / vid_rel, s.video)
            rec = {"id": s.utt_id, "speaker": s.speaker_id, "tokens": tokens_to_string(s.tokens),
                   "mel": mel_rel, "video": vid_rel}
            lines.append(json.dumps(rec, sort_keys=True))
        (d / "index.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    logger.info("wrote corpus to %s (%s)", out, {k: len(v) for k, v in corpus.items()})
    return out


def read_corpus_config(corpus_dir) -> CorpusConfig:
    path = Path(corpus_dir) / "corpus.json"
    if not path.exists():
        raise MissingArtifactError(f"corpus metadata not found: {path}")
    return CorpusConfig.from_dict(json.loads(path.read_text())["config"])


def read_split(corpus_dir, split: str) -> List[UtteranceSample]:
    d = Path(corpus_dir) / split
    index = d / "index.jsonl"
    if not index.exists():
        raise MissingArtifactError(f"corpus split index not found: {index}")
    samples = []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        samples.append(UtteranceSample(
            tokens=tokens_from_string(rec["tokens"]),
            mel=read_array(d / rec["mel"]),
            video=read_array(d / rec["video"]),
            speaker_id=int(rec["speaker"]),
            utt_id=rec["id"],
        ))
    return samples

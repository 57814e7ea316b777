"""Metrics and task-level evaluation.

Result records (``EvalReport``) are appended as JSON lines to a results file.
Heatmap artifacts are a CSV matrix (one ``#`` header line, rows = audio
frames, columns = video frames) and an 8-bit grayscale PNG with the linear
mapping [-1, 1] -> [0, 255].
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from scipy.stats import rankdata

from .batching import collate, collate_samples
from .corpus import UtteranceSample, fit_noise, make_pairs, mix_noise
from .errors import ArtifactIOError, ConfigError, MetricError, MissingArtifactError
from .model import AVSyncModel
from .srhead import SRHead
from .sync import frame_similarity, similarity_matrix

logger = logging.getLogger(__name__)

TASKS = ("VSR", "AVSR_clean", "AVSR_noisy", "SYNC", "ASD_lite")
SPECIAL_TOKENS = frozenset({"<pad>", "<bos>", "<eos>"})


# --------------------------------------------------------------------------- metrics


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit substitution / insertion / deletion costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def _strip(seq):
    return [t for t in seq if not (isinstance(t, str) and t in SPECIAL_TOKENS)]


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    """Token error rate: edit distance over reference length (special tokens removed)."""
    ref, hyp = _strip(reference), _strip(hypothesis)
    if not ref:
        raise MetricError("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(references, hypotheses) -> float:
    """Total edits over total reference tokens."""
    edits = total = 0
    for r, h in zip(references, hypotheses):
        r, h = _strip(r), _strip(h)
        edits += edit_distance(r, h)
        total += len(r)
    if total == 0:
        raise MetricError("WER is undefined for empty references")
    return edits / total


def sync_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """ROC AUC via the rank statistic; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative examples")
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def diagonal_dominance(S, band: int = 1) -> float:
    """Mean of entries with |i - j| <= band minus mean of the rest."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ConfigError(f"diagonal_dominance needs a square matrix, got {S.shape}")
    T = S.shape[0]
    if band < 0 or band >= T:
        raise ConfigError(f"band {band} must satisfy 0 <= band < T={T}")
    i, j = np.indices(S.shape)
    near = np.abs(i - j) <= band
    if near.all():
        raise ConfigError(f"band {band} leaves no off-diagonal entries for T={T}")
    return float(S[near].mean() - S[~near].mean())


# --------------------------------------------------------------------------- heatmaps

HEATMAP_HEADER = "# rows=audio frames, cols=video frames, shape={r}x{c}, image mapping linear [-1,1]->[0,255]"


def heatmap_image(S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    return np.clip(np.rint((S + 1.0) * 127.5), 0, 255).astype(np.uint8)


def heatmap_export(S, path, figure: bool = True) -> Dict[str, Path]:
    """Write ``<path>.csv`` and ``<path>.png`` (plus a rendered matplotlib figure)."""
    S = np.asarray(S, dtype=np.float64)
    if not np.isfinite(S).all():
        raise ConfigError("similarity matrix has non-finite entries")
    base = Path(path)
    if base.suffix in (".csv", ".png"):
        base = base.with_suffix("")
    csv_path, png_path = base.with_suffix(".csv"), base.with_suffix(".png")
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w") as f:
            f.write(HEATMAP_HEADER.format(r=S.shape[0], c=S.shape[1]) + "\n")
            for row in S:
                f.write(",".join(f"{v:.10g}" for v in row) + "\n")
        Image.fromarray(heatmap_image(S), mode="L").save(png_path)
        out = {"csv": csv_path, "png": png_path}
        if figure:
            from .plotting import plot_heatmap

            out["figure"] = plot_heatmap(S, base.parent / (base.name + "_figure.png"))
    except OSError as e:
        raise ArtifactIOError(f"cannot write heatmap to {base}: {e}") from e
    return out


def read_heatmap_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", comments="#", ndmin=2)


# --------------------------------------------------------------------------- model-level helpers


@torch.no_grad()
def context_features(model: AVSyncModel, mels, videos, mode: str):
    batch = collate(mels, videos)
    feats = model.features(batch, mode)
    return feats, batch.lengths


@torch.no_grad()
def pair_scores(model: AVSyncModel, mels, videos, batch_size: int = 32) -> np.ndarray:
    """Sync score d_bar between A-only and V-only context features of each pair."""
    model.eval()
    out = []
    for i in range(0, len(mels), batch_size):
        batch = collate(mels[i:i + batch_size], videos[i:i + batch_size])
        f_a = model.features(batch, "A")
        f_v = model.features(batch, "V")
        mask = torch.arange(f_a.shape[1])[None, :] < batch.lengths[:, None]
        out.append(frame_similarity(f_a, f_v, mask=mask).d_bar.double().numpy())
    return np.concatenate(out)


@torch.no_grad()
def alignment_matrix(model: AVSyncModel, mel, video) -> np.ndarray:
    """Audio-frame x video-frame cosine matrix from A-only and V-only context passes."""
    model.eval()
    batch = collate([mel], [video])
    f_a = model.features(batch, "A")[0]
    f_v = model.features(batch, "V")[0]
    return similarity_matrix(f_a, f_v).double().numpy()


def mean_dominance(model: AVSyncModel, samples, band: int = 1) -> float:
    vals = [diagonal_dominance(alignment_matrix(model, s.mel, s.video), band)
            for s in samples if s.num_frames > band + 1]
    return float(np.mean(vals))


def sync_pair_set(samples, min_shift: int, seed: int):
    """Every sample as a positive plus one negative per sample (half shifted, half cross)."""
    pos = make_pairs(samples, 0.0, min_shift, np.random.default_rng(seed))
    neg = make_pairs(samples, 1.0, min_shift, np.random.default_rng(seed + 1))
    return pos + neg


def noisy_samples(samples, snr_db: float, seed: int) -> List[UtteranceSample]:
    """Babble-corrupt each sample with a different utterance of the same set."""
    if math.isinf(snr_db) and snr_db > 0:
        return list(samples)
    rng = np.random.default_rng(seed)
    out = []
    n = len(samples)
    for i, s in enumerate(samples):
        j = (i + 1 + int(rng.integers(n - 1))) % n if n > 1 else i
        if j == i:
            out.append(s)
            continue
        noise = fit_noise(samples[j].mel, s.mel.shape[0])
        out.append(replace(s, mel=mix_noise(s.mel, noise, snr_db).astype(np.float32)))
    return out


@torch.no_grad()
def decode_memory(head: SRHead, mem, mem_len, beam: int) -> List[Tuple[int, ...]]:
    if beam == 1:
        return head.greedy_batch(mem, mem_len)
    return [head.decode(mem[i, : int(mem_len[i])], beam_size=beam).tokens for i in range(mem.shape[0])]


@torch.no_grad()
def transcribe(model: AVSyncModel, head: SRHead, samples, mode: str, beam: int = 3, batch_size: int = 32):
    model.eval()
    hyps = []
    for i in range(0, len(samples), batch_size):
        batch = collate_samples(samples[i:i + batch_size])
        mem, mem_len = model.memory(batch, mode)
        hyps.extend(decode_memory(head, mem, mem_len, beam))
    return hyps


@torch.no_grad()
def transcribe_audio_only_head(head: SRHead, samples, beam: int = 3, batch_size: int = 32):
    """The frozen head on its own acoustic stem (no backbone involved)."""
    hyps = []
    for i in range(0, len(samples), batch_size):
        batch = collate_samples(samples[i:i + batch_size])
        hyps.extend(decode_memory(head, head.acoustic_features(batch.log_mel), 2 * batch.lengths, beam))
    return hyps


@torch.no_grad()
def transcribe_cross(model: AVSyncModel, head: SRHead, samples, beam: int = 3, batch_size: int = 32):
    model.eval()
    hyps = []
    for i in range(0, len(samples), batch_size):
        batch = collate_samples(samples[i:i + batch_size])
        mem, mem_len = model.cross_memory(batch, head.acoustic_features(batch.log_mel))
        hyps.extend(decode_memory(head, mem, mem_len, beam))
    return hyps


# --------------------------------------------------------------------------- tasks


@dataclass
class EvalConditions:
    snr_db: float = math.inf
    beam: int = 3
    split: str = "test"
    checkpoint_id: str = ""
    seed: int = 0
    min_shift: int = 2
    candidates: int = 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = "clean" if math.isinf(self.snr_db) else self.snr_db
        return d


@dataclass
class EvalReport:
    task: str
    metric_name: str
    value: float
    conditions: EvalConditions
    baseline: Optional[float] = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"task": self.task, "metric_name": self.metric_name, "value": self.value,
             "conditions": self.conditions.to_dict()}
        if self.baseline is not None:
            d["baseline"] = self.baseline
        if self.details:
            d["details"] = self.details
        return d


def append_result(path, report: EvalReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")


def asd_accuracy(model: AVSyncModel, samples, candidates: int, seed: int) -> float:
    """For each audio stream pick the candidate video with the highest sync score."""
    if candidates < 2 or len(samples) < candidates:
        raise ConfigError("ASD needs at least 2 candidates and that many samples")
    rng = np.random.default_rng(seed)
    hits = 0
    for i, s in enumerate(samples):
        others = [j for j in range(len(samples)) if j != i]
        picks = [i] + [others[k] for k in rng.choice(len(others), size=candidates - 1, replace=False)]
        L = min(samples[j].num_frames for j in picks)
        mels = [s.mel[: 4 * L]] * candidates
        videos = [samples[j].video[:L] for j in picks]
        scores = pair_scores(model, mels, videos)
        hits += int(np.argmax(scores) == 0)
    return hits / len(samples)


def run_task(task: str, model: AVSyncModel, head: SRHead, samples, conditions: EvalConditions) -> EvalReport:
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    c = conditions
    refs = [s.tokens for s in samples]
    if task == "VSR":
        hyps = transcribe(model, head, samples, "V", c.beam)
        return EvalReport(task, "wer", corpus_wer(refs, hyps), c)
    if task == "AVSR_noisy":
        if c.snr_db is None or math.isinf(c.snr_db):
            raise ConfigError("AVSR_noisy needs a finite snr_db condition")
        noisy = noisy_samples(samples, c.snr_db, c.seed)
        av = corpus_wer(refs, transcribe(model, head, noisy, "AV", c.beam))
        a = corpus_wer(refs, transcribe(model, head, noisy, "A", c.beam))
        return EvalReport(task, "wer", av, c, baseline=a, details={"audio_only_wer": a})
    if task == "AVSR_clean":
        if model.xadapter is None:
            raise MissingArtifactError("checkpoint has no cross-attention adapter; train with cross_adapter_steps > 0")
        av = corpus_wer(refs, transcribe_cross(model, head, samples, c.beam))
        a = corpus_wer(refs, transcribe_audio_only_head(head, samples, c.beam))
        return EvalReport(task, "wer", av, c, baseline=a, details={"audio_only_head_wer": a})
    if task == "SYNC":
        pairs = sync_pair_set(samples, c.min_shift, c.seed)
        mats = [p.materialize(samples) for p in pairs]
        scores = pair_scores(model, [m for m, _ in mats], [v for _, v in mats])
        return EvalReport(task, "auc", sync_auc(scores, [p.label for p in pairs]), c)
    return EvalReport(task, "accuracy", asd_accuracy(model, samples, c.candidates, c.seed), c)


def evaluate_task(task: str, checkpoint, split: str, conditions: EvalConditions, head_path, corpus_dir) -> EvalReport:
    """Load a checkpoint, SR head and corpus split from disk and run ``task``."""
    from .corpus import read_split
    from .model import load_model
    from .srhead import load_head

    model, meta = load_model(checkpoint)
    head, head_sum = load_head(head_path)
    if meta.get("head_checksum") not in (None, head_sum):
        raise MissingArtifactError("checkpoint was trained against a different SR head")
    samples = read_split(corpus_dir, split)
    conditions = replace(conditions, split=split, checkpoint_id=conditions.checkpoint_id or meta.get("checksum", "")[:12])
    return run_task(task, model, head, samples, conditions)

"""Joint contrastive + generative training with modality dropping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .batching import collate, collate_samples
from .checkpoint import checksum
from .corpus import UtteranceSample, fit_noise, make_pairs, mix_noise
from .errors import ConfigError, MissingArtifactError, NonFiniteLossError
from .model import PHASE1_NAMESPACES, AVSyncModel, save_model
from .srhead import SRHead
from .sync import contrastive_loss, frame_similarity

logger = logging.getLogger(__name__)

MODES = ("A", "V", "AV")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters. ``lam`` is serialised as ``lambda``."""

    lam: float = 1.0
    modality_probs: Tuple[float, float, float] = (0.2, 0.4, 0.4)
    lr: float = 1e-5
    warmup_steps: int = 500
    batch_size: int = 16
    grad_accum: int = 4
    seed: int = 0
    snr_range_db: Tuple[float, float] = (-5.0, 5.0)
    negative_fraction: float = 0.5
    min_shift: int = 2
    steps: int = 300
    phase1_fraction: float = 0.2
    checkpoint_every: int = 0
    contrastive_noise: bool = True
    cross_adapter_steps: int = 0

    def validate(self) -> "TrainConfig":
        check_probs(self.modality_probs)
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.lr <= 0 or self.warmup_steps < 0:
            raise ConfigError("lr must be positive and warmup_steps non-negative")
        if self.batch_size < 1 or self.grad_accum < 1 or self.steps < 0:
            raise ConfigError("batch_size, grad_accum must be >= 1 and steps >= 0")
        lo, hi = self.snr_range_db
        if lo > hi:
            raise ConfigError(f"bad snr_range_db {self.snr_range_db}")
        if not 0.0 <= self.negative_fraction <= 1.0:
            raise ConfigError("negative_fraction must be in [0, 1]")
        if not 0.0 <= self.phase1_fraction <= 1.0:
            raise ConfigError("phase1_fraction must be in [0, 1]")
        return self

    @property
    def phase1_steps(self) -> int:
        return int(round(self.phase1_fraction * self.steps))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        for k in ("modality_probs", "snr_range_db"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d).validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["modality_probs"] = list(self.modality_probs)
        d["snr_range_db"] = list(self.snr_range_db)
        return d


def desk_train_config(**overrides) -> TrainConfig:
    """Settings sized for a toy model on a laptop CPU (lr and warmup scaled down)."""
    base = TrainConfig(lr=1e-3, warmup_steps=30, batch_size=16, grad_accum=4, steps=300, cross_adapter_steps=100)
    return replace(base, **overrides).validate()


@dataclass
class StepReport:
    step: int
    L_Co: float
    L_Gen: float
    L_total: float
    mode_drawn: str
    lr: float = 0.0
    phase: int = 2


def check_probs(probs) -> Tuple[float, float, float]:
    if len(probs) != 3:
        raise ConfigError(f"modality_probs needs 3 entries (A, V, AV), got {probs}")
    if any((not math.isfinite(p)) or p < 0 for p in probs):
        raise ConfigError(f"modality_probs must be non-negative, got {probs}")
    if abs(sum(probs) - 1.0) > 1e-9:
        raise ConfigError(f"modality_probs must sum to 1, got {sum(probs)}")
    return tuple(probs)


def sample_modality(rng: np.random.Generator, probs=(0.2, 0.4, 0.4)) -> str:
    """Categorical draw over (A, V, AV)."""
    p_a, p_v, _ = check_probs(probs)
    u = rng.random()
    if u < p_a:
        return "A"
    if u < p_a + p_v:
        return "V"
    return "AV"


def noisy_copies(samples, pool, rng: np.random.Generator, snr_range) -> List[UtteranceSample]:
    """Mix each sample with another utterance's mel (babble) at a uniform random SNR."""
    lo, hi = snr_range
    out = []
    for s in samples:
        while True:
            other = pool[int(rng.integers(len(pool)))]
            if other is not s or len(pool) == 1:
                break
        snr = float(rng.uniform(lo, hi))
        noise = fit_noise(other.mel, s.mel.shape[0])
        if other is s or not noise.any():
            out.append(s)
            continue
        mixed = mix_noise(s.mel, noise, snr).astype(np.float32)
        out.append(replace(s, mel=mixed))
    return out


def set_trainable(model: AVSyncModel, prefixes) -> None:
    prefixes = tuple(p + "." for p in prefixes)
    for name, p in model.named_parameters():
        p.requires_grad_(name.startswith(prefixes))


class Trainer:
    def __init__(
        self,
        model: AVSyncModel,
        head: SRHead,
        head_checksum: Optional[str],
        samples: Sequence[UtteranceSample],
        cfg: TrainConfig,
        out_dir=None,
    ):
        if not head_checksum:
            raise MissingArtifactError("SR head checksum record is missing; refusing to train")
        if checksum(head) != head_checksum:
            raise MissingArtifactError("SR head parameters do not match the recorded checksum")
        self.cfg = cfg.validate()
        self.model = model
        self.head = head
        self.head_checksum = head_checksum
        self.samples = list(samples)
        if not self.samples:
            raise ConfigError("no training samples")
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        for p in head.parameters():
            p.requires_grad_(False)
        head.eval()
        self.opt = torch.optim.Adam([p for p in model.parameters()], lr=cfg.lr)
        self.step = 0
        self._order: List[int] = []
        self.log: List[StepReport] = []

    # ---------------------------------------------------------------- helpers
    def lr_at(self, step: int) -> float:
        if self.cfg.warmup_steps and step <= self.cfg.warmup_steps:
            return self.cfg.lr * step / self.cfg.warmup_steps
        return self.cfg.lr

    def next_micro_batch(self) -> List[UtteranceSample]:
        # epoch-wise reshuffle; negatives are re-drawn every time a batch is built
        out = []
        while len(out) < self.cfg.batch_size:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.samples)))
            out.append(self.samples[self._order.pop()])
        return out

    def contrastive_term(self, samples) -> torch.Tensor:
        pairs = make_pairs(samples, self.cfg.negative_fraction, self.cfg.min_shift, self.rng)
        mats = [p.materialize(samples) for p in pairs]
        batch = collate([m for m, _ in mats], [v for _, v in mats])
        f_a = self.model.features(batch, "A")
        f_v = self.model.features(batch, "V")
        mask = torch.arange(f_a.shape[1])[None, :] < batch.lengths[:, None]
        score = frame_similarity(f_a, f_v, mask=mask)
        return contrastive_loss(score.d_bar, [p.label for p in pairs])

    def generative_term(self, samples, mode: str) -> torch.Tensor:
        batch = collate_samples(samples)
        mem, mem_len = self.model.memory(batch, mode)
        return self.head.nll_loss(mem, batch.tokens, mem_len)

    # ---------------------------------------------------------------- step
    def train_step(self, micro_batches: Sequence[Sequence[UtteranceSample]]) -> StepReport:
        """One optimiser update accumulated over ``micro_batches``."""
        self.step += 1
        phase = 1 if self.step <= self.cfg.phase1_steps else 2
        set_trainable(self.model, PHASE1_NAMESPACES if phase == 1 else ("backbone", "adapter"))
        self.model.train()
        self.opt.zero_grad(set_to_none=True)
        l_co_sum = l_gen_sum = 0.0
        modes = []
        n = len(micro_batches)
        for samples in micro_batches:
            noisy = noisy_copies(samples, self.samples, self.rng, self.cfg.snr_range_db)
            mode = sample_modality(self.rng, self.cfg.modality_probs)
            modes.append(mode)
            contrast_src = noisy if self.cfg.contrastive_noise else list(samples)
            if self.cfg.lam > 0:
                l_co = self.contrastive_term(contrast_src)
            else:
                with torch.no_grad():
                    l_co = self.contrastive_term(contrast_src)
            l_gen = self.generative_term(noisy, mode)
            total = l_gen + self.cfg.lam * l_co
            if not torch.isfinite(total):
                self._dump_nonfinite(mode, samples, l_co.item(), l_gen.item())
            (total / n).backward()
            l_co_sum += l_co.item()
            l_gen_sum += l_gen.item()
        lr = self.lr_at(self.step)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.step()
        l_co = l_co_sum / n
        l_gen = l_gen_sum / n
        report = StepReport(self.step, l_co, l_gen, l_gen + self.cfg.lam * l_co, "+".join(modes), lr, phase)
        self.log.append(report)
        return report

    def _dump_nonfinite(self, mode, samples, l_co, l_gen):
        dump = {"step": self.step, "mode": mode, "batch_ids": [s.utt_id for s in samples],
                "L_Co": l_co, "L_Gen": l_gen}
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))
        raise NonFiniteLossError(f"non-finite loss: {json.dumps(dump)}")

    # ---------------------------------------------------------------- fit
    def fit(self, steps: Optional[int] = None, log_path=None, callback=None) -> List[StepReport]:
        steps = self.cfg.steps if steps is None else steps
        log_file = open(log_path, "a") if log_path is not None else None
        try:
            for _ in range(steps):
                rep = self.train_step([self.next_micro_batch() for _ in range(self.cfg.grad_accum)])
                if log_file is not None:
                    log_file.write(json.dumps(asdict(rep), sort_keys=True) + "\n")
                    log_file.flush()
                if rep.step % 25 == 0 or rep.step == 1:
                    logger.info("step %d phase %d L_Co %.4f L_Gen %.4f L %.4f", rep.step, rep.phase,
                                rep.L_Co, rep.L_Gen, rep.L_total)
                if callback is not None:
                    callback(self, rep)
                if self.cfg.checkpoint_every and self.out_dir is not None and rep.step % self.cfg.checkpoint_every == 0:
                    self.save(self.out_dir / f"checkpoint_step{rep.step:06d}.npz")
        finally:
            if log_file is not None:
                log_file.close()
        if checksum(self.head) != self.head_checksum:
            raise RuntimeError("SR head parameters changed during training")
        self.model.eval()
        return self.log

    def save(self, path, extra: Optional[dict] = None):
        meta = {"train": self.cfg.to_dict(), "step": self.step, "head_checksum": self.head_checksum}
        meta.update(extra or {})
        return save_model(path, self.model, meta)


def fit_cross_adapter(
    model: AVSyncModel,
    head: SRHead,
    samples: Sequence[UtteranceSample],
    steps: int,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> List[float]:
    """Train only the cross-attention adapter (clean audio queries, visual keys/values).

    Backbone, self-attention adapter and head stay frozen.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    xad = model.add_cross_adapter()
    set_trainable(model, ("xadapter",))
    model.eval()
    xad.train()
    opt = torch.optim.Adam(xad.parameters(), lr=lr)
    losses = []
    for step in range(1, steps + 1):
        idx = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        batch = collate_samples([samples[i] for i in idx])
        with torch.no_grad():
            query = head.acoustic_features(batch.log_mel)
        mem, mem_len = model.cross_memory(batch, query)
        loss = head.nll_loss(mem, batch.tokens, mem_len)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.eval()
    return losses

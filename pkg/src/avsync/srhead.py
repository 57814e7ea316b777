"""A small encoder-decoder speech recognizer used as the frozen SR head.

The head consumes 50 fps acoustic features: its own stem turns a 4T x bins
log-mel into 2T x d_model, and adapted backbone features are injected at the
same point (bypassing the stem). It is pretrained once on clean synthetic
speech and then frozen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .batching import collate_samples
from .checkpoint import checksum, load_checkpoint, load_into, save_checkpoint, state_arrays
from .errors import ArtifactIOError, BatchError, ConfigError, PretrainingError
from .layers import DecoderBlock, EncoderBlock, lengths_to_pad_mask, scaled_init_, sinusoidal_positions

logger = logging.getLogger(__name__)

PAD, BOS, EOS = 0, 1, 2
NUM_SPECIALS = 3


@dataclass(frozen=True)
class Vocabulary:
    """Content symbols 0..content_size-1 map to ids 3.. ; ids 0/1/2 are PAD/BOS/EOS."""

    content_size: int = 16

    @property
    def size(self) -> int:
        return self.content_size + NUM_SPECIALS

    def encode(self, tokens: Sequence[int]) -> List[int]:
        return [int(t) + NUM_SPECIALS for t in tokens]

    def strip(self, ids: Sequence[int]) -> Tuple[int, ...]:
        """Content tokens of an id sequence, stopping at the first EOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i >= NUM_SPECIALS:
                out.append(i - NUM_SPECIALS)
        return tuple(out)

    def to_dict(self) -> dict:
        return {"content_size": self.content_size, "specials": {"PAD": PAD, "BOS": BOS, "EOS": EOS}}


@dataclass(frozen=True)
class SRHeadConfig:
    d_model: int = 64
    enc_blocks: int = 2
    dec_blocks: int = 2
    num_heads: int = 4
    max_len: int = 16
    mel_bins: int = 80
    vocab_size: int = 16
    dropout: float = 0.0

    def validate(self) -> "SRHeadConfig":
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.max_len < 1 or self.vocab_size < 1:
            raise ConfigError("bad SR head config")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SRHeadConfig":
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


class SRHead(nn.Module):
    def __init__(self, cfg: SRHeadConfig = SRHeadConfig()):
        super().__init__()
        self.cfg = cfg.validate()
        self.vocab = Vocabulary(cfg.vocab_size)
        d = cfg.d_model
        self.stem = nn.Conv1d(cfg.mel_bins, d, kernel_size=3, stride=2, padding=1)
        self.enc_blocks = nn.ModuleList(EncoderBlock(d, cfg.num_heads, cfg.dropout) for _ in range(cfg.enc_blocks))
        self.enc_norm = nn.LayerNorm(d)
        self.embed = nn.Embedding(self.vocab.size, d)
        self.dec_blocks = nn.ModuleList(DecoderBlock(d, cfg.num_heads, cfg.dropout) for _ in range(cfg.dec_blocks))
        self.dec_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, self.vocab.size)
        scaled_init_(self)

    # ---------------------------------------------------------------- encoder
    def acoustic_features(self, log_mel: torch.Tensor) -> torch.Tensor:
        """(B, 4T, bins) log-mel -> (B, 2T, d_model) 50 fps features."""
        return F.gelu(self.stem(log_mel.transpose(1, 2))).transpose(1, 2)

    def encode(self, memory: torch.Tensor, pad_mask=None) -> torch.Tensor:
        x = memory + sinusoidal_positions(memory.shape[1], memory.shape[2], memory.dtype, memory.device)
        for blk in self.enc_blocks:
            x = blk(x, pad_mask)
        return self.enc_norm(x)

    # ---------------------------------------------------------------- decoder
    def logits(self, enc: torch.Tensor, prefix: torch.Tensor, enc_pad_mask=None) -> torch.Tensor:
        y = self.embed(prefix) * math.sqrt(self.cfg.d_model)
        y = y + sinusoidal_positions(y.shape[1], y.shape[2], y.dtype, y.device)
        for blk in self.dec_blocks:
            y = blk(y, enc, enc_pad_mask)
        return self.out(self.dec_norm(y))

    def make_targets(self, token_seqs: Sequence[Sequence[int]], device=None):
        """Teacher-forcing (input, output) id tensors, PAD filled."""
        if len(token_seqs) == 0:
            raise BatchError("empty target batch")
        rows = [self.vocab.encode(t) for t in token_seqs]
        longest = max(len(r) for r in rows) + 1
        if longest > self.cfg.max_len:
            raise BatchError(f"target length {longest} exceeds max_len {self.cfg.max_len}")
        inp = torch.full((len(rows), longest), PAD, dtype=torch.long, device=device)
        out = torch.full((len(rows), longest), PAD, dtype=torch.long, device=device)
        for i, r in enumerate(rows):
            inp[i, : len(r) + 1] = torch.tensor([BOS] + r, dtype=torch.long)
            out[i, : len(r) + 1] = torch.tensor(r + [EOS], dtype=torch.long)
        return inp, out

    def nll_loss(self, memory: torch.Tensor, targets, memory_lengths=None, reduction: str = "mean") -> torch.Tensor:
        """Teacher-forced cross-entropy of ``targets`` given injected 2T-rate features.

        ``memory`` is (2T, d) with one target sequence, or (B, 2T, d) with a
        list of them; ``memory_lengths`` counts valid
        2T-rate frames. Mean over non-PAD target positions.
        """
        if memory.dim() == 2:
            # single utterance: ``targets`` is one token sequence (possibly empty)
            memory = memory[None]
            targets = [tuple(targets)]
        pad_mask = None
        if memory_lengths is not None:
            pad_mask = lengths_to_pad_mask(memory_lengths, memory.shape[1], memory.device)
        inp, out = self.make_targets(targets, memory.device)
        enc = self.encode(memory, pad_mask)
        logits = self.logits(enc, inp, pad_mask)
        loss = F.cross_entropy(logits.transpose(1, 2), out, ignore_index=PAD, reduction="none")
        if reduction == "none":
            return loss
        mask = (out != PAD).to(loss.dtype)
        if reduction == "sum":
            return (loss * mask).sum()
        return (loss * mask).sum() / mask.sum()

    def token_accuracy(self, memory, targets, memory_lengths=None) -> Tuple[int, int]:
        pad_mask = None
        if memory_lengths is not None:
            pad_mask = lengths_to_pad_mask(memory_lengths, memory.shape[1], memory.device)
        inp, out = self.make_targets(targets, memory.device)
        pred = self.logits(self.encode(memory, pad_mask), inp, pad_mask).argmax(-1)
        valid = out != PAD
        return int(((pred == out) & valid).sum()), int(valid.sum())

    # ---------------------------------------------------------------- decoding
    def step_fn(self, memory: torch.Tensor) -> Callable:
        """Next-token log-prob function over id prefixes for one utterance's (2T, d) memory."""
        with torch.no_grad():
            enc = self.encode(memory[None])

        def fn(prefixes: Sequence[Sequence[int]]) -> np.ndarray:
            with torch.no_grad():
                ids = torch.tensor([list(p) for p in prefixes], dtype=torch.long, device=memory.device)
                logits = self.logits(enc.expand(len(prefixes), -1, -1), ids)[:, -1].double()
                logits[:, PAD] = -math.inf
                logits[:, BOS] = -math.inf
                return torch.log_softmax(logits, -1).cpu().numpy()

        return fn

    def sequence_logprob(self, memory: torch.Tensor, ids: Sequence[int]) -> float:
        """Log-prob of an emitted id sequence from one teacher-forced pass.

        Float32 results depend slightly on how many prefixes share a batch, so
        the search scores are only used for ranking; this pass gives every
        sequence one canonical score.
        """
        if not ids:
            return 0.0
        with torch.no_grad():
            enc = self.encode(memory[None])
            inp = torch.tensor([[BOS, *ids[:-1]]], dtype=torch.long, device=memory.device)
            logits = self.logits(enc, inp)[0].double()
            logits[:, PAD] = -math.inf
            logits[:, BOS] = -math.inf
            logp = torch.log_softmax(logits, -1)
            return float(logp[torch.arange(len(ids)), torch.tensor(ids)].sum())

    def decode(self, memory: torch.Tensor, beam_size: int = 3, max_len: Optional[int] = None) -> "Hypothesis":
        max_len = self.cfg.max_len if max_len is None else max_len
        hyp = beam_search(self.step_fn(memory), beam_size, max_len)
        hyp.logprob = self.sequence_logprob(memory, hyp.ids)
        hyp.tokens = self.vocab.strip(hyp.ids)
        return hyp

    def greedy_batch(self, memory: torch.Tensor, memory_lengths=None, max_len: Optional[int] = None):
        """Batched greedy decoding; returns content token tuples."""
        max_len = self.cfg.max_len if max_len is None else max_len
        pad_mask = None
        if memory_lengths is not None:
            pad_mask = lengths_to_pad_mask(memory_lengths, memory.shape[1], memory.device)
        with torch.no_grad():
            enc = self.encode(memory, pad_mask)
            b = memory.shape[0]
            ids = torch.full((b, 1), BOS, dtype=torch.long, device=memory.device)
            done = torch.zeros(b, dtype=torch.bool)
            for _ in range(max_len):
                logits = self.logits(enc, ids, pad_mask)[:, -1]
                logits[:, PAD] = -math.inf
                logits[:, BOS] = -math.inf
                nxt = logits.argmax(-1)
                nxt = torch.where(done, torch.full_like(nxt, EOS), nxt)
                ids = torch.cat([ids, nxt[:, None]], 1)
                done |= nxt == EOS
                if bool(done.all()):
                    break
        return [self.vocab.strip(row[1:].tolist()) for row in ids]


# -------------------------------------------------------------------- search


@dataclass
class Hypothesis:
    ids: Tuple[int, ...]
    logprob: float
    tokens: Tuple[int, ...] = ()

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def score(self) -> float:
        return self.logprob / max(self.length, 1)


def _rank(h: Hypothesis):
    return (-h.score, h.ids)


def greedy_search(step_fn: Callable, max_len: int, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    ids: Tuple[int, ...] = ()
    total = 0.0
    for _ in range(max_len):
        row = step_fn([(bos,) + ids])[0]
        tok = int(np.argmax(row))
        total += float(row[tok])
        ids += (tok,)
        if tok == eos:
            break
    return Hypothesis(ids, total)


def beam_search(step_fn: Callable, beam_size: int, max_len: int, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    """Length-normalised beam search.

    Live hypotheses are pruned by cumulative log-prob (all have equal length at
    a given step); finished ones are compared by log-prob / emitted length,
    EOS included. Ties go to the lexicographically smaller id sequence.
    """
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    alive: List[Tuple[Tuple[int, ...], float]] = [((), 0.0)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        rows = step_fn([(bos,) + p for p, _ in alive])
        cands = []
        for (p, s), row in zip(alive, rows):
            for tok in np.flatnonzero(np.isfinite(row)):
                cands.append((s + float(row[tok]), p + (int(tok),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for s, p in cands[:beam_size]:
            if p[-1] == eos:
                finished.append(Hypothesis(p, s))
            else:
                alive.append((p, s))
        if not alive:
            break
    finished.extend(Hypothesis(p, s) for p, s in alive)
    return min(finished, key=_rank)


def brute_force_best(step_fn: Callable, max_len: int, vocab_ids: Sequence[int], bos: int = BOS, eos: int = EOS) -> Hypothesis:
    """Exhaustive search over every emittable sequence (test oracle for tiny vocabularies)."""
    best = None

    def visit(prefix, logp):
        nonlocal best
        row = step_fn([(bos,) + prefix])[0]
        for tok in vocab_ids:
            lp = logp + float(row[tok])
            ids = prefix + (tok,)
            if tok == eos or len(ids) == max_len:
                h = Hypothesis(ids, lp)
                if best is None or _rank(h) < _rank(best):
                    best = h
            else:
                visit(ids, lp)

    visit((), 0.0)
    return best


# -------------------------------------------------------------------- pretraining


def _memory_lengths(batch) -> torch.Tensor:
    return 2 * batch.lengths


def evaluate_head(head: SRHead, samples, batch_size: int = 64) -> float:
    """Teacher-forced token accuracy on clean audio."""
    head.eval()
    correct = total = 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            b = collate_samples(samples[i:i + batch_size])
            c, t = head.token_accuracy(head.acoustic_features(b.log_mel), b.tokens, _memory_lengths(b))
            correct += c
            total += t
    return correct / max(total, 1)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def pretrain_srhead(
    train_samples,
    heldout_samples,
    cfg: SRHeadConfig = SRHeadConfig(),
    steps: int = 1500,
    batch_size: int = 32,
    lr: float = 2e-3,
    warmup_steps: int = 50,
    seed: int = 0,
    min_accuracy: float = 0.95,
    eval_every: int = 100,
):
    """Train the head on clean mel -> text until held-out token accuracy reaches ``min_accuracy``.

    Returns ``(frozen_head, checksum, info)``; raises :class:`PretrainingError`
    if the bar is not reached within ``steps``.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    head = SRHead(cfg)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    acc = 0.0
    order = rng.permutation(len(train_samples))
    pos = 0
    step = 0
    for step in range(1, steps + 1):
        head.train()
        if pos + batch_size > len(order):
            order = rng.permutation(len(train_samples))
            pos = 0
        batch = collate_samples([train_samples[i] for i in order[pos:pos + batch_size]])
        pos += batch_size
        for g in opt.param_groups:
            g["lr"] = lr * min(1.0, step / max(warmup_steps, 1))
        loss = head.nll_loss(head.acoustic_features(batch.log_mel), batch.tokens, _memory_lengths(batch))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % eval_every == 0 or step == steps:
            acc = evaluate_head(head, heldout_samples)
            logger.info("head pretrain step %d loss %.4f heldout acc %.4f", step, loss.item(), acc)
            if acc >= min_accuracy:
                break
    if acc < min_accuracy:
        raise PretrainingError(f"held-out token accuracy {acc:.4f} < {min_accuracy} after {steps} steps")
    freeze(head)
    return head, checksum(head), {"steps": step, "heldout_token_accuracy": acc}


def save_head(path, head: SRHead, info: Optional[dict] = None):
    arrays = state_arrays(head)
    meta = {
        "kind": "srhead",
        "config": head.cfg.to_dict(),
        "vocabulary": head.vocab.to_dict(),
        "checksum": checksum(arrays),
        "info": info or {},
    }
    return save_checkpoint(path, arrays, meta)


def load_head(path) -> Tuple[SRHead, str]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "srhead":
        raise ArtifactIOError(f"{path} is not an SR head checkpoint")
    if "checksum" not in meta:
        raise ArtifactIOError(f"{path} has no checksum record; refusing to use it as a frozen head")
    if checksum(arrays) != meta["checksum"]:
        raise ArtifactIOError(f"{path}: parameter checksum mismatch")
    head = SRHead(SRHeadConfig.from_dict(meta["config"]))
    load_into(head, arrays)
    freeze(head)
    return head, meta["checksum"]

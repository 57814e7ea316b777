"""Shared fixtures.

Tiny configurations keep unit tests fast; the ``desk`` fixtures pretrain the
SR head and train full desk-scale models once per session (minutes on one
CPU core) and are shared by the acceptance suite and integration tests.
"""

import logging
import time

import pytest
import torch

from avsync.adapter import AdapterConfig
from avsync.backbone import BackboneConfig
from avsync.checkpoint import checksum
from avsync.corpus import CorpusConfig, build_corpus
from avsync.model import AVSyncModel
from avsync.srhead import SRHead, SRHeadConfig, pretrain_srhead
from avsync.train import Trainer, desk_train_config

torch.set_num_threads(1)
logging.getLogger("avsync").setLevel(logging.WARNING)

TINY_CORPUS = CorpusConfig(vocab_size=4, mel_bins=16, image_size=8, utterance_len_range=(2, 4),
                           num_utterances=24, num_speakers=3)
TINY_BACKBONE = BackboneConfig(feat_dim=8, num_blocks=1, num_heads=2, mel_bins=16, dropout=0.0,
                               audio_channels=(2, 4), video_channels=(2, 4))
TINY_ADAPTER = AdapterConfig(in_dim=8, out_dim=8, num_heads=2, hidden_mult=2.0)
TINY_HEAD = SRHeadConfig(d_model=8, enc_blocks=1, dec_blocks=1, num_heads=2, max_len=8, mel_bins=16, vocab_size=4)


@pytest.fixture(scope="session")
def tiny_corpus():
    return build_corpus(TINY_CORPUS)


@pytest.fixture
def tiny_head():
    torch.manual_seed(0)
    head = SRHead(TINY_HEAD)
    return head, checksum(head)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return AVSyncModel(TINY_BACKBONE, TINY_ADAPTER)


# ------------------------------------------------------------------ desk scale


@pytest.fixture(scope="session")
def desk_corpus():
    return build_corpus(CorpusConfig())


@pytest.fixture(scope="session")
def desk_head():
    corpus = build_corpus(CorpusConfig(seed=1000, num_utterances=2000, split_fractions=(0.9, 0.05, 0.05)))
    head, head_sum, info = pretrain_srhead(corpus["train"], corpus["val"], SRHeadConfig())
    return head, head_sum, info


class DeskRuns:
    """Lazily trained desk-scale models keyed by (lambda, arm, seed); each trained at most once.

    ``get`` returns ``(model, step_reports, seconds)``.
    """

    def __init__(self, head, head_sum, corpus):
        self.head, self.head_sum, self.corpus = head, head_sum, corpus
        self._runs = {}

    def get(self, lam: float = 1.0, arm: str = "full", seed: int = 0):
        key = (lam, arm, seed)
        if key not in self._runs:
            torch.manual_seed(seed)
            model = AVSyncModel(BackboneConfig(), AdapterConfig().with_arm(arm))
            cfg = desk_train_config(lam=lam, seed=seed)
            trainer = Trainer(model, self.head, self.head_sum, self.corpus["train"], cfg)
            start = time.perf_counter()
            log = trainer.fit()
            self._runs[key] = (model.eval(), log, time.perf_counter() - start)
        return self._runs[key]


@pytest.fixture(scope="session")
def desk_runs(desk_head, desk_corpus):
    head, head_sum, _ = desk_head
    return DeskRuns(head, head_sum, desk_corpus)

import itertools
import math

import numpy as np
import pytest
import torch

from avsync.checkpoint import checksum, load_checkpoint, save_checkpoint
from avsync.errors import ArtifactIOError, BatchError, ConfigError
from avsync.srhead import (
    BOS,
    EOS,
    PAD,
    SRHead,
    SRHeadConfig,
    Vocabulary,
    beam_search,
    brute_force_best,
    greedy_search,
    load_head,
    save_head,
)

SMALL = SRHeadConfig(d_model=8, enc_blocks=1, dec_blocks=1, num_heads=2, max_len=6, mel_bins=8, vocab_size=4)


def toy_step_fn(vocab: int, seed: int, eos: int = 0):
    """Random but fixed next-token log-probs keyed by the prefix."""

    def fn(prefixes):
        rows = []
        for p in prefixes:
            rng = np.random.default_rng([seed, *[x + 7 for x in p]])
            logits = rng.normal(scale=2.0, size=vocab)
            rows.append(logits - np.logaddexp.reduce(logits))
        return np.array(rows)

    return fn


def test_vocabulary_encode_strip():
    v = Vocabulary(4)
    assert v.size == 7
    ids = v.encode([0, 3, 1])
    assert min(ids) >= 3
    assert v.strip([BOS] + ids + [EOS, PAD, PAD]) == (0, 3, 1)
    assert v.strip(ids[:1] + [EOS] + ids[1:]) == (0,)


def test_make_targets_layout():
    head = SRHead(SMALL)
    inp, out = head.make_targets([(0, 1), (2,)])
    assert inp.tolist() == [[BOS, 3, 4], [BOS, 5, PAD]]
    assert out.tolist() == [[3, 4, EOS], [5, EOS, PAD]]
    with pytest.raises(BatchError):
        head.make_targets([])
    with pytest.raises(BatchError):
        head.make_targets([(0,) * 6])


def test_uniform_logits_give_log_vocab():
    head = SRHead(SMALL).double()
    with torch.no_grad():
        head.out.weight.zero_()
        head.out.bias.zero_()
    mem = torch.randn(6, 8, dtype=torch.float64)
    loss = head.nll_loss(mem, (1, 2, 0)).item()
    assert loss == pytest.approx(math.log(head.vocab.size), abs=1e-12)


def test_forced_eos_gives_zero_loss():
    head = SRHead(SMALL).double()
    with torch.no_grad():
        head.out.weight.zero_()
        head.out.bias.zero_()
        head.out.bias[EOS] = 100.0
    loss = head.nll_loss(torch.randn(4, 8, dtype=torch.float64), ()).item()
    assert 0.0 <= loss < 1e-30


def test_loss_ignores_padding_and_batch_matches_singles():
    torch.manual_seed(0)
    head = SRHead(SMALL).double().eval()
    m1, m2 = torch.randn(4, 8, dtype=torch.float64), torch.randn(6, 8, dtype=torch.float64)
    t1, t2 = (1, 2), (3, 0, 1)
    mem = torch.zeros(2, 6, 8, dtype=torch.float64)
    mem[0, :4], mem[1] = m1, m2
    per_tok = head.nll_loss(mem, [t1, t2], torch.tensor([4, 6]), reduction="none")
    s1 = head.nll_loss(m1, t1, reduction="sum").item()
    s2 = head.nll_loss(m2, t2, reduction="sum").item()
    assert per_tok[0, :3].sum().item() == pytest.approx(s1, abs=1e-10)
    assert per_tok[1].sum().item() == pytest.approx(s2, abs=1e-10)
    mean = head.nll_loss(mem, [t1, t2], torch.tensor([4, 6])).item()
    assert mean == pytest.approx((s1 + s2) / 7, abs=1e-10)


def test_greedy_on_argmax_chain():
    table = {(): 2, (2,): 3, (2, 3): 0}

    def fn(prefixes):
        rows = []
        for p in prefixes:
            row = np.full(4, -10.0)
            row[table[tuple(p[1:])]] = 0.0
            rows.append(row)
        return np.array(rows)

    h = greedy_search(fn, 5, bos=9, eos=0)
    assert h.ids == (2, 3, 0)
    assert beam_search(fn, 1, 5, bos=9, eos=0).ids == (2, 3, 0)


@pytest.mark.parametrize("seed", range(20))
def test_beam_one_is_greedy(seed):
    fn = toy_step_fn(5, seed)
    g = greedy_search(fn, 4, bos=9, eos=0)
    b = beam_search(fn, 1, 4, bos=9, eos=0)
    assert g.ids == b.ids and g.logprob == pytest.approx(b.logprob, abs=1e-12)


@pytest.mark.parametrize("vocab,max_len", [(2, 4), (3, 3), (4, 4), (5, 3), (5, 4)])
def test_full_width_beam_equals_brute_force(vocab, max_len):
    for seed in range(5):
        fn = toy_step_fn(vocab, seed)
        best = brute_force_best(fn, max_len, range(vocab), bos=9, eos=0)
        beam = beam_search(fn, vocab ** max_len, max_len, bos=9, eos=0)
        assert beam.ids == best.ids
        assert beam.score == pytest.approx(best.score, abs=1e-12)


def test_brute_force_enumerates_everything():
    # every sequence either ends in EOS or hits max_len; count them through a counting step_fn
    seen = []

    def fn(prefixes):
        seen.extend(prefixes)
        return np.zeros((len(prefixes), 3))

    brute_force_best(fn, 3, range(3), bos=9, eos=0)
    # internal prefixes: () + 2 non-EOS tokens + 4 two-token non-EOS prefixes
    assert len(seen) == 1 + 2 + 4
    assert set(seen) == {(9,) + p for n in range(3) for p in itertools.product((1, 2), repeat=n)}


def test_beam_size_validation():
    with pytest.raises(ConfigError):
        beam_search(toy_step_fn(3, 0), 0, 3)


def test_head_decode_and_greedy_batch_agree():
    torch.manual_seed(3)
    head = SRHead(SMALL).eval()
    mem = torch.randn(2, 6, 8)
    batch = head.greedy_batch(mem, torch.tensor([6, 6]))
    for i in range(2):
        h = head.decode(mem[i], beam_size=1)
        assert h.tokens == batch[i]
        assert all(t >= 0 for t in h.tokens)


def test_step_fn_masks_specials():
    head = SRHead(SMALL).eval()
    row = head.step_fn(torch.randn(4, 8))([(BOS,)])[0]
    assert row[PAD] == -np.inf and row[BOS] == -np.inf
    assert np.exp(row).sum() == pytest.approx(1.0)


def test_acoustic_stem_halves_rate():
    head = SRHead(SMALL)
    assert head.acoustic_features(torch.randn(2, 16, 8)).shape == (2, 8, 8)


def test_head_checkpoint_round_trip(tmp_path):
    head = SRHead(SMALL)
    save_head(tmp_path / "h.npz", head)
    back, ck = load_head(tmp_path / "h.npz")
    assert ck == checksum(head) == checksum(back)
    assert all(not p.requires_grad for p in back.parameters())


def test_head_checkpoint_without_checksum_is_refused(tmp_path):
    head = SRHead(SMALL)
    save_head(tmp_path / "h.npz", head)
    arrays, meta = load_checkpoint(tmp_path / "h.npz")
    del meta["checksum"]
    save_checkpoint(tmp_path / "bad.npz", arrays, meta)
    with pytest.raises(ArtifactIOError):
        load_head(tmp_path / "bad.npz")


def test_tampered_head_is_refused(tmp_path):
    head = SRHead(SMALL)
    save_head(tmp_path / "h.npz", head)
    arrays, meta = load_checkpoint(tmp_path / "h.npz")
    key = next(iter(arrays))
    arrays[key] = arrays[key] + 1.0
    save_checkpoint(tmp_path / "bad.npz", arrays, meta)
    with pytest.raises(ArtifactIOError):
        load_head(tmp_path / "bad.npz")


def test_decode_scores_are_canonical():
    torch.manual_seed(4)
    head = SRHead(SMALL).eval()
    mem = torch.randn(6, 8)
    h1, h3 = head.decode(mem, beam_size=1), head.decode(mem, beam_size=3)
    assert h1.logprob == head.sequence_logprob(mem, h1.ids)
    if h1.ids == h3.ids:
        assert h1.score == h3.score
    else:
        assert h3.score >= h1.score - 1e-6
    # the canonical pass agrees with the incremental search scores up to float32 noise
    raw = beam_search(head.step_fn(mem), 3, SMALL.max_len)
    assert raw.logprob == pytest.approx(h3.logprob, abs=1e-4)

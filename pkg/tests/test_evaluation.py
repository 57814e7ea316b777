import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from avsync.errors import ArtifactIOError, ConfigError, MetricError, MissingArtifactError
from avsync.evaluation import (
    EvalConditions,
    EvalReport,
    append_result,
    corpus_wer,
    diagonal_dominance,
    edit_distance,
    heatmap_export,
    heatmap_image,
    noisy_samples,
    read_heatmap_csv,
    run_task,
    sync_auc,
    sync_pair_set,
    wer,
)


def pairwise_auc(scores, labels):
    """Oracle: fraction of (positive, negative) pairs ordered correctly, ties count 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def brute_edit_distance(a, b):
    """Oracle by recursion over the three edit operations."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(brute_edit_distance(a[1:], b) + 1, brute_edit_distance(a, b[1:]) + 1,
               brute_edit_distance(a[1:], b[1:]) + (a[0] != b[0]))


# --------------------------------------------------------------------------- WER


def test_wer_examples():
    assert wer(("a", "b", "c"), ("a", "x", "c")) == pytest.approx(1 / 3)
    assert wer(("a", "b"), ()) == 1.0
    assert wer(("a",), ("a", "b", "c")) == 2.0
    assert wer(("<bos>", "a", "b", "<eos>"), ("a", "b", "<pad>")) == 0.0


def test_wer_empty_reference():
    with pytest.raises(MetricError):
        wer((), ("a",))
    with pytest.raises(MetricError):
        wer(("<eos>",), ())


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), max_size=6))
def test_edit_distance_matches_recursion(a, b):
    assert edit_distance(a, b) == brute_edit_distance(tuple(a), tuple(b))
    assert edit_distance(a, b) == edit_distance(b, a)


def test_corpus_wer_weights_by_length():
    refs = [(1, 2, 3, 4), (5,)]
    hyps = [(1, 2, 3, 4), ()]
    assert corpus_wer(refs, hyps) == pytest.approx(1 / 5)


# --------------------------------------------------------------------------- AUC


def test_auc_examples():
    assert sync_auc([0.9, 0.8, 0.3], [1, 0, 0]) == 1.0
    assert sync_auc([0.1, 0.8, 0.3], [1, 0, 0]) == 0.0
    assert sync_auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5


def test_auc_single_class():
    with pytest.raises(MetricError):
        sync_auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_matches_pair_count(rows):
    scores = [s / 2 for s, _ in rows]
    labels = [y for _, y in rows]
    if len(set(labels)) < 2:
        return
    assert sync_auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)
    # invariant under strictly increasing transforms
    assert sync_auc([math.exp(s) * 3 + 1 for s in scores], labels) == pytest.approx(sync_auc(scores, labels), abs=1e-12)


# --------------------------------------------------------------------------- diagonal dominance


def test_dominance_identity_and_constant():
    assert diagonal_dominance(np.eye(4), band=0) == pytest.approx(1.0)
    assert diagonal_dominance(np.full((5, 5), 0.3), band=1) == pytest.approx(0.0)


def test_dominance_band_semantics():
    S = np.zeros((4, 4))
    S[0, 1] = S[1, 0] = 1.0
    # with band 1 the two ones are in the band: mean over 10 band cells vs 6 off-band
    assert diagonal_dominance(S, band=1) == pytest.approx(2 / 10)
    assert diagonal_dominance(S, band=0) == pytest.approx(-2 / 12)


@pytest.mark.parametrize("S,band", [(np.zeros((3, 4)), 1), (np.zeros((4, 4)), -1), (np.zeros((4, 4)), 4),
                                    (np.zeros((4, 4)), 3)])
def test_dominance_invalid(S, band):
    with pytest.raises(ConfigError):
        diagonal_dominance(S, band)


def test_dominance_drops_under_shuffling():
    rng = np.random.default_rng(0)
    T = 16
    S = np.eye(T) * 0.8 + rng.uniform(-0.1, 0.1, (T, T))
    base = diagonal_dominance(S)
    shuffled = [diagonal_dominance(S[:, rng.permutation(T)]) for _ in range(200)]
    assert np.mean(shuffled) < base / 3
    assert sum(d < base for d in shuffled) >= 195


# --------------------------------------------------------------------------- heatmaps


def test_heatmap_round_trip(tmp_path):
    S = np.random.default_rng(1).uniform(-1, 1, (7, 7))
    out = heatmap_export(S, tmp_path / "hm")
    assert out["csv"].name == "hm.csv" and out["png"].exists() and out["figure"].exists()
    assert np.abs(read_heatmap_csv(out["csv"]) - S).max() <= 1e-6
    first = out["csv"].read_text().splitlines()[0]
    assert first.startswith("#") and "7x7" in first
    img = np.asarray(Image.open(out["png"]))
    assert img.dtype == np.uint8 and img.shape == (7, 7)
    assert np.array_equal(img, heatmap_image(S))


def test_heatmap_image_mapping():
    img = heatmap_image(np.array([[-1.0, 0.0, 1.0, 2.0, -3.0]]))
    assert img.tolist() == [[0, 128, 255, 255, 0]]
    S = np.random.default_rng(2).uniform(-1, 1, (5, 5))
    assert np.abs(heatmap_image(S).astype(float) - (S + 1) * 127.5).max() <= 0.5


def test_heatmap_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ArtifactIOError):
        heatmap_export(np.eye(3), blocker / "sub" / "hm", figure=False)


def test_heatmap_non_finite(tmp_path):
    with pytest.raises(ConfigError):
        heatmap_export(np.array([[np.nan]]), tmp_path / "hm")


# --------------------------------------------------------------------------- reports and task plumbing


def test_report_serialization(tmp_path):
    r = EvalReport("AVSR_noisy", "wer", 0.25, EvalConditions(snr_db=0.0, beam=3, checkpoint_id="abc"), baseline=0.5)
    d = r.to_dict()
    assert d["baseline"] == 0.5 and d["conditions"]["snr_db"] == 0.0 and d["conditions"]["checkpoint_id"] == "abc"
    clean = EvalReport("VSR", "wer", 0.1, EvalConditions()).to_dict()
    assert clean["conditions"]["snr_db"] == "clean" and "baseline" not in clean
    append_result(tmp_path / "r.jsonl", r)
    append_result(tmp_path / "r.jsonl", r)
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0]) == d


def test_sync_pair_set_balanced(tiny_corpus):
    pairs = sync_pair_set(tiny_corpus["test"] + tiny_corpus["val"], 1, 0)
    labels = [p.label for p in pairs]
    assert labels.count(1) == labels.count(0) > 0


def test_noisy_samples_keep_tokens(tiny_corpus):
    src = tiny_corpus["train"][:6]
    out = noisy_samples(src, 0.0, 0)
    assert [s.tokens for s in out] == [s.tokens for s in src]
    assert all(not np.array_equal(a.mel, b.mel) for a, b in zip(src, out))


def test_run_task_errors(tiny_model, tiny_head, tiny_corpus):
    head, _ = tiny_head
    samples = tiny_corpus["train"][:4]
    with pytest.raises(ConfigError):
        run_task("BOGUS", tiny_model, head, samples, EvalConditions())
    with pytest.raises(ConfigError):
        run_task("AVSR_noisy", tiny_model, head, samples, EvalConditions())
    with pytest.raises(MissingArtifactError):
        run_task("AVSR_clean", tiny_model, head, samples, EvalConditions())


@pytest.mark.parametrize("task,metric", [("VSR", "wer"), ("SYNC", "auc"), ("ASD_lite", "accuracy")])
def test_run_task_on_tiny_model(tiny_model, tiny_head, tiny_corpus, task, metric):
    head, _ = tiny_head
    samples = tiny_corpus["train"][:8]
    rep = run_task(task, tiny_model, head, samples, EvalConditions(beam=1, min_shift=1))
    assert rep.metric_name == metric and rep.value >= 0.0 and math.isfinite(rep.value)

"""WER scoring and the corpus evaluation loop with stub adapters."""

import csv
import dataclasses
import json
from functools import lru_cache

import numpy as np
import pytest
import torch

from accentconv.checkpoint import CheckpointError, save_checkpoint
from accentconv.evaluation import (
    AdapterFailure,
    edit_distance,
    evaluate_corpus,
    transcribe_adapter,
    wer,
)
from accentconv.features import save_wav, Waveform
from accentconv.model import AccentConverter
from accentconv.textnorm import normalized_words


# ------------------------------------------------------------ edit distance


@pytest.mark.parametrize("ref,hyp,expected", [
    ("the cat sat", "the cat sat", 0),
    ("the cat sat", "the dog sat", 1),
    ("the cat sat", "the cat", 1),
    ("the cat", "the black cat", 1),
    ("", "", 0),
    ("a b c d", "", 4),
    ("", "a b", 2),
    ("a b c d", "b c d e", 2),
    ("x x x", "y y y y", 4),
])
def test_edit_distance_examples(ref, hyp, expected):
    assert edit_distance(ref.split(), hyp.split()) == expected


def test_edit_distance_characters():
    # the textbook example, tokenized by character
    assert edit_distance(list("kitten"), list("sitting")) == 3


def reference_distance(ref: tuple, hyp: tuple) -> int:
    """Independent memoized recursion used as a scoring oracle."""

    @lru_cache(maxsize=None)
    def d(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]),
            d(i - 1, j) + 1,
            d(i, j - 1) + 1,
        )

    return d(len(ref), len(hyp))


def test_edit_distance_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(17)
    symbols = ["a", "b", "c", "d"]
    for _ in range(200):
        ref = tuple(rng.choice(symbols, size=rng.integers(0, 8)))
        hyp = tuple(rng.choice(symbols, size=rng.integers(0, 8)))
        assert edit_distance(list(ref), list(hyp)) == reference_distance(ref, hyp)


def test_edit_distance_symmetry_and_bounds():
    rng = np.random.default_rng(23)
    symbols = ["x", "y", "z"]
    for _ in range(100):
        a = list(rng.choice(symbols, size=rng.integers(0, 6)))
        b = list(rng.choice(symbols, size=rng.integers(0, 6)))
        d = edit_distance(a, b)
        assert d == edit_distance(b, a)
        assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))


# -------------------------------------------------------------------- wer


def test_wer_examples():
    assert wer("a b c d".split(), "a b c d".split()) == 0.0
    assert wer("a b c d".split(), "a x c d".split()) == 0.25
    assert wer("a b".split(), "a b c d".split()) == 1.0  # insertions only
    assert wer("a b".split(), "x y z w".split()) == 2.0  # can exceed 1


def test_wer_empty_rules():
    assert wer([], []) == 0.0
    with pytest.raises(ValueError, match="WER undefined"):
        wer([], ["something"])


# ------------------------------------------------------------ asr adapter


@pytest.fixture()
def wav_file(tmp_path):
    path = tmp_path / "utt_x.wav"
    save_wav(path, Waveform(np.zeros(800, dtype=np.float32), 8000))
    return path


def test_transcribe_requires_command(wav_file):
    with pytest.raises(ValueError, match="no ASR adapter configured"):
        transcribe_adapter(wav_file, "")


def test_transcribe_stub_lookup(adapters, wav_file):
    cmd = adapters.asr({"utt_x": "hello accent world"}, name="t1.json")
    assert transcribe_adapter(wav_file, cmd) == "hello accent world"


def test_transcribe_unknown_utterance(adapters, wav_file):
    cmd = adapters.asr({"other": "hi"}, name="t2.json")
    with pytest.raises(AdapterFailure, match="exited 3.*unknown utterance"):
        transcribe_adapter(wav_file, cmd)


def test_transcribe_failure_surfaces_stderr(adapters, wav_file):
    with pytest.raises(AdapterFailure, match="exited 2.*adapter exploded"):
        transcribe_adapter(wav_file, adapters.fail)


def test_transcribe_rejects_empty_output(adapters, wav_file):
    cmd = adapters.asr({"utt_x": ""}, name="t3.json")
    with pytest.raises(AdapterFailure, match="empty transcript"):
        transcribe_adapter(wav_file, cmd)


# --------------------------------------------------------- corpus evaluation


@pytest.fixture(scope="module")
def eval_ckpt(toy_corpus, tmp_path_factory):
    """Untrained stage-2 checkpoint: evaluation mechanics don't need quality."""
    torch.manual_seed(31)
    model = AccentConverter(toy_corpus.model_cfg)
    path = tmp_path_factory.mktemp("eval_ckpt") / "stage2.ckpt"
    save_checkpoint(path, model, toy_corpus.cfg, 5, 2, ["stage1", "stage2"])
    return path


def perfect_asr(adapters, records, name):
    return adapters.asr({r.utt_id: r.text for r in records}, name=name)


def test_evaluate_corpus_perfect_transcripts(toy_corpus, eval_ckpt, adapters,
                                             tmp_path):
    records = toy_corpus.splits["test"][:4]
    asr_cmd = perfect_asr(adapters, records, "perfect.json")
    report = evaluate_corpus(records, eval_ckpt, toy_corpus.cfg, tmp_path,
                             asr_cmd=asr_cmd, vocoder_cmd=adapters.vocoder)
    assert report["n_utterances"] == 4
    assert report["n_scored"] == 4
    assert report["corpus_wer"] == 0.0
    assert report["failures"] == []
    assert report["checkpoint_stage"] == 2
    assert report["checkpoint_lineage"] == ["stage1", "stage2"]
    assert report["alignment_distance_mean"] is not None
    assert report["alignment_distance_mean"] > 0  # untrained model
    for spk, agg in report["per_speaker"].items():
        assert agg["wer"] == 0.0
        assert agg["words"] > 0

    # artifacts: report + delimited scores + figures
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk == report
    with open(tmp_path / "utterances.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert {r["utt_id"] for r in rows} == {r.utt_id for r in records}
    assert all(float(r["wer"]) == 0.0 for r in rows)
    figures = sorted(p.name for p in (tmp_path / "figures").iterdir())
    assert "wer_per_speaker.png" in figures
    assert any(name.startswith("mel_") for name in figures)
    # converted mels and vocoded wavs are kept for listening
    assert len(list((tmp_path / "mels").glob("*.acft"))) == 4
    assert len(list((tmp_path / "wavs").glob("*.wav"))) == 4


def test_evaluate_corpus_error_weighted_wer(toy_corpus, eval_ckpt, adapters,
                                            tmp_path):
    records = toy_corpus.splits["test"][:3]
    mapping = {}
    planted = {}
    for rec, k in zip(records, (2, 1, 0)):
        words = normalized_words(rec.text)
        assert len(words) >= k
        hyp = ["zzz"] * k + words[k:]  # k substitutions
        mapping[rec.utt_id] = " ".join(hyp)
        planted[rec.utt_id] = (k, len(words))
    asr_cmd = adapters.asr(mapping, name="planted.json")
    report = evaluate_corpus(records, eval_ckpt, toy_corpus.cfg, tmp_path,
                             asr_cmd=asr_cmd, vocoder_cmd=adapters.vocoder,
                             make_figures=False)
    total_errors = sum(k for k, _ in planted.values())
    total_words = sum(n for _, n in planted.values())
    assert report["n_scored"] == 3
    # corpus WER pools errors over words, it is not a mean of rates
    assert report["corpus_wer"] == pytest.approx(total_errors / total_words)
    rates = {r["utt_id"]: float(r["wer"])
             for r in csv.DictReader(open(tmp_path / "utterances.csv", newline=""))}
    for utt_id, (k, n) in planted.items():
        assert rates[utt_id] == pytest.approx(k / n, abs=5e-5)
    # speaker aggregation pools the same counts
    total_by_speaker = sum(agg["errors"] for agg in report["per_speaker"].values())
    assert total_by_speaker == total_errors


def test_evaluate_corpus_records_vocoder_failures(toy_corpus, eval_ckpt,
                                                  adapters, tmp_path):
    records = toy_corpus.splits["test"][:2]
    asr_cmd = perfect_asr(adapters, records, "vf.json")
    report = evaluate_corpus(records, eval_ckpt, toy_corpus.cfg, tmp_path,
                             asr_cmd=asr_cmd, vocoder_cmd=adapters.fail,
                             make_figures=False)
    assert report["n_scored"] == 0
    assert report["corpus_wer"] is None
    assert len(report["failures"]) == 2
    assert all(f["step"] == "vocoder" for f in report["failures"])
    assert all("adapter exploded" in f["error"] for f in report["failures"])


def test_evaluate_corpus_records_asr_failures_and_continues(
        toy_corpus, eval_ckpt, adapters, tmp_path):
    records = toy_corpus.splits["test"][:3]
    # mapping covers all but the first utterance
    mapping = {r.utt_id: r.text for r in records[1:]}
    asr_cmd = adapters.asr(mapping, name="partial.json")
    report = evaluate_corpus(records, eval_ckpt, toy_corpus.cfg, tmp_path,
                             asr_cmd=asr_cmd, vocoder_cmd=adapters.vocoder,
                             make_figures=False)
    assert report["n_scored"] == 2
    assert len(report["failures"]) == 1
    failure = report["failures"][0]
    assert failure["utt_id"] == records[0].utt_id
    assert failure["step"] == "asr"


def test_evaluate_corpus_records_feature_failures(toy_corpus, eval_ckpt,
                                                  adapters, tmp_path):
    records = [dataclasses.replace(r) for r in toy_corpus.splits["test"][:2]]
    records[0].mel_path = str(tmp_path / "missing.acft")
    asr_cmd = perfect_asr(adapters, toy_corpus.splits["test"][:2], "ff.json")
    report = evaluate_corpus(records, eval_ckpt, toy_corpus.cfg, tmp_path,
                             asr_cmd=asr_cmd, vocoder_cmd=adapters.vocoder,
                             make_figures=False)
    assert report["n_scored"] == 1
    assert report["failures"][0]["step"] == "features"
    assert report["failures"][0]["utt_id"] == records[0].utt_id


def test_evaluate_corpus_requires_adapters(toy_corpus, eval_ckpt, tmp_path):
    records = toy_corpus.splits["test"][:1]
    with pytest.raises(ValueError, match="no vocoder configured"):
        evaluate_corpus(records, eval_ckpt, toy_corpus.cfg, tmp_path,
                        asr_cmd="whatever", vocoder_cmd="")
    with pytest.raises(ValueError, match="no ASR adapter configured"):
        evaluate_corpus(records, eval_ckpt, toy_corpus.cfg, tmp_path,
                        asr_cmd="", vocoder_cmd="whatever")


def test_evaluate_corpus_refuses_tts_checkpoint(toy_corpus, adapters, tmp_path):
    torch.manual_seed(32)
    model = AccentConverter(toy_corpus.model_cfg)
    path = tmp_path / "stage1.ckpt"
    save_checkpoint(path, model, toy_corpus.cfg, 5, 1, ["stage1"])
    with pytest.raises(CheckpointError, match="no aligned speech encoder"):
        evaluate_corpus(toy_corpus.splits["test"][:1], path, toy_corpus.cfg,
                        tmp_path, asr_cmd="x", vocoder_cmd="y")


def test_evaluate_corpus_no_figures_flag(toy_corpus, eval_ckpt, adapters,
                                         tmp_path):
    records = toy_corpus.splits["test"][:1]
    asr_cmd = perfect_asr(adapters, records, "nf.json")
    evaluate_corpus(records, eval_ckpt, toy_corpus.cfg, tmp_path,
                    asr_cmd=asr_cmd, vocoder_cmd=adapters.vocoder,
                    make_figures=False)
    assert not (tmp_path / "figures").exists()
    assert (tmp_path / "report.json").exists()

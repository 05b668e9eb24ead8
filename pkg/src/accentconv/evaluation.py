"""Objective evaluation: WER through external vocoder + ASR adapters, plus
alignment diagnostics mirroring the training losses.

The ASR adapter contract is ``<cmd> WAV_PATH`` printing the transcript on
stdout. Per-utterance adapter failures are recorded in the report and the
run continues; only configuration errors abort.
"""

import csv
import json
import subprocess
import shlex
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .data import load_utterance_features
from .features import AcousticFeatures
from .inference import convert, export_mel, invoke_vocoder_adapter, load_converter
from .textnorm import normalized_words
from .training import embedding_distance

STDERR_EXCERPT = 400


class AdapterFailure(RuntimeError):
    """An external adapter (ASR) failed for one utterance."""


def edit_distance(reference: list, hypothesis: list) -> int:
    """Minimal substitutions + insertions + deletions turning reference
    into hypothesis (unit costs)."""
    n, m = len(reference), len(hypothesis)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        for j in range(1, m + 1):
            sub = prev[j - 1] + (reference[i - 1] != hypothesis[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[m]


def wer(reference: list, hypothesis: list) -> float:
    """(S + I + D) / len(reference). Empty reference is 0 only against an
    empty hypothesis; otherwise the rate is undefined."""
    if not reference:
        if not hypothesis:
            return 0.0
        raise ValueError("WER undefined: empty reference with non-empty hypothesis")
    return edit_distance(reference, hypothesis) / len(reference)


def transcribe_adapter(audio_path, adapter_cmd: str) -> str:
    """Run the external recognizer and return its stdout transcript."""
    if not adapter_cmd or not adapter_cmd.strip():
        raise ValueError("no ASR adapter configured (set eval.asr_cmd)")
    argv = shlex.split(adapter_cmd) + [str(audio_path)]
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        excerpt = (proc.stderr or proc.stdout or "").strip()[-STDERR_EXCERPT:]
        raise AdapterFailure(
            f"ASR adapter exited {proc.returncode}: {excerpt or '(no output)'}"
        )
    transcript = proc.stdout.strip()
    if not transcript:
        raise AdapterFailure("ASR adapter produced an empty transcript")
    return transcript


@dataclass
class UtteranceScore:
    utt_id: str
    speaker: str
    ref_words: int
    errors: int
    wer: float
    transcript: str


@dataclass
class Failure:
    utt_id: str
    step: str  # "features" | "convert" | "vocoder" | "asr" | "score"
    error: str


def _alignment_distance(model, feats: AcousticFeatures, phone_ids, durations) -> float:
    """Mean per-frame distance between speech-encoder states and the
    length-regulated text states for one utterance."""
    t = feats.n_frames
    with torch.no_grad():
        mask = torch.ones(1, t, dtype=torch.bool)
        phone_mask = torch.ones(1, len(phone_ids), dtype=torch.bool)
        ids = torch.from_numpy(np.asarray(phone_ids, dtype=np.int64)).unsqueeze(0)
        dur = torch.from_numpy(np.asarray(durations, dtype=np.int64)).unsqueeze(0)
        h_t, reg_mask = model.length_regulator(
            model.text_encoder(ids, phone_mask), dur, phone_mask)
        if h_t.size(1) != t:
            raise ValueError(f"durations sum {h_t.size(1)} != frames {t}")
        h_s = model.encode_speech(
            torch.from_numpy(feats.frames).unsqueeze(0), mask, feats.source_kind)
        return float(embedding_distance(h_t, h_s, mask))


def evaluate_corpus(records: list, checkpoint_path, cfg: Config, out_dir,
                    asr_cmd: str | None = None, vocoder_cmd: str | None = None,
                    make_figures: bool = True) -> dict:
    """Convert, vocode, and transcribe every record; aggregate WER.

    Corpus WER is total errors over total reference words (error-weighted,
    not a mean of per-utterance rates). Returns the report dict and writes
    ``report.json`` plus ``utterances.csv`` (and figures) under `out_dir`.
    """
    out_dir = Path(out_dir)
    (out_dir / "mels").mkdir(parents=True, exist_ok=True)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    asr_cmd = cfg.eval.asr_cmd if asr_cmd is None else asr_cmd
    vocoder_cmd = cfg.eval.vocoder_cmd if vocoder_cmd is None else vocoder_cmd
    if not (vocoder_cmd and vocoder_cmd.strip()):
        raise ValueError("no vocoder configured (set eval.vocoder_cmd or --vocoder)")
    if not (asr_cmd and asr_cmd.strip()):
        raise ValueError("no ASR adapter configured (set eval.asr_cmd or --asr)")

    loaded = load_converter(checkpoint_path)
    model, ckpt_cfg, meta = loaded

    scores: list[UtteranceScore] = []
    failures: list[Failure] = []
    align_dists: list[float] = []
    mels_for_figures: list[tuple[str, np.ndarray]] = []

    for rec in records:
        try:
            feats = load_utterance_features(rec, ckpt_cfg)
        except Exception as exc:
            failures.append(Failure(rec.utt_id, "features", str(exc)))
            continue
        source = AcousticFeatures(
            feats.features, ckpt_cfg.features.kind,
            ckpt_cfg.mel.sample_rate_hz / ckpt_cfg.mel.hop_length)
        try:
            mel = convert(source, rec.speaker_id, loaded)
        except Exception as exc:
            failures.append(Failure(rec.utt_id, "convert", str(exc)))
            continue
        mel_path = out_dir / "mels" / f"{rec.utt_id}.acft"
        export_mel(mel, mel_path)
        if len(mels_for_figures) < cfg.eval.max_mel_figures:
            mels_for_figures.append((rec.utt_id, mel.frames))
        if len(feats.phone_ids):
            try:
                align_dists.append(_alignment_distance(
                    model, source, feats.phone_ids, feats.durations))
            except ValueError as exc:
                failures.append(Failure(rec.utt_id, "features", str(exc)))

        wav_path = out_dir / "wavs" / f"{rec.utt_id}.wav"
        try:
            invoke_vocoder_adapter(mel_path, vocoder_cmd, wav_path)
        except (ValueError, RuntimeError) as exc:
            failures.append(Failure(rec.utt_id, "vocoder", str(exc)))
            continue
        try:
            transcript = transcribe_adapter(wav_path, asr_cmd)
        except (ValueError, AdapterFailure) as exc:
            failures.append(Failure(rec.utt_id, "asr", str(exc)))
            continue
        ref = normalized_words(rec.text)
        hyp = normalized_words(transcript)
        try:
            rate = wer(ref, hyp)
        except ValueError as exc:
            failures.append(Failure(rec.utt_id, "score", str(exc)))
            continue
        scores.append(UtteranceScore(
            utt_id=rec.utt_id, speaker=rec.speaker, ref_words=len(ref),
            errors=edit_distance(ref, hyp), wer=rate, transcript=transcript))

    total_words = sum(s.ref_words for s in scores)
    total_errors = sum(s.errors for s in scores)
    per_speaker: dict[str, dict] = {}
    for s in scores:
        agg = per_speaker.setdefault(s.speaker, {"errors": 0, "words": 0})
        agg["errors"] += s.errors
        agg["words"] += s.ref_words
    report = {
        "checkpoint": str(checkpoint_path),
        "checkpoint_stage": meta["stage"],
        "checkpoint_lineage": meta.get("lineage", []),
        "n_utterances": len(records),
        "n_scored": len(scores),
        "corpus_wer": (total_errors / total_words) if total_words else None,
        "per_speaker": {
            spk: {
                "wer": agg["errors"] / agg["words"] if agg["words"] else None,
                "errors": agg["errors"],
                "words": agg["words"],
            }
            for spk, agg in sorted(per_speaker.items())
        },
        "alignment_distance_mean":
            float(np.mean(align_dists)) if align_dists else None,
        "failures": [asdict(f) for f in failures],
    }

    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2), encoding="utf-8")
    with open(out_dir / "utterances.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["utt_id", "speaker", "ref_words", "errors", "wer",
                         "transcript"])
        for s in scores:
            writer.writerow([s.utt_id, s.speaker, s.ref_words, s.errors,
                             f"{s.wer:.4f}", s.transcript])

    if make_figures:
        from . import plotting
        figure_dir = out_dir / "figures"
        if per_speaker:
            plotting.save_wer_bars(
                {spk: agg["errors"] / agg["words"]
                 for spk, agg in per_speaker.items() if agg["words"]},
                figure_dir / "wer_per_speaker.png")
        for utt_id, mel in mels_for_figures:
            plotting.save_mel_figure(mel, figure_dir / f"mel_{utt_id}.png",
                                     title=utt_id)
    return report

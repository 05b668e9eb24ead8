"""Corpus preprocessing: feature extraction into a content-addressed cache.

Each utterance's cache entry carries a hash of everything that went into it
(audio bytes, transcript, aligner durations, lexicon, feature config); reruns
recompute only entries whose hash is stale or whose output files fail to
load. Out-of-vocabulary words abort the run up front, listing every missing
word once.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import acft
from .config import Config, ConfigError, PRETRAINED_GROUP
from .data import (ManifestError, UtteranceRecord, build_manifest,
                   save_manifest, split_manifest)
from .features import (Lexicon, compute_mel, extract_prosody, load_durations,
                       load_wav, text_to_phones)
from .textnorm import normalized_words


@dataclass
class PreprocessResult:
    manifest_path: Path
    split_paths: dict
    n_processed: int
    n_skipped: int


def _feature_digest(cfg: Config, lexicon_bytes: bytes) -> str:
    payload = yaml.safe_dump(
        {"mel": cfg.to_dict()["mel"], "features": cfg.to_dict()["features"]},
        sort_keys=True).encode()
    return hashlib.sha256(payload + lexicon_bytes).hexdigest()


def _entry_hash(record: UtteranceRecord, feature_digest: str) -> str:
    h = hashlib.sha256(feature_digest.encode())
    h.update(Path(record.audio_path).read_bytes())
    h.update(record.text.encode("utf-8"))
    if record.durations_path:
        h.update(Path(record.durations_path).read_bytes())
    return h.hexdigest()


def _outputs_valid(paths: dict) -> bool:
    try:
        for key in ("mel", "pitch", "energy"):
            acft.read_tensor(paths[key])
        phones = json.loads(Path(paths["phones"]).read_text(encoding="utf-8"))
        return "phone_ids" in phones and "durations" in phones
    except (KeyError, OSError, ValueError):
        return False


def check_vocabulary(records, lexicon: Lexicon) -> None:
    missing = sorted({
        word
        for rec in records
        for word in normalized_words(rec.text)
        if word not in lexicon.entries
    })
    if missing:
        raise ManifestError(
            "out-of-vocabulary words (add them to the lexicon): "
            + ", ".join(missing)
        )


def preprocess_utterance(record: UtteranceRecord, cfg: Config,
                         lexicon: Lexicon, cache_dir: Path,
                         feature_digest: str) -> tuple[UtteranceRecord, bool]:
    """Extract (or reuse) one utterance's features; returns the record with
    cache paths filled in and whether work was skipped."""
    paths = {
        "mel": cache_dir / f"{record.utt_id}.mel.acft",
        "pitch": cache_dir / f"{record.utt_id}.pitch.acft",
        "energy": cache_dir / f"{record.utt_id}.energy.acft",
        "phones": cache_dir / f"{record.utt_id}.phones.json",
    }
    meta_path = cache_dir / f"{record.utt_id}.meta.json"
    entry_hash = _entry_hash(record, feature_digest)

    skipped = False
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except ValueError:
            meta = {}
        if meta.get("hash") == entry_hash and _outputs_valid(paths):
            skipped = True

    if not skipped:
        wave = load_wav(record.audio_path)
        if wave.sample_rate_hz != cfg.mel.sample_rate_hz:
            raise ManifestError(
                f"{record.utt_id}: sample rate {wave.sample_rate_hz} != "
                f"configured {cfg.mel.sample_rate_hz}"
            )
        mel = compute_mel(wave, cfg.mel)
        prosody = extract_prosody(wave, cfg.mel, cfg.features)
        phones = text_to_phones(record.text, lexicon,
                                speaker_id=record.speaker_id)
        if not record.durations_path:
            raise ManifestError(
                f"{record.utt_id}: no duration file; training needs "
                "forced-aligner durations (<stem>.dur next to the wav)"
            )
        durations = load_durations(record.durations_path, len(phones),
                                   mel.n_frames,
                                   tolerance=cfg.features.duration_tolerance)
        acft.write_tensor(paths["mel"], mel.frames)
        acft.write_tensor(paths["pitch"], prosody.pitch)
        acft.write_tensor(paths["energy"], prosody.energy)
        paths["phones"].write_text(json.dumps({
            "utt_id": record.utt_id,
            "phone_ids": [int(p) for p in phones.phone_ids],
            "durations": [int(d) for d in durations],
            "n_frames": mel.n_frames,
        }), encoding="utf-8")
        meta_path.write_text(json.dumps({
            "hash": entry_hash,
            "files": {k: str(v) for k, v in paths.items()},
        }), encoding="utf-8")

    record.mel_path = str(paths["mel"])
    record.pitch_path = str(paths["pitch"])
    record.energy_path = str(paths["energy"])
    record.phones_path = str(paths["phones"])
    if cfg.features.kind == PRETRAINED_GROUP and not record.pretrained_path:
        raise ManifestError(
            f"{record.utt_id}: features.kind is 'pretrained' but no "
            "<stem>.pre.acft file was found next to the wav"
        )
    return record, skipped


def resolve_cache_dir(cfg: Config, corpus_root=None) -> Path:
    root = corpus_root or cfg.data.corpus_root
    if cfg.data.cache_dir:
        return Path(cfg.data.cache_dir)
    if not root:
        raise ConfigError("data.corpus_root is not set")
    return Path(root) / "cache"


def preprocess_corpus(cfg: Config, corpus_root=None,
                      cache_dir=None) -> PreprocessResult:
    root = Path(corpus_root or cfg.data.corpus_root)
    if not str(root) or str(root) == ".":
        raise ConfigError("data.corpus_root is not set")
    cache = Path(cache_dir) if cache_dir else resolve_cache_dir(cfg, root)
    cache.mkdir(parents=True, exist_ok=True)

    if not cfg.features.lexicon_path:
        raise ConfigError("features.lexicon_path is not set")
    lexicon = Lexicon.load(cfg.features.lexicon_path)
    records = build_manifest(root)
    check_vocabulary(records, lexicon)

    digest = _feature_digest(cfg, Path(cfg.features.lexicon_path).read_bytes())
    n_processed = n_skipped = 0
    for record in records:
        try:
            _, skipped = preprocess_utterance(record, cfg, lexicon, cache, digest)
        except (ManifestError, ConfigError):
            raise
        except ValueError as exc:
            raise ManifestError(f"{record.utt_id}: {exc}") from exc
        n_skipped += skipped
        n_processed += not skipped

    manifest_path = cache / "manifest.jsonl"
    save_manifest(records, manifest_path)

    train, val, test = split_manifest(records, cfg.data.n_train, cfg.data.n_val,
                                      cfg.data.n_test, cfg.data.split_seed)
    split_paths = {}
    for name, part in (("train", train), ("val", val), ("test", test)):
        path = cache / f"{name}.jsonl"
        save_manifest(part, path)
        split_paths[name] = path
    return PreprocessResult(manifest_path=manifest_path, split_paths=split_paths,
                            n_processed=n_processed, n_skipped=n_skipped)

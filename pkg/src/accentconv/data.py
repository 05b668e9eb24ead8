"""Corpus manifests, text-disjoint splits, and padded mini-batching."""

import json
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import acft
from .config import MEL_GROUP, Config
from .features import load_pretrained_features
from .textnorm import normalize_text

NATIVE = "native"
ACCENTED = "accented"

PAD_VALUE = 0.0


class ManifestError(ValueError):
    pass


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker: str
    speaker_id: int
    accent_tag: str  # "native" or "accented"
    text: str
    audio_path: str = ""
    mel_path: str = ""
    pretrained_path: str = ""
    durations_path: str = ""
    pitch_path: str = ""
    energy_path: str = ""
    phones_path: str = ""


def build_manifest(corpus_root) -> list[UtteranceRecord]:
    """Scan ``<root>/{native,accented}/<speaker>/`` for paired wav/txt files.

    A top level without the two accent directories is treated as all-native
    speaker directories. Any wav missing its txt (or vice versa) aborts with
    a report naming every broken pair.
    """
    root = Path(corpus_root)
    if not root.is_dir():
        raise ManifestError(f"corpus root {root} is not a directory")
    groups = []
    for tag in (NATIVE, ACCENTED):
        if (root / tag).is_dir():
            groups.append((tag, root / tag))
    if not groups:
        groups = [(NATIVE, root)]

    speakers = sorted(
        {d.name for _, base in groups for d in base.iterdir() if d.is_dir()}
    )
    speaker_ids = {name: i for i, name in enumerate(speakers)}

    records: list[UtteranceRecord] = []
    broken: list[str] = []
    for tag, base in groups:
        for spk_dir in sorted(d for d in base.iterdir() if d.is_dir()):
            stems = {p.stem for p in spk_dir.iterdir() if p.suffix in (".wav", ".txt")}
            for stem in sorted(stems):
                wav = spk_dir / f"{stem}.wav"
                txt = spk_dir / f"{stem}.txt"
                utt_id = f"{spk_dir.name}_{stem}"
                if not wav.exists() or not txt.exists():
                    missing = "txt" if wav.exists() else "wav"
                    broken.append(f"{utt_id}: missing {missing}")
                    continue
                pre = spk_dir / f"{stem}.pre.acft"
                dur = spk_dir / f"{stem}.dur"
                records.append(UtteranceRecord(
                    utt_id=utt_id,
                    speaker=spk_dir.name,
                    speaker_id=speaker_ids[spk_dir.name],
                    accent_tag=tag,
                    text=txt.read_text(encoding="utf-8").strip(),
                    audio_path=str(wav),
                    pretrained_path=str(pre) if pre.exists() else "",
                    durations_path=str(dur) if dur.exists() else "",
                ))
    if broken:
        raise ManifestError("unpaired corpus files:\n  " + "\n  ".join(broken))
    records.sort(key=lambda r: r.utt_id)
    seen = set()
    for r in records:
        if r.utt_id in seen:
            raise ManifestError(f"duplicate utt_id {r.utt_id}")
        seen.add(r.utt_id)
    return records


def save_manifest(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(asdict(r)) + "\n")


def load_manifest(path, check_files: bool = False) -> list[UtteranceRecord]:
    records = []
    seen = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = UtteranceRecord(**json.loads(line))
        if rec.utt_id in seen:
            raise ManifestError(f"duplicate utt_id {rec.utt_id} in {path}")
        seen.add(rec.utt_id)
        if check_files:
            for name in ("audio_path", "mel_path", "pretrained_path",
                         "durations_path", "pitch_path", "energy_path", "phones_path"):
                p = getattr(rec, name)
                if p and not Path(p).exists():
                    raise ManifestError(f"{rec.utt_id}: {name} {p} does not exist")
        records.append(rec)
    return records


def split_manifest(records, n_train: int, n_val: int, n_test: int, seed: int):
    """Per-speaker split with no normalized-text overlap between subsets.

    Distinct normalized texts are shuffled with the seeded generator and each
    text (all of its copies, across every speaker) is assigned to the first
    subset whose per-speaker quotas still have room. Deterministic for a
    fixed seed.
    """
    records = sorted(records, key=lambda r: r.utt_id)
    quota = (n_train, n_val, n_test)
    by_speaker = defaultdict(list)
    for r in records:
        by_speaker[r.speaker].append(r)
    need = sum(quota)
    short = {s: len(rs) for s, rs in by_speaker.items() if len(rs) < need}
    if short:
        detail = ", ".join(f"{s}={n}" for s, n in sorted(short.items()))
        raise ManifestError(
            f"insufficient utterances for a {n_train}/{n_val}/{n_test} split: {detail}"
        )

    by_text = defaultdict(list)
    for r in records:
        by_text[normalize_text(r.text)].append(r)
    texts = sorted(by_text)
    random.Random(seed).shuffle(texts)

    remaining = {s: list(quota) for s in by_speaker}
    subsets: tuple[list, list, list] = ([], [], [])
    for text in texts:
        copies = by_text[text]
        per_speaker = defaultdict(int)
        for r in copies:
            per_speaker[r.speaker] += 1
        for k in range(3):
            if all(remaining[s][k] >= c for s, c in per_speaker.items()):
                for s, c in per_speaker.items():
                    remaining[s][k] -= c
                subsets[k].extend(copies)
                break
    unfilled = {s: rem for s, rem in remaining.items() if any(rem)}
    if unfilled:
        detail = ", ".join(f"{s}={tuple(rem)}" for s, rem in sorted(unfilled.items()))
        raise ManifestError(f"could not fill split quotas (left unfilled): {detail}")
    return tuple(sorted(part, key=lambda r: r.utt_id) for part in subsets)


@dataclass
class UtteranceFeatures:
    """Everything one utterance contributes to a training batch."""

    utt_id: str
    speaker_id: int
    features: np.ndarray  # (T, D) model input frames
    mel_target: np.ndarray  # (T, n_mels)
    pitch: np.ndarray  # (T,)
    energy: np.ndarray  # (T,)
    phone_ids: np.ndarray  # (N,)
    durations: np.ndarray  # (N,) frames, sums to T
    text: str = ""


def load_utterance_features(record: UtteranceRecord, cfg: Config) -> UtteranceFeatures:
    """Materialize cached features for one record per the configured input kind."""
    mel = acft.read_tensor(record.mel_path)
    if cfg.features.kind == MEL_GROUP:
        feats = mel
    else:
        if not record.pretrained_path:
            raise ManifestError(f"{record.utt_id}: no pretrained feature file")
        feats = load_pretrained_features(
            record.pretrained_path, mel.shape[0], cfg.features.pretrained_dim
        ).frames
    pitch = acft.read_tensor(record.pitch_path)
    energy = acft.read_tensor(record.energy_path)
    phones = json.loads(Path(record.phones_path).read_text(encoding="utf-8"))
    return UtteranceFeatures(
        utt_id=record.utt_id,
        speaker_id=record.speaker_id,
        features=feats.astype(np.float32),
        mel_target=mel.astype(np.float32),
        pitch=pitch.astype(np.float32),
        energy=energy.astype(np.float32),
        phone_ids=np.asarray(phones["phone_ids"], dtype=np.int64),
        durations=np.asarray(phones["durations"], dtype=np.int64),
        text=record.text,
    )


@dataclass
class Batch:
    """Right-padded tensors plus boolean validity masks."""

    utt_ids: list
    features: torch.Tensor  # (B, T_max, D)
    feature_lengths: torch.Tensor  # (B,)
    phone_ids: torch.Tensor  # (B, N_max)
    phone_lengths: torch.Tensor  # (B,)
    durations: torch.Tensor  # (B, N_max)
    mel_targets: torch.Tensor  # (B, T_max, n_mels)
    pitch: torch.Tensor  # (B, T_max)
    energy: torch.Tensor  # (B, T_max)
    speaker_ids: torch.Tensor  # (B,)
    frame_mask: torch.Tensor  # (B, T_max) bool
    phone_mask: torch.Tensor  # (B, N_max) bool

    @property
    def size(self) -> int:
        return len(self.utt_ids)


def _pad_stack(arrays, max_len, pad_value):
    out = np.full((len(arrays), max_len) + arrays[0].shape[1:],
                  pad_value, dtype=arrays[0].dtype)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
    return torch.from_numpy(out)


def make_batch(items: list[UtteranceFeatures], pad_value: float = PAD_VALUE) -> Batch:
    if not items:
        raise ValueError("empty batch")
    dims = {it.features.shape[1] for it in items}
    if len(dims) != 1:
        raise ValueError(f"feature dim mismatch within batch: {sorted(dims)}")
    for it in items:
        if not (len(it.mel_target) == len(it.features) == len(it.pitch) == len(it.energy)):
            raise ValueError(f"{it.utt_id}: frame-aligned inputs have unequal lengths")
        if len(it.durations) and it.durations.sum() != len(it.features):
            raise ValueError(
                f"{it.utt_id}: durations sum {it.durations.sum()} != T {len(it.features)}"
            )
    t_lens = np.array([len(it.features) for it in items], dtype=np.int64)
    n_lens = np.array([len(it.phone_ids) for it in items], dtype=np.int64)
    t_max, n_max = int(t_lens.max()), int(max(n_lens.max(), 1))
    frame_mask = torch.from_numpy(np.arange(t_max)[None, :] < t_lens[:, None])
    phone_mask = torch.from_numpy(np.arange(n_max)[None, :] < n_lens[:, None])
    return Batch(
        utt_ids=[it.utt_id for it in items],
        features=_pad_stack([it.features for it in items], t_max, pad_value),
        feature_lengths=torch.from_numpy(t_lens),
        phone_ids=_pad_stack([it.phone_ids for it in items], n_max, 0),
        phone_lengths=torch.from_numpy(n_lens),
        durations=_pad_stack([it.durations for it in items], n_max, 0),
        mel_targets=_pad_stack([it.mel_target for it in items], t_max, pad_value),
        pitch=_pad_stack([it.pitch for it in items], t_max, pad_value),
        energy=_pad_stack([it.energy for it in items], t_max, pad_value),
        speaker_ids=torch.tensor([it.speaker_id for it in items], dtype=torch.long),
        frame_mask=frame_mask,
        phone_mask=phone_mask,
    )

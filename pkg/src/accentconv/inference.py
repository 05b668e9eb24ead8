"""Conversion: accented acoustic features -> speaker/prosody-enriched mel.

The text side of the network is never touched here; conversion runs the
speech encoder, variance adaptor, and decoder only, so no transcript is
needed. Output frame count always equals input frame count. Waveform
generation is delegated to an external vocoder behind a command-line
adapter contract: ``<cmd> MEL_ACFT_PATH OUT_WAV_PATH``.
"""

import shlex
import subprocess
from pathlib import Path

import numpy as np
import torch

from . import acft
from .checkpoint import CheckpointError, load_checkpoint
from .config import MEL_GROUP, PRETRAINED_GROUP, Config
from .features import (AcousticFeatures, ProsodyContours, compute_mel,
                       extract_prosody, load_wav)
from .model import AccentConverter

STDERR_EXCERPT = 400


def load_converter(path) -> tuple[AccentConverter, Config, dict]:
    """Load a checkpoint for conversion; TTS-only checkpoints are refused."""
    model, cfg, meta = load_checkpoint(path)
    if meta["stage"] not in (2, 3):
        raise CheckpointError(
            f"checkpoint {path} has stage tag {meta['stage']}: no aligned "
            "speech encoder (run stage 2 or 3 first)"
        )
    model.eval()
    return model, cfg, meta


def convert(features: AcousticFeatures, speaker_id: int, checkpoint,
            prosody: ProsodyContours | None = None) -> AcousticFeatures:
    """Convert one utterance's features to a mel in the target accent.

    `checkpoint` is a path or a (model, cfg, meta) triple from
    :func:`load_converter`. Pitch/energy are predicted by the model unless
    `prosody` supplies source contours to copy.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_converter(checkpoint)
    model, cfg, _ = checkpoint
    if features.source_kind != cfg.features.kind:
        raise ValueError(
            f"feature kind mismatch: input is {features.source_kind!r} but "
            f"the checkpoint was trained on {cfg.features.kind!r}"
        )
    t = features.n_frames
    if t == 0:
        raise ValueError("cannot convert an empty feature sequence")
    frames = torch.from_numpy(np.ascontiguousarray(features.frames, dtype=np.float32))
    mask = torch.ones(1, t, dtype=torch.bool)
    pitch = energy = None
    if prosody is not None:
        if len(prosody.pitch) != t or len(prosody.energy) != t:
            raise ValueError(
                f"prosody length {len(prosody.pitch)}/{len(prosody.energy)} "
                f"does not match {t} frames"
            )
        pitch = torch.from_numpy(prosody.pitch.astype(np.float32)).unsqueeze(0)
        energy = torch.from_numpy(prosody.energy.astype(np.float32)).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        out = model.forward_speech(
            frames.unsqueeze(0), mask, features.source_kind,
            torch.tensor([speaker_id], dtype=torch.long),
            pitch_target=pitch, energy_target=energy)
    mel = out.mel_after[0].cpu().numpy()
    if mel.shape[0] != t:
        raise RuntimeError(f"converter changed frame count: {t} -> {mel.shape[0]}")
    frame_rate = cfg.mel.sample_rate_hz / cfg.mel.hop_length
    return AcousticFeatures(mel.astype(np.float32), MEL_GROUP, frame_rate)


def input_features(path, cfg: Config, kind: str,
                   want_prosody: bool = False):
    """Build model-input features from a wav or an ACFT tensor file.

    Returns (AcousticFeatures, ProsodyContours|None). Pretrained features
    must come precomputed in a tensor file; prosody copying needs a wav.
    """
    path = Path(path)
    frame_rate = cfg.mel.sample_rate_hz / cfg.mel.hop_length
    if path.suffix.lower() == ".wav":
        if kind != MEL_GROUP:
            raise ValueError(
                "pretrained features cannot be computed from a wav here; "
                "pass the encoder's .acft output instead"
            )
        wave = load_wav(path)
        if wave.sample_rate_hz != cfg.mel.sample_rate_hz:
            raise ValueError(
                f"{path}: sample rate {wave.sample_rate_hz} != configured "
                f"{cfg.mel.sample_rate_hz}"
            )
        feats = compute_mel(wave, cfg.mel)
        pros = extract_prosody(wave, cfg.mel, cfg.features) if want_prosody else None
        return feats, pros
    if want_prosody:
        raise ValueError("prosody copying needs a wav input, got a tensor file")
    arr = acft.read_tensor(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a (T, D) tensor, got ndim {arr.ndim}")
    expected = cfg.mel.n_mels if kind == MEL_GROUP else cfg.features.pretrained_dim
    if arr.shape[1] != expected:
        raise ValueError(
            f"{path}: feature dim mismatch: got D={arr.shape[1]}, "
            f"{kind} expects {expected}"
        )
    return AcousticFeatures(arr, kind, frame_rate), None


def export_mel(mel: AcousticFeatures, path) -> Path:
    """Write a converted mel as an ACFT tensor."""
    if mel.n_frames == 0:
        raise ValueError("refusing to export a zero-length mel")
    if not np.all(np.isfinite(mel.frames)):
        raise ValueError("refusing to export a mel with non-finite values")
    acft.write_tensor(path, mel.frames)
    return Path(path)


def invoke_vocoder_adapter(mel_path, adapter_cmd: str, wav_path) -> Path:
    """Run the external vocoder: ``<adapter_cmd> MEL_PATH WAV_PATH``."""
    if not adapter_cmd or not adapter_cmd.strip():
        raise ValueError("no vocoder configured (set eval.vocoder_cmd or --vocoder)")
    argv = shlex.split(adapter_cmd) + [str(mel_path), str(wav_path)]
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        excerpt = (proc.stderr or proc.stdout or "").strip()[-STDERR_EXCERPT:]
        raise RuntimeError(
            f"vocoder adapter exited {proc.returncode}: {excerpt or '(no output)'}"
        )
    wav_path = Path(wav_path)
    if not wav_path.exists():
        raise RuntimeError("vocoder adapter exited 0 but wrote no wav file")
    return wav_path


def convert_file(checkpoint_path, input_path, speaker_id: int, kind: str,
                 out_path, vocoder_cmd: str = "",
                 copy_prosody: bool = False) -> dict:
    """Whole-file conversion as used by the command-line wrapper."""
    if kind not in (MEL_GROUP, PRETRAINED_GROUP):
        raise ValueError(f"features must be mel|pretrained, got {kind!r}")
    loaded = load_converter(checkpoint_path)
    _, cfg, meta = loaded
    feats, pros = input_features(input_path, cfg, kind, want_prosody=copy_prosody)
    mel = convert(feats, speaker_id, loaded, prosody=pros)
    export_mel(mel, out_path)
    info = {
        "input": str(input_path),
        "mel_path": str(out_path),
        "n_frames": mel.n_frames,
        "stage": meta["stage"],
        "wav_path": None,
    }
    if vocoder_cmd:
        wav_path = Path(out_path).with_suffix(".wav")
        invoke_vocoder_adapter(out_path, vocoder_cmd, wav_path)
        info["wav_path"] = str(wav_path)
    return info

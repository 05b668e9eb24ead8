"""Deterministic synthetic corpus for pipeline tests and smoke runs.

Four speakers (two per accent group) record the same small text pool. Each
phone renders as a fixed stack of sinusoids; accented speakers shift the
component frequencies and speak at a higher fundamental, giving the two
groups systematically different acoustics for identical texts. Waveform
lengths are chosen so the scripted per-token durations sum exactly to the
mel frame count, and a low-rate per-phone embedding track stands in for an
external pretrained encoder.
"""

import dataclasses
from pathlib import Path

import numpy as np

from . import acft
from .config import (Config, DataConfig, EvalConfig, FeatureConfig, MelConfig,
                     ModelConfig, StageConfig, TrainingConfig)
from .features import BOUNDARY_ID, Lexicon, Waveform, save_wav, text_to_phones

SAMPLE_RATE = 8000
HOP = 100
PRETRAINED_DIM = 16
PRETRAINED_RATE_FACTOR = 0.75  # pretrained frames per mel frame

PHONE_TONES = {
    "AA": (220.0, 880.0),
    "EE": (330.0, 1320.0),
    "OO": (440.0, 1760.0),
    "KK": (550.0, 2200.0),
    "SS": (660.0, 2640.0),
    "TT": (770.0, 3080.0),
}

WORDS = {
    "ba": ["KK", "AA"],
    "ko": ["KK", "OO"],
    "se": ["SS", "EE"],
    "ta": ["TT", "AA"],
    "eke": ["EE", "KK", "EE"],
    "oso": ["OO", "SS", "OO"],
    "tee": ["TT", "EE"],
    "kasa": ["KK", "AA", "SS", "AA"],
}

TEXTS = [
    "ba ko",
    "se ta",
    "eke oso",
    "ba se ta",
    "ko tee",
    "kasa ba",
    "oso se",
    "tee eke",
    "ta kasa",
    "ko ba se",
    "eke tee ko",
    "oso ta ba",
]

SPEAKERS = {
    # name -> (accent tag, fundamental Hz, formant shift)
    "nat_a": ("native", 115.0, 1.0),
    "nat_b": ("native", 135.0, 1.0),
    "acc_a": ("accented", 175.0, 1.18),
    "acc_b": ("accented", 195.0, 1.18),
}

BOUNDARY_FRAMES = 3


def toy_mel_config() -> MelConfig:
    return MelConfig(sample_rate_hz=SAMPLE_RATE, n_fft=512, win_length=400,
                     hop_length=HOP, n_mels=40, fmin_hz=0.0, fmax_hz=4000.0)


def toy_config(root) -> Config:
    """Full run configuration sized for the synthetic corpus."""
    root = Path(root)
    stage_kw = dict(batch_size=8)
    return Config(
        mel=toy_mel_config(),
        features=FeatureConfig(kind="mel", pretrained_dim=PRETRAINED_DIM,
                               lexicon_path=str(root / "lexicon.txt")),
        model=ModelConfig(
            hidden_dim=64, n_heads=2, encoder_blocks=2, decoder_blocks=2,
            ffn_hidden=128, n_mels=40, pretrained_dim=PRETRAINED_DIM,
            variance_hidden=64, pitch_bins=32, energy_bins=32,
            postnet_layers=3, postnet_channels=64, max_frames=512),
        data=DataConfig(corpus_root=str(root), n_train=8, n_val=2, n_test=2,
                        split_seed=7),
        training=TrainingConfig(
            seed=1234, log_every=10, val_every=100,
            stage1=StageConfig(stage=1, max_steps=3000, dataset="native",
                               **stage_kw),
            stage2=StageConfig(stage=2, max_steps=1200, dataset="native",
                               **stage_kw),
            stage3=StageConfig(stage=3, max_steps=600, schedule="constant",
                               constant_lr=1e-4, dataset="accented",
                               **stage_kw),
        ),
        eval=EvalConfig(max_mel_figures=2),
    )


def _phone_embedding(phone_id: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7777, phone_id])
    return rng.normal(0.0, 1.0, PRETRAINED_DIM).astype(np.float32)


def _render_token(phone: str | None, n_samples: int, f0: float,
                  shift: float) -> np.ndarray:
    """One token's waveform: silence for boundaries, a three-tone stack
    (fundamental + two shifted components) for phones."""
    if phone is None:
        return np.zeros(n_samples, dtype=np.float64)
    t = np.arange(n_samples) / SAMPLE_RATE
    f1, f2 = PHONE_TONES[phone]
    wave = (0.38 * np.sin(2 * np.pi * f0 * t)
            + 0.22 * np.sin(2 * np.pi * f1 * shift * t)
            + 0.12 * np.sin(2 * np.pi * f2 * shift * t))
    return wave


def synthesize_utterance(text: str, lexicon: Lexicon, f0: float, shift: float,
                         rng: np.random.Generator):
    """Waveform + aligned token durations for one utterance.

    Returns (samples, tokens, durations, token_sample_spans) where tokens
    are phone symbols or None for word boundaries.
    """
    seq = text_to_phones(text, lexicon)
    tokens = [lexicon.id_to_phone[int(i)] if int(i) != BOUNDARY_ID else None
              for i in seq.phone_ids]
    durations = np.array(
        [BOUNDARY_FRAMES if tok is None else int(rng.integers(6, 13))
         for tok in tokens], dtype=np.int64)
    total_frames = int(durations.sum())
    n_samples = total_frames * HOP - HOP // 2  # 1 + n//hop == total_frames

    pieces = []
    spans = []
    cursor = 0
    for tok, dur in zip(tokens, durations):
        seg = _render_token(tok, int(dur) * HOP, f0, shift)
        pieces.append(seg)
        spans.append((cursor, cursor + len(seg)))
        cursor += len(seg)
    samples = np.concatenate(pieces)[:n_samples]
    return samples.astype(np.float32), tokens, durations, spans


def _pretrained_track(tokens, spans, n_samples: int, lexicon: Lexicon,
                      seed: int) -> np.ndarray:
    """Per-phone embedding frames at a rate unrelated to the mel hop."""
    mel_frames = 1 + n_samples // HOP
    t_pre = max(2, int(round(mel_frames * PRETRAINED_RATE_FACTOR)))
    starts = np.array([s for s, _ in spans], dtype=np.float64)
    frames = np.zeros((t_pre, PRETRAINED_DIM), dtype=np.float32)
    for i in range(t_pre):
        center = (i + 0.5) * n_samples / t_pre
        idx = int(np.searchsorted(starts, center, side="right") - 1)
        tok = tokens[min(idx, len(tokens) - 1)]
        phone_id = BOUNDARY_ID if tok is None else lexicon.phone_to_id[tok]
        frames[i] = _phone_embedding(phone_id, seed)
    return frames


def build_toy_corpus(root, seed: int = 0, texts=None) -> Config:
    """Write the corpus (wav/txt/dur/pre.acft per utterance plus lexicon)
    under `root` and return a matching configuration."""
    root = Path(root)
    texts = list(texts or TEXTS)
    lexicon = Lexicon(WORDS)
    root.mkdir(parents=True, exist_ok=True)
    lexicon.save(root / "lexicon.txt")

    for spk_idx, (speaker, (tag, f0, shift)) in enumerate(sorted(SPEAKERS.items())):
        spk_dir = root / tag / speaker
        spk_dir.mkdir(parents=True, exist_ok=True)
        for utt_idx, text in enumerate(texts):
            rng = np.random.default_rng([seed, spk_idx, utt_idx])
            utt_f0 = f0 + float(rng.uniform(-5.0, 5.0))
            samples, tokens, durations, spans = synthesize_utterance(
                text, lexicon, utt_f0, shift, rng)
            stem = spk_dir / f"utt{utt_idx:03d}"
            save_wav(f"{stem}.wav", Waveform(samples, SAMPLE_RATE))
            Path(f"{stem}.txt").write_text(text + "\n", encoding="utf-8")
            Path(f"{stem}.dur").write_text(
                " ".join(str(int(d)) for d in durations) + "\n",
                encoding="utf-8")
            acft.write_tensor(
                f"{stem}.pre.acft",
                _pretrained_track(tokens, spans, len(samples), lexicon, seed))
    return toy_config(root)


def toy_model_config(cfg: Config, lexicon: Lexicon) -> ModelConfig:
    return cfg.resolved_model(lexicon.n_phones, len(SPEAKERS))


def ablation_config(cfg: Config, row: str) -> Config:
    """The four experiment rows as config variants of the same run.

    baseline: mel input, no mel* term, no stage-2 pretraining;
    mel_star: + the decoder-output distance term in stage 3;
    pretrained: + external encoder features as model input;
    stage2: + the alignment pretraining stage.
    """
    variants = ("baseline", "mel_star", "pretrained", "stage2")
    if row not in variants:
        raise ValueError(f"unknown ablation row {row!r} (one of {variants})")
    order = variants.index(row)
    training = dataclasses.replace(
        cfg.training,
        use_stage2=order >= 3,
        stage3=dataclasses.replace(cfg.training.stage3, use_mel_star=order >= 1),
    )
    features = dataclasses.replace(
        cfg.features, kind="pretrained" if order >= 2 else "mel")
    return dataclasses.replace(cfg, training=training, features=features)

"""Waveform-to-feature extraction.

Produces the model's inputs and training targets: log-mel spectrograms,
pitch/energy contours, phone-ID sequences from a pronunciation lexicon, and
time-resampled features produced offline by an external pretrained encoder.

All functions here are pure: identical inputs give bit-identical outputs,
so preprocessing can fan out across worker processes.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from . import acft
from .config import MEL_GROUP, PRETRAINED_GROUP, FeatureConfig, MelConfig
from .textnorm import normalized_words

PAD_ID = 0
BOUNDARY_ID = 1
SILENCE_ID = 2
N_SPECIAL = 3

PAD_SYMBOL = "<pad>"
BOUNDARY_SYMBOL = "<wb>"
SILENCE_SYMBOL = "<sil>"


@dataclass
class Waveform:
    """Mono audio in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int

    def validate(self) -> None:
        if self.samples.ndim != 1 or len(self.samples) == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class AcousticFeatures:
    """Time-major feature matrix, either log-mel or pretrained-encoder frames."""

    frames: np.ndarray  # (T, D) float32
    source_kind: str  # "mel" or "pretrained"
    frame_rate_hz: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class ProsodyContours:
    pitch: np.ndarray  # (T,) F0 in Hz, 0 for unvoiced frames
    energy: np.ndarray  # (T,) per-frame L2 norm of the STFT magnitude


@dataclass
class PhoneSequence:
    phone_ids: np.ndarray  # (N,) int64
    durations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    speaker_id: int = 0

    def __len__(self) -> int:
        return len(self.phone_ids)


def load_wav(path) -> Waveform:
    rate, data = wavfile.read(path)
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float32) / 2147483648.0
    else:
        samples = data.astype(np.float32)
    wave = Waveform(samples, int(rate))
    wave.validate()
    return wave


def save_wav(path, wave: Waveform) -> None:
    clipped = np.clip(wave.samples, -1.0, 1.0)
    wavfile.write(path, wave.sample_rate_hz, (clipped * 32767.0).astype(np.int16))


def n_frames_for(n_samples: int, cfg: MelConfig) -> int:
    """Closed-form frame count under center padding."""
    return 1 + n_samples // cfg.hop_length


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular mel filterbank, (n_mels, n_fft//2 + 1), peak weight 1."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_bins = cfg.n_fft // 2 + 1
    bin_freqs = np.linspace(0.0, cfg.sample_rate_hz / 2.0, n_bins)
    mel_pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - bin_freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb.astype(np.float32)


def band_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency (Hz) of each mel band."""
    mel = 2595.0 * np.log10(1.0 + np.array([cfg.fmin_hz, cfg.fmax_hz]) / 700.0)
    pts = np.linspace(mel[0], mel[1], cfg.n_mels + 2)
    return 700.0 * (10.0 ** (pts[1:-1] / 2595.0) - 1.0)


def _frame_signal(wave: Waveform, cfg: MelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Center-padded frames: returns (frames (T, n_fft), window (n_fft,))."""
    wave.validate()
    if wave.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(
            f"waveform rate {wave.sample_rate_hz} != config rate {cfg.sample_rate_hz}"
        )
    n = len(wave.samples)
    pad = cfg.n_fft // 2
    if n < cfg.win_length or n <= pad:
        raise ValueError(f"input too short: {n} samples < one window")
    x = np.pad(wave.samples.astype(np.float64), pad, mode="reflect")
    n_frames = n_frames_for(n, cfg)
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    frames = x[idx]
    win = get_window("hann", cfg.win_length, fftbins=True)
    left = (cfg.n_fft - cfg.win_length) // 2
    window = np.zeros(cfg.n_fft)
    window[left:left + cfg.win_length] = win
    return frames, window


def stft_magnitude(wave: Waveform, cfg: MelConfig) -> np.ndarray:
    """|STFT| as (n_fft//2 + 1, T)."""
    frames, window = _frame_signal(wave, cfg)
    return np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)).T


def compute_mel(wave: Waveform, cfg: MelConfig) -> AcousticFeatures:
    """Log-mel spectrogram: ``log(max(filterbank @ |STFT|, log_floor))``."""
    mag = stft_magnitude(wave, cfg)
    mel = mel_filterbank(cfg).astype(np.float64) @ mag
    frames = np.log(np.maximum(mel, cfg.log_floor)).T.astype(np.float32)
    return AcousticFeatures(frames, MEL_GROUP, cfg.sample_rate_hz / cfg.hop_length)


def extract_prosody(
    wave: Waveform, cfg: MelConfig, feat_cfg: FeatureConfig | None = None
) -> ProsodyContours:
    """Frame-aligned F0 and energy contours at the mel hop.

    F0 comes from per-frame normalized autocorrelation searched over the
    configured pitch band; energy is the L2 norm of each STFT magnitude
    column, so it scales linearly with waveform amplitude.
    """
    feat_cfg = feat_cfg or FeatureConfig()
    mag = stft_magnitude(wave, cfg)
    energy = np.linalg.norm(mag, axis=0).astype(np.float32)

    frames, _ = _frame_signal(wave, cfg)
    left = (cfg.n_fft - cfg.win_length) // 2
    segs = frames[:, left:left + cfg.win_length]
    sr = cfg.sample_rate_hz
    lag_min = max(2, int(round(sr / feat_cfg.pitch_max_hz)))
    lag_max = min(cfg.win_length - 1, int(round(sr / feat_cfg.pitch_min_hz)))
    pitch = np.zeros(len(segs), dtype=np.float32)
    if lag_min >= lag_max:
        return ProsodyContours(pitch, energy)

    segs = segs - segs.mean(axis=1, keepdims=True)
    n_fft_ac = 1 << int(np.ceil(np.log2(2 * cfg.win_length)))
    spec = np.fft.rfft(segs, n=n_fft_ac, axis=1)
    ac = np.fft.irfft(spec * np.conj(spec), n=n_fft_ac, axis=1)[:, : lag_max + 1]
    for t in range(len(segs)):
        r0 = ac[t, 0]
        if r0 <= 0:
            continue
        band = ac[t, lag_min:lag_max + 1] / r0
        k = int(np.argmax(band))
        if band[k] < feat_cfg.voicing_threshold:
            continue
        lag = lag_min + k
        # parabolic refinement around the autocorrelation peak
        if lag_min < lag < lag_max:
            y0, y1, y2 = ac[t, lag - 1] / r0, band[k], ac[t, lag + 1] / r0
            denom = y0 - 2 * y1 + y2
            if abs(denom) > 1e-12:
                lag = lag + 0.5 * (y0 - y2) / denom
        pitch[t] = sr / lag
    return ProsodyContours(pitch, energy)


def resample_frames(frames: np.ndarray, target_t: int) -> np.ndarray:
    """Linear time-interpolation to exactly `target_t` rows.

    Uses frame-center alignment with edge clamping, so resampling to the
    same length is the identity and integer-ratio round trips restore the
    original rows exactly.
    """
    if target_t < 1:
        raise ValueError("target_t must be >= 1")
    src_t = frames.shape[0]
    if src_t == target_t:
        return frames.copy()
    pos = (np.arange(target_t, dtype=np.float64) + 0.5) * (src_t / target_t) - 0.5
    pos = np.clip(pos, 0.0, src_t - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src_t - 1)
    w = (pos - lo).astype(frames.dtype if frames.dtype.kind == "f" else np.float64)
    return (1.0 - w)[:, None] * frames[lo] + w[:, None] * frames[hi]


def load_pretrained_features(path, target_t: int, expected_dim: int | None = None,
                             frame_rate_hz: float = 0.0) -> AcousticFeatures:
    """Load an externally produced (T', D) feature matrix and resample to `target_t`."""
    arr = acft.read_tensor(path)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise acft.BadTensorFile(f"bad feature file {path}: expected a 2-D matrix")
    if expected_dim is not None and arr.shape[1] != expected_dim:
        raise ValueError(
            f"feature dim mismatch: {path} has D={arr.shape[1]}, expected {expected_dim}"
        )
    frames = resample_frames(arr.astype(np.float32), target_t)
    return AcousticFeatures(frames.astype(np.float32), PRETRAINED_GROUP, frame_rate_hz)


class Lexicon:
    """Word-to-phones map plus the derived phone-ID inventory.

    File format: one ``word<TAB>PH PH PH`` entry per line, UTF-8. IDs 0-2
    are reserved for padding, word boundaries, and silence.
    """

    def __init__(self, entries: dict[str, list[str]]):
        self.entries = {k.casefold(): list(v) for k, v in entries.items()}
        phones = sorted({p for phones in self.entries.values() for p in phones})
        self.phone_to_id = {PAD_SYMBOL: PAD_ID, BOUNDARY_SYMBOL: BOUNDARY_ID,
                            SILENCE_SYMBOL: SILENCE_ID}
        for i, p in enumerate(phones):
            self.phone_to_id[p] = N_SPECIAL + i
        self.id_to_phone = {v: k for k, v in self.phone_to_id.items()}

    @property
    def n_phones(self) -> int:
        return len(self.phone_to_id)

    @classmethod
    def load(cls, path) -> "Lexicon":
        entries: dict[str, list[str]] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "\t" in line:
                word, phones = line.split("\t", 1)
            else:
                word, _, phones = line.partition(" ")
            phones = phones.split()
            if not word or not phones:
                raise ValueError(f"{path}:{lineno}: malformed lexicon entry {line!r}")
            entries[word] = phones
        return cls(entries)

    def save(self, path) -> None:
        lines = [f"{w}\t{' '.join(p)}" for w, p in sorted(self.entries.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def phones_for(self, word: str) -> list[str]:
        key = word.casefold()
        if key not in self.entries:
            raise KeyError(word)
        return self.entries[key]


def text_to_phones(text: str, lexicon: Lexicon, speaker_id: int = 0) -> PhoneSequence:
    """Phone IDs for `text` with a word-boundary marker between words.

    Durations are left empty; they are filled by forced-aligner ingestion.
    Raises on any word missing from the lexicon.
    """
    ids: list[int] = []
    for i, word in enumerate(normalized_words(text)):
        try:
            phones = lexicon.phones_for(word)
        except KeyError:
            raise ValueError(f"out-of-vocabulary word: {word!r}") from None
        if i > 0:
            ids.append(BOUNDARY_ID)
        ids.extend(lexicon.phone_to_id[p] for p in phones)
    return PhoneSequence(np.asarray(ids, dtype=np.int64), speaker_id=speaker_id)


def load_durations(path, n_tokens: int, mel_frames: int, tolerance: int = 2) -> np.ndarray:
    """Read per-token frame durations and reconcile their sum with the mel length.

    The final token absorbs a discrepancy of at most `tolerance` frames in
    either direction; anything larger is an alignment error.
    """
    values = [int(v) for v in Path(path).read_text(encoding="utf-8").split()]
    if len(values) != n_tokens:
        raise ValueError(
            f"{path}: {len(values)} durations for {n_tokens} phone tokens"
        )
    durations = np.asarray(values, dtype=np.int64)
    if np.any(durations < 0):
        raise ValueError(f"{path}: negative duration")
    diff = mel_frames - int(durations.sum())
    if diff != 0:
        if len(durations) == 0 or abs(diff) > tolerance or durations[-1] + diff < 0:
            raise ValueError(
                f"{path}: durations sum to {durations.sum()}, mel has "
                f"{mel_frames} frames (tolerance {tolerance})"
            )
        durations = durations.copy()
        durations[-1] += diff
    return durations

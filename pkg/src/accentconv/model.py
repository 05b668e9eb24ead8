"""Network components: text encoder, length regulator, variance adaptor,
speech encoder, speaker table, and mel decoder with refinement stack.

Two input branches share the variance adaptor and decoder. The text branch
(phones -> expanded hidden states) exists only for training; the speech
branch (acoustic frames -> hidden states) is the conversion path. Sequences
are batch-first ``(B, T, d)`` with boolean masks that are True on valid
positions; every component zeroes padded positions after each sublayer so
padded inputs can never leak into valid outputs.
"""

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import MEL_GROUP, PRETRAINED_GROUP, ModelConfig


def sinusoid_table(max_len: int, dim: int) -> Tensor:
    position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32)
                    * (-math.log(10000.0) / dim))
    table = torch.zeros(max_len, dim)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: (dim + 1) // 2])
    return table


class SinusoidalPositions(nn.Module):
    def __init__(self, max_len: int, dim: int):
        super().__init__()
        self.register_buffer("table", sinusoid_table(max_len, dim), persistent=False)

    def forward(self, x: Tensor) -> Tensor:
        t = x.size(1)
        if t > self.table.size(0):
            raise ValueError(f"sequence length {t} exceeds positional table "
                             f"({self.table.size(0)}); raise model.max_frames")
        return x + self.table[:t].to(x.dtype)


def apply_mask(x: Tensor, mask: Tensor) -> Tensor:
    return x * mask.unsqueeze(-1).to(x.dtype)


class FFTBlock(nn.Module):
    """Self-attention + conv feed-forward, each with residual and layer norm."""

    def __init__(self, dim: int, n_heads: int, ffn_hidden: int,
                 kernels=(9, 1), dropout: float = 0.1):
        super().__init__()
        self.attention = nn.MultiheadAttention(dim, n_heads, dropout=dropout,
                                               batch_first=True)
        self.attention_norm = nn.LayerNorm(dim)
        k1, k2 = kernels
        self.conv1 = nn.Conv1d(dim, ffn_hidden, k1, padding=k1 // 2)
        self.conv2 = nn.Conv1d(ffn_hidden, dim, k2, padding=k2 // 2)
        self.ffn_norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, mask: Tensor, return_attention: bool = False):
        """
        Args:
            x: (B, T, dim) hidden states.
            mask: (B, T) bool, True on valid positions.
        Returns:
            (B, T, dim), optionally with (B, T, T) attention weights.
        """
        attn_out, weights = self.attention(
            x, x, x,
            key_padding_mask=~mask,
            need_weights=return_attention,
            average_attn_weights=True,
        )
        x = self.attention_norm(x + self.dropout(attn_out))
        x = apply_mask(x, mask)
        y = self.conv2(torch.relu(self.conv1(x.transpose(1, 2)))).transpose(1, 2)
        x = self.ffn_norm(x + self.dropout(y))
        x = apply_mask(x, mask)
        if return_attention:
            return x, weights
        return x


class FFTStack(nn.Module):
    def __init__(self, cfg: ModelConfig, n_blocks: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.hidden_dim, cfg.n_heads, cfg.ffn_hidden,
                     cfg.ffn_kernels, cfg.dropout)
            for _ in range(n_blocks)
        )

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x, mask)
        return x


class TextEncoder(nn.Module):
    """Phone embedding + positions + FFT stack; length N is preserved."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_phones = cfg.n_phones
        self.embedding = nn.Embedding(cfg.n_phones, cfg.hidden_dim, padding_idx=0)
        self.positions = SinusoidalPositions(cfg.max_frames, cfg.hidden_dim)
        self.stack = FFTStack(cfg, cfg.encoder_blocks)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, phone_ids: Tensor, mask: Tensor) -> Tensor:
        if phone_ids.numel() and int(phone_ids.max()) >= self.n_phones:
            raise ValueError(
                f"phone id {int(phone_ids.max())} out of range (inventory "
                f"{self.n_phones})"
            )
        x = self.embedding(phone_ids)
        x = self.dropout(self.positions(x))
        x = apply_mask(x, mask)
        return self.stack(x, mask)


def length_regulate(states: Tensor, durations: Tensor) -> Tensor:
    """Repeat row i of `states` durations[i] times, preserving order.

    Args:
        states: (N, d) phone-level hidden states.
        durations: (N,) non-negative integer frame counts.
    """
    if durations.numel() != states.size(0):
        raise ValueError("durations length must match number of states")
    if torch.any(durations < 0):
        raise ValueError("durations must be non-negative")
    if int(durations.sum()) == 0:
        raise ValueError("empty regulated sequence: all durations are zero")
    return torch.repeat_interleave(states, durations, dim=0)


class LengthRegulator(nn.Module):
    """Batched expansion of phone-level states to frame level."""

    def forward(self, states: Tensor, durations: Tensor,
                phone_mask: Tensor) -> tuple[Tensor, Tensor]:
        durations = durations * phone_mask.long()
        lengths = durations.sum(dim=1)
        if torch.any(lengths == 0):
            bad = int(torch.nonzero(lengths == 0)[0])
            raise ValueError(f"empty regulated sequence for batch item {bad}")
        t_max = int(lengths.max())
        out = states.new_zeros(states.size(0), t_max, states.size(2))
        for b in range(states.size(0)):
            out[b, : lengths[b]] = length_regulate(states[b], durations[b])
        frame_mask = (torch.arange(t_max, device=states.device)[None, :]
                      < lengths[:, None])
        return out, frame_mask


class VariancePredictor(nn.Module):
    """Two conv layers + projection emitting one scalar per position."""

    def __init__(self, dim: int, hidden: int, kernel: int, dropout: float):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(dim, hidden, kernel, padding=pad)
        self.norm1 = nn.LayerNorm(hidden)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel, padding=pad)
        self.norm2 = nn.LayerNorm(hidden)
        self.proj = nn.Linear(hidden, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        x = apply_mask(x, mask)
        x = torch.relu(self.conv1(x.transpose(1, 2)).transpose(1, 2))
        x = self.dropout(self.norm1(x))
        x = apply_mask(x, mask)
        x = torch.relu(self.conv2(x.transpose(1, 2)).transpose(1, 2))
        x = self.dropout(self.norm2(x))
        out = self.proj(x).squeeze(-1)
        return out * mask.to(out.dtype)


class DurationPredictor(VariancePredictor):
    """Predicts log(duration + 1) per phone; zero durations map to target 0."""

    @staticmethod
    def to_frames(log_duration: Tensor) -> Tensor:
        return torch.clamp(torch.round(torch.exp(log_duration) - 1.0), min=0).long()

    @staticmethod
    def to_target(durations: Tensor) -> Tensor:
        return torch.log(durations.to(torch.get_default_dtype()) + 1.0)


def quantize_to_bins(values: Tensor, edges: Tensor) -> Tensor:
    """Bin index per value; a value exactly on an edge goes to the lower bin."""
    flat = values.reshape(-1).contiguous()
    idx = torch.searchsorted(edges.to(values.dtype), flat, right=False)
    return idx.reshape(values.shape)


class VarianceAdaptor(nn.Module):
    """Adds speaker identity and quantized pitch/energy information to
    frame-level hidden states; also emits the raw per-frame predictions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pitch_predictor = VariancePredictor(
            cfg.hidden_dim, cfg.variance_hidden, cfg.variance_kernel,
            cfg.variance_dropout)
        self.energy_predictor = VariancePredictor(
            cfg.hidden_dim, cfg.variance_hidden, cfg.variance_kernel,
            cfg.variance_dropout)
        self.pitch_embedding = nn.Embedding(cfg.pitch_bins, cfg.hidden_dim)
        self.energy_embedding = nn.Embedding(cfg.energy_bins, cfg.hidden_dim)
        # log-spaced pitch edges over the voiced band; values below the band
        # (including unvoiced zeros) land in bin 0
        pitch_edges = torch.exp(torch.linspace(
            math.log(max(cfg.pitch_min_hz, 1e-3)), math.log(cfg.pitch_max_hz),
            cfg.pitch_bins - 1))
        energy_edges = torch.linspace(cfg.energy_min, cfg.energy_max,
                                      cfg.energy_bins - 1)
        self.register_buffer("pitch_edges", pitch_edges, persistent=False)
        self.register_buffer("energy_edges", energy_edges, persistent=False)

    def forward(self, h: Tensor, mask: Tensor, speaker_emb: Tensor | None,
                pitch_target: Tensor | None = None,
                energy_target: Tensor | None = None):
        for name, target in (("pitch", pitch_target), ("energy", energy_target)):
            if target is not None and target.shape != h.shape[:2]:
                raise ValueError(f"{name} target shape {tuple(target.shape)} does "
                                 f"not match frames {tuple(h.shape[:2])}")
        if speaker_emb is not None:
            h = h + speaker_emb.unsqueeze(1)
        h = apply_mask(h, mask)
        pitch_pred = self.pitch_predictor(h, mask)
        energy_pred = self.energy_predictor(h, mask)
        pitch_src = pitch_target if pitch_target is not None else pitch_pred.detach()
        energy_src = energy_target if energy_target is not None else energy_pred.detach()
        h = h + self.pitch_embedding(quantize_to_bins(pitch_src, self.pitch_edges))
        h = h + self.energy_embedding(quantize_to_bins(energy_src, self.energy_edges))
        h = apply_mask(h, mask)
        return h, pitch_pred, energy_pred


class SpeechEncoder(nn.Module):
    """Input projection (one per feature family) + FFT stack; T is preserved."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.prenets = nn.ModuleDict({
            MEL_GROUP: nn.Linear(cfg.n_mels, cfg.hidden_dim),
            PRETRAINED_GROUP: nn.Linear(cfg.pretrained_dim, cfg.hidden_dim),
        })
        self.positions = SinusoidalPositions(cfg.max_frames, cfg.hidden_dim)
        self.stack = FFTStack(cfg, cfg.encoder_blocks)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, features: Tensor, mask: Tensor, source_kind: str) -> Tensor:
        if source_kind not in self.prenets:
            raise ValueError(f"unknown feature kind {source_kind!r}")
        prenet = self.prenets[source_kind]
        if features.size(-1) != prenet.in_features:
            raise ValueError(
                f"feature dim mismatch: got D={features.size(-1)}, "
                f"{source_kind} expects {prenet.in_features}"
            )
        x = prenet(features)
        x = self.dropout(self.positions(x))
        x = apply_mask(x, mask)
        return self.stack(x, mask)


class PostNet(nn.Module):
    """Conv refinement stack producing a residual over the mel projection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        pad = cfg.postnet_kernel // 2
        channels = [cfg.n_mels] + [cfg.postnet_channels] * (cfg.postnet_layers - 1)
        self.convs = nn.ModuleList(
            nn.Conv1d(channels[i], channels[i + 1] if i + 1 < len(channels)
                      else cfg.n_mels, cfg.postnet_kernel, padding=pad)
            for i in range(cfg.postnet_layers)
        )
        self.norms = nn.ModuleList(
            nn.LayerNorm(self.convs[i].out_channels)
            for i in range(cfg.postnet_layers - 1)
        )
        self.dropout = nn.Dropout(cfg.postnet_dropout)

    def forward(self, mel: Tensor, mask: Tensor) -> Tensor:
        x = apply_mask(mel, mask)
        for i, conv in enumerate(self.convs):
            x = conv(x.transpose(1, 2)).transpose(1, 2)
            if i < len(self.norms):
                x = self.dropout(self.norms[i](torch.tanh(x)))
            x = apply_mask(x, mask)
        return x


class Decoder(nn.Module):
    """FFT stack -> mel projection -> conv residual refinement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.positions = SinusoidalPositions(cfg.max_frames, cfg.hidden_dim)
        self.stack = FFTStack(cfg, cfg.decoder_blocks)
        self.mel_proj = nn.Linear(cfg.hidden_dim, cfg.n_mels)
        self.postnet = PostNet(cfg)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, h: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        x = self.dropout(self.positions(h))
        x = apply_mask(x, mask)
        x = self.stack(x, mask)
        before = apply_mask(self.mel_proj(x), mask)
        after = apply_mask(before + self.postnet(before, mask), mask)
        return before, after


@dataclass
class TextBranchOutput:
    phone_states: Tensor  # (B, N, d) encoder output
    hidden: Tensor  # (B, T, d) length-regulated states (alignment target)
    frame_mask: Tensor  # (B, T) bool
    log_duration_pred: Tensor  # (B, N)
    durations: Tensor  # (B, N) frames actually used for expansion
    pitch_pred: Tensor  # (B, T)
    energy_pred: Tensor  # (B, T)
    mel_before: Tensor  # (B, T, n_mels)
    mel_after: Tensor  # (B, T, n_mels)


@dataclass
class SpeechBranchOutput:
    hidden: Tensor  # (B, T, d) speech-encoder states
    frame_mask: Tensor  # (B, T) bool
    pitch_pred: Tensor
    energy_pred: Tensor
    mel_before: Tensor
    mel_after: Tensor


_GROUP_PREFIXES = {
    "text_encoder.": "text_encoder",
    "duration_predictor.": "duration_predictor",
    "variance_adaptor.": "pitch_energy_predictor",
    "speaker_table.": "speaker_embedding",
    "speech_encoder.": "speech_encoder",
    "decoder.": "decoder",
}


class AccentConverter(nn.Module):
    """Full assembly of both branches around the shared adaptor and decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.text_encoder = TextEncoder(cfg)
        self.length_regulator = LengthRegulator()
        self.duration_predictor = DurationPredictor(
            cfg.hidden_dim, cfg.variance_hidden, cfg.variance_kernel,
            cfg.variance_dropout)
        self.variance_adaptor = VarianceAdaptor(cfg)
        self.speaker_table = nn.Embedding(cfg.n_speakers, cfg.hidden_dim)
        self.speech_encoder = SpeechEncoder(cfg)
        self.decoder = Decoder(cfg)

    def speaker_embed(self, speaker_ids: Tensor) -> Tensor:
        if torch.any(speaker_ids < 0) or torch.any(speaker_ids >= self.cfg.n_speakers):
            raise ValueError(
                f"unknown speaker id in {speaker_ids.tolist()} "
                f"(table has {self.cfg.n_speakers} rows)"
            )
        return self.speaker_table(speaker_ids)

    def forward_text(self, phone_ids: Tensor, phone_mask: Tensor,
                     speaker_ids: Tensor, durations: Tensor | None = None,
                     pitch_target: Tensor | None = None,
                     energy_target: Tensor | None = None) -> TextBranchOutput:
        """TTS path. With `durations` given (training) the expansion is
        teacher-forced; otherwise the duration predictor drives it."""
        phone_states = self.text_encoder(phone_ids, phone_mask)
        log_dur = self.duration_predictor(phone_states, phone_mask)
        if durations is None:
            durations = DurationPredictor.to_frames(log_dur) * phone_mask.long()
        hidden, frame_mask = self.length_regulator(phone_states, durations, phone_mask)
        spk = self.speaker_embed(speaker_ids)
        h, pitch_pred, energy_pred = self.variance_adaptor(
            hidden, frame_mask, spk, pitch_target, energy_target)
        mel_before, mel_after = self.decoder(h, frame_mask)
        return TextBranchOutput(
            phone_states=phone_states, hidden=hidden, frame_mask=frame_mask,
            log_duration_pred=log_dur, durations=durations,
            pitch_pred=pitch_pred, energy_pred=energy_pred,
            mel_before=mel_before, mel_after=mel_after)

    def encode_speech(self, features: Tensor, frame_mask: Tensor,
                      source_kind: str) -> Tensor:
        return self.speech_encoder(features, frame_mask, source_kind)

    def forward_speech(self, features: Tensor, frame_mask: Tensor,
                       source_kind: str, speaker_ids: Tensor,
                       pitch_target: Tensor | None = None,
                       energy_target: Tensor | None = None) -> SpeechBranchOutput:
        """Conversion path; output frame count always equals the input's."""
        hidden = self.speech_encoder(features, frame_mask, source_kind)
        spk = self.speaker_embed(speaker_ids)
        h, pitch_pred, energy_pred = self.variance_adaptor(
            hidden, frame_mask, spk, pitch_target, energy_target)
        mel_before, mel_after = self.decoder(h, frame_mask)
        return SpeechBranchOutput(
            hidden=hidden, frame_mask=frame_mask,
            pitch_pred=pitch_pred, energy_pred=energy_pred,
            mel_before=mel_before, mel_after=mel_after)

    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        """Named trainable parameters partitioned into freeze-schedule groups."""
        groups: dict[str, dict[str, nn.Parameter]] = {
            g: {} for g in set(_GROUP_PREFIXES.values())
        }
        for name, param in self.named_parameters():
            for prefix, group in _GROUP_PREFIXES.items():
                if name.startswith(prefix):
                    groups[group][name] = param
                    break
            else:
                raise RuntimeError(f"parameter {name} belongs to no group")
        return groups

    def frozen_module_names(self, trainable_groups) -> list[str]:
        by_group = {
            "text_encoder": "text_encoder",
            "duration_predictor": "duration_predictor",
            "pitch_energy_predictor": "variance_adaptor",
            "speaker_embedding": "speaker_table",
            "speech_encoder": "speech_encoder",
            "decoder": "decoder",
        }
        return [mod for grp, mod in by_group.items() if grp not in trainable_groups]

    def set_trainable_groups(self, trainable_groups) -> None:
        groups = self.parameter_groups()
        unknown = set(trainable_groups) - set(groups)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        for group, params in groups.items():
            flag = group in trainable_groups
            for p in params.values():
                p.requires_grad_(flag)

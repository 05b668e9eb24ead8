"""Reference-free accent conversion: non-autoregressive TTS-style model with
a speech encoder aligned to text-side representations across three training
stages, plus conversion and WER evaluation tooling."""

__version__ = "0.1.0"

from .acft import read_tensor, write_tensor
from .config import Config, MelConfig, ModelConfig, StageConfig, load_config
from .features import (AcousticFeatures, Lexicon, PhoneSequence,
                       ProsodyContours, Waveform, compute_mel,
                       extract_prosody, load_pretrained_features,
                       text_to_phones)
from .data import (UtteranceRecord, build_manifest, load_manifest, make_batch,
                   save_manifest, split_manifest)
from .model import AccentConverter
from .training import (LossBreakdown, gradient_check, loss_stage1, loss_stage2,
                       loss_stage3, lr_schedule, run_pipeline, run_stage)
from .checkpoint import load_checkpoint, save_checkpoint
from .inference import convert, export_mel, invoke_vocoder_adapter, load_converter
from .evaluation import evaluate_corpus, transcribe_adapter, wer

__all__ = [
    "AccentConverter", "AcousticFeatures", "Config", "Lexicon",
    "LossBreakdown", "MelConfig", "ModelConfig", "PhoneSequence",
    "ProsodyContours", "StageConfig", "UtteranceRecord", "Waveform",
    "build_manifest", "compute_mel", "convert", "evaluate_corpus",
    "export_mel", "extract_prosody", "gradient_check",
    "invoke_vocoder_adapter", "load_checkpoint", "load_config",
    "load_converter", "load_manifest", "load_pretrained_features",
    "loss_stage1", "loss_stage2", "loss_stage3", "lr_schedule", "make_batch",
    "read_tensor", "run_pipeline", "run_stage", "save_checkpoint",
    "save_manifest", "split_manifest", "text_to_phones", "transcribe_adapter",
    "wer", "write_tensor",
]

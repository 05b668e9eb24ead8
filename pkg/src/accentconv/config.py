"""Run configuration: nested dataclasses loaded from YAML.

Precedence: config file < ``ACCENTCONV_``-prefixed environment variables <
command-line ``--set`` overrides. Env var names use double underscores as
section separators, e.g. ``ACCENTCONV_MODEL__HIDDEN_DIM=64``.
"""

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

ENV_PREFIX = "ACCENTCONV_"

MEL_GROUP = "mel"
PRETRAINED_GROUP = "pretrained"

PARAMETER_GROUPS = (
    "text_encoder",
    "duration_predictor",
    "pitch_energy_predictor",
    "speaker_embedding",
    "speech_encoder",
    "decoder",
)


class ConfigError(ValueError):
    pass


@dataclass
class MelConfig:
    """STFT / mel-filterbank parameters (24 kHz HiFi-GAN-compatible defaults)."""

    sample_rate_hz: int = 24000
    n_fft: int = 2048
    win_length: int = 1200
    hop_length: int = 300
    n_mels: int = 80
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-5

    def validate(self) -> None:
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise ConfigError(
                f"need 0 < hop <= win <= n_fft, got {self.hop_length}/"
                f"{self.win_length}/{self.n_fft}"
            )
        if not (0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2):
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sr/2, got {self.fmin_hz}/{self.fmax_hz}"
            )
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")


@dataclass
class FeatureConfig:
    kind: str = MEL_GROUP  # "mel" or "pretrained": model input feature family
    pretrained_dim: int = 512
    lexicon_path: str = ""
    pitch_min_hz: float = 60.0
    pitch_max_hz: float = 400.0
    voicing_threshold: float = 0.3
    # forced-aligner duration sums may be adjusted on the final phone by
    # at most this many frames before erroring
    duration_tolerance: int = 2

    def validate(self) -> None:
        if self.kind not in (MEL_GROUP, PRETRAINED_GROUP):
            raise ConfigError(f"features.kind must be mel|pretrained, got {self.kind!r}")
        if not (0 < self.pitch_min_hz < self.pitch_max_hz):
            raise ConfigError("need 0 < pitch_min_hz < pitch_max_hz")


@dataclass
class ModelConfig:
    hidden_dim: int = 256
    n_heads: int = 4
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    ffn_hidden: int = 1024
    ffn_kernels: tuple = (9, 1)
    dropout: float = 0.1
    n_phones: int = 0  # filled from the lexicon at build time
    n_speakers: int = 0
    n_mels: int = 80
    pretrained_dim: int = 512
    variance_hidden: int = 256
    variance_kernel: int = 3
    variance_dropout: float = 0.5
    pitch_bins: int = 256
    pitch_min_hz: float = 60.0
    pitch_max_hz: float = 400.0
    energy_bins: int = 256
    energy_min: float = 0.0
    energy_max: float = 200.0
    postnet_layers: int = 5
    postnet_channels: int = 256
    postnet_kernel: int = 5
    postnet_dropout: float = 0.5
    max_frames: int = 4000

    def validate(self) -> None:
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        for name in ("hidden_dim", "n_heads", "encoder_blocks", "decoder_blocks",
                     "ffn_hidden", "pitch_bins", "energy_bins", "postnet_layers",
                     "n_phones", "n_speakers", "n_mels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")


@dataclass
class StageConfig:
    """One training stage: what trains, for how long, and under which loss."""

    stage: int = 1
    max_steps: int = 1000
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    schedule: str = "warmup"  # "warmup" or "constant"
    warmup_steps: int = 4000
    constant_lr: float = 1e-5
    lambda_emb: float = 1.0
    lambda_mel_star: float = 1.0
    use_mel_star: bool = True
    dataset: str = "native"  # accent_tag of the records this stage consumes
    grad_clip: float = 1.0
    trainable_groups: tuple = ()

    def __post_init__(self):
        if not self.trainable_groups:
            if self.stage == 1:
                self.trainable_groups = tuple(
                    g for g in PARAMETER_GROUPS if g != "speech_encoder"
                )
            else:
                self.trainable_groups = ("speech_encoder",)

    def validate(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1|2|3, got {self.stage}")
        groups = set(self.trainable_groups)
        if not groups <= set(PARAMETER_GROUPS):
            raise ConfigError(f"unknown parameter groups: {groups - set(PARAMETER_GROUPS)}")
        if self.stage in (2, 3) and groups != {"speech_encoder"}:
            raise ConfigError(f"stage {self.stage} must train exactly the speech encoder")
        if self.stage == 1 and "speech_encoder" in groups:
            raise ConfigError("stage 1 must not train the speech encoder")
        if self.stage == 3 and self.use_mel_star and not (
            self.lambda_emb > 0 and self.lambda_mel_star > 0
        ):
            raise ConfigError("stage 3 loss weights must be positive")
        if self.schedule not in ("warmup", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


def _default_stage(n: int) -> StageConfig:
    if n == 1:
        return StageConfig(stage=1, max_steps=100000, dataset="native")
    if n == 2:
        return StageConfig(stage=2, max_steps=200000, dataset="native")
    return StageConfig(
        stage=3, max_steps=20000, schedule="constant", constant_lr=1e-5,
        dataset="accented",
    )


@dataclass
class TrainingConfig:
    seed: int = 1234
    log_every: int = 100
    val_every: int = 1000
    use_stage2: bool = True  # pipeline switch: run the alignment pretraining stage
    stage1: StageConfig = field(default_factory=lambda: _default_stage(1))
    stage2: StageConfig = field(default_factory=lambda: _default_stage(2))
    stage3: StageConfig = field(default_factory=lambda: _default_stage(3))

    def stage_config(self, stage: int) -> StageConfig:
        cfg = {1: self.stage1, 2: self.stage2, 3: self.stage3}[stage]
        if cfg.stage != stage:
            raise ConfigError(f"stage{stage} config carries stage tag {cfg.stage}")
        return cfg

    def validate(self) -> None:
        for n in (1, 2, 3):
            self.stage_config(n).validate()


@dataclass
class DataConfig:
    corpus_root: str = ""
    cache_dir: str = ""  # default: <corpus_root>/cache
    n_train: int = 1032
    n_val: int = 50
    n_test: int = 50
    split_seed: int = 7
    # restrict fine-tuning to named accented speakers; empty = all jointly
    accented_speakers: tuple = ()


@dataclass
class EvalConfig:
    asr_cmd: str = ""
    vocoder_cmd: str = ""
    max_mel_figures: int = 4


@dataclass
class Config:
    mel: MelConfig = field(default_factory=MelConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.mel.validate()
        self.features.validate()
        self.training.validate()

    def resolved_model(self, n_phones: int, n_speakers: int) -> ModelConfig:
        """Model config with corpus-dependent sizes and feature dims filled in."""
        out = dataclasses.replace(
            self.model,
            n_phones=n_phones,
            n_speakers=n_speakers,
            n_mels=self.mel.n_mels,
            pretrained_dim=self.features.pretrained_dim,
            pitch_min_hz=self.features.pitch_min_hz,
            pitch_max_hz=self.features.pitch_max_hz,
        )
        out.validate()
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self, n: int = 8) -> str:
        dump = yaml.safe_dump(self.to_dict(), sort_keys=True)
        return hashlib.sha256(dump.encode()).hexdigest()[:n]


_SECTIONS = {f.name: f.type for f in dataclasses.fields(Config)}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown option")
        ftype = fields[key].type
        if dataclasses.is_dataclass(ftype):
            kwargs[key] = _build(ftype, value, f"{path}.{key}")
        elif ftype is tuple or ftype == "tuple":
            kwargs[key] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> Config:
    cfg = _build(Config, data or {}, "config")
    cfg.validate()
    return cfg


def _apply_override(data: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {key} is not a section")
    node[keys[-1]] = yaml.safe_load(raw)


def _env_overrides(environ) -> list[tuple[str, str]]:
    out = []
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        out.append((dotted, value))
    return out


def load_config(path=None, overrides=(), environ=None) -> Config:
    """Load a config file and apply env/CLI overrides in precedence order."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded
    environ = os.environ if environ is None else environ
    for dotted, raw in _env_overrides(environ):
        _apply_override(data, dotted, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        _apply_override(data, dotted.strip(), raw)
    return config_from_dict(data)


def save_config(cfg: Config, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")

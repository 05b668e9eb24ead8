import pytest

from accentconv.config import (
    Config,
    ConfigError,
    MelConfig,
    StageConfig,
    config_from_dict,
    load_config,
    save_config,
)


def test_defaults_valid():
    cfg = Config()
    cfg.validate()
    assert cfg.mel.n_mels == 80
    assert cfg.training.stage3.schedule == "constant"


def test_stage_trainable_group_defaults():
    s1 = StageConfig(stage=1)
    assert "speech_encoder" not in s1.trainable_groups
    assert "text_encoder" in s1.trainable_groups
    for n in (2, 3):
        assert StageConfig(stage=n).trainable_groups == ("speech_encoder",)


def test_file_env_cli_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(
        "model:\n  hidden_dim: 96\n  n_heads: 2\ntraining:\n  seed: 5\n",
        encoding="utf-8",
    )
    env = {"ACCENTCONV_MODEL__HIDDEN_DIM": "64", "ACCENTCONV_TRAINING__LOG_EVERY": "7"}
    cfg = load_config(path, overrides=["model.hidden_dim=32"], environ=env)
    # file < env < --set
    assert cfg.model.hidden_dim == 32
    assert cfg.training.log_every == 7
    assert cfg.training.seed == 5
    assert cfg.model.n_heads == 2


def test_env_ignored_without_prefix(tmp_path):
    cfg = load_config(None, environ={"MODEL__HIDDEN_DIM": "32"})
    assert cfg.model.hidden_dim == 256


def test_override_parses_yaml_values():
    cfg = load_config(None, overrides=[
        "training.use_stage2=false",
        "features.pitch_max_hz=350.5",
        "model.ffn_kernels=[3, 1]",
    ], environ={})
    assert cfg.training.use_stage2 is False
    assert cfg.features.pitch_max_hz == 350.5
    assert cfg.model.ffn_kernels == (3, 1)


def test_bad_override_shape():
    with pytest.raises(ConfigError, match="section.key=value"):
        load_config(None, overrides=["model.hidden_dim"], environ={})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown option"):
        config_from_dict({"model": {"hiden_dim": 64}})


def test_nested_stage_config():
    cfg = config_from_dict({"training": {"stage1": {"stage": 1, "max_steps": 5}}})
    assert cfg.training.stage1.max_steps == 5
    # untouched stages keep defaults
    assert cfg.training.stage3.dataset == "accented"


@pytest.mark.parametrize("data,msg", [
    ({"mel": {"hop_length": 0}}, "hop"),
    ({"mel": {"fmax_hz": 99999.0}}, "fmax"),
    ({"mel": {"log_floor": 0.0}}, "log_floor"),
    ({"features": {"kind": "wavlm"}}, "mel|pretrained"),
    ({"training": {"stage2": {"stage": 2, "trainable_groups": ["decoder"]}}},
     "exactly the speech encoder"),
    ({"training": {"stage1": {"stage": 1, "trainable_groups":
                              ["speech_encoder", "decoder"]}}},
     "must not train the speech encoder"),
    ({"training": {"stage1": {"stage": 1, "schedule": "cosine"}}}, "schedule"),
    ({"training": {"stage3": {"stage": 3, "lambda_emb": 0.0}}}, "positive"),
    ({"training": {"stage1": {"stage": 2}}}, "carries stage tag"),
])
def test_validation_errors(data, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(data)


def test_model_head_divisibility():
    cfg = config_from_dict({"model": {"hidden_dim": 10, "n_heads": 4}})
    with pytest.raises(ConfigError, match="divisible"):
        cfg.resolved_model(n_phones=5, n_speakers=2)


def test_resolved_model_fills_corpus_sizes():
    cfg = config_from_dict({"mel": {"n_mels": 40}, "features": {"pretrained_dim": 16}})
    model = cfg.resolved_model(n_phones=9, n_speakers=4)
    assert (model.n_phones, model.n_speakers) == (9, 4)
    assert model.n_mels == 40
    assert model.pretrained_dim == 16


def test_save_load_round_trip(tmp_path):
    cfg = config_from_dict({"model": {"hidden_dim": 64, "n_heads": 2}})
    path = tmp_path / "echo.yaml"
    save_config(cfg, path)
    again = load_config(path, environ={})
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_digest_tracks_content():
    a = Config()
    b = config_from_dict({"training": {"seed": 99}})
    assert a.digest() != b.digest()
    assert len(a.digest()) == 8


def test_mel_validation_direct():
    with pytest.raises(ConfigError):
        MelConfig(win_length=4096).validate()

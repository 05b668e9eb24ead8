"""Conversion path: checkpoint gating, feature ingestion, mel export, and
the vocoder adapter contract."""

import dataclasses

import numpy as np
import pytest
import torch

from accentconv import acft
from accentconv.checkpoint import CheckpointError, save_checkpoint
from accentconv.config import MEL_GROUP, PRETRAINED_GROUP
from accentconv.features import AcousticFeatures, ProsodyContours, load_wav, save_wav, Waveform
from accentconv.inference import (
    convert,
    convert_file,
    export_mel,
    input_features,
    invoke_vocoder_adapter,
    load_converter,
)
from accentconv.model import AccentConverter
from accentconv.training import embedding_distance


@pytest.fixture(scope="module")
def ckpts(toy_corpus, tmp_path_factory):
    """Stage-tagged checkpoints of an untrained model (mechanics only)."""
    d = tmp_path_factory.mktemp("ckpts")
    torch.manual_seed(21)
    model = AccentConverter(toy_corpus.model_cfg)
    paths = {}
    for stage, lineage in ((1, ["stage1"]), (2, ["stage1", "stage2"]),
                           (3, ["stage1", "stage2", "stage3"])):
        paths[stage] = d / f"stage{stage}.ckpt"
        save_checkpoint(paths[stage], model, toy_corpus.cfg, 10 * stage,
                        stage, lineage)
    pre_cfg = dataclasses.replace(
        toy_corpus.cfg,
        features=dataclasses.replace(toy_corpus.cfg.features, kind="pretrained"))
    paths["pretrained"] = d / "stage2_pre.ckpt"
    save_checkpoint(paths["pretrained"], model, pre_cfg, 20, 2,
                    ["stage1", "stage2"])
    return paths


def mel_features(t=30, n_mels=40, seed=0):
    rng = np.random.default_rng(seed)
    return AcousticFeatures(rng.normal(size=(t, n_mels)).astype(np.float32),
                            MEL_GROUP, 80.0)


def test_tts_only_checkpoint_refused(ckpts):
    with pytest.raises(CheckpointError, match="no aligned speech encoder"):
        load_converter(ckpts[1])


def test_stage2_and_3_checkpoints_accepted(ckpts):
    for stage in (2, 3):
        model, cfg, meta = load_converter(ckpts[stage])
        assert meta["stage"] == stage
        assert not model.training  # eval mode for conversion


def test_convert_shape_and_determinism(ckpts):
    feats = mel_features(t=25)
    a = convert(feats, speaker_id=2, checkpoint=ckpts[2])
    b = convert(feats, speaker_id=2, checkpoint=ckpts[2])
    assert a.frames.shape == (25, 40)
    assert a.source_kind == MEL_GROUP
    assert a.frames.dtype == np.float32
    assert np.all(np.isfinite(a.frames))
    assert a.frame_rate_hz == pytest.approx(80.0)
    assert np.array_equal(a.frames, b.frames)


def test_convert_accepts_loaded_triple(ckpts):
    loaded = load_converter(ckpts[2])
    feats = mel_features(t=12, seed=1)
    out = convert(feats, 0, loaded)
    assert out.frames.shape == (12, 40)


def test_convert_frame_count_preserved(ckpts):
    loaded = load_converter(ckpts[3])
    for t in (1, 7, 64):
        out = convert(mel_features(t=t, seed=t), 1, loaded)
        assert out.n_frames == t


def test_convert_feature_kind_mismatch(ckpts):
    pre = AcousticFeatures(np.zeros((10, 16), dtype=np.float32),
                           PRETRAINED_GROUP, 60.0)
    with pytest.raises(ValueError, match="feature kind mismatch"):
        convert(pre, 0, ckpts[2])


def test_convert_pretrained_kind(ckpts):
    pre = AcousticFeatures(
        np.random.default_rng(3).normal(size=(18, 16)).astype(np.float32),
        PRETRAINED_GROUP, 60.0)
    out = convert(pre, 1, ckpts["pretrained"])
    assert out.frames.shape == (18, 40)
    assert out.source_kind == MEL_GROUP  # output is always a mel


def test_convert_unknown_speaker(ckpts):
    with pytest.raises(ValueError, match="unknown speaker id"):
        convert(mel_features(), 99, ckpts[2])


def test_convert_empty_input(ckpts):
    empty = AcousticFeatures(np.zeros((0, 40), dtype=np.float32), MEL_GROUP, 80.0)
    with pytest.raises(ValueError, match="empty feature sequence"):
        convert(empty, 0, ckpts[2])


def test_convert_prosody_validation(ckpts):
    feats = mel_features(t=10)
    bad = ProsodyContours(pitch=np.zeros(9, dtype=np.float32),
                          energy=np.zeros(10, dtype=np.float32))
    with pytest.raises(ValueError, match="prosody length"):
        convert(feats, 0, ckpts[2], prosody=bad)


def test_prosody_copy_changes_output(ckpts):
    loaded = load_converter(ckpts[2])
    feats = mel_features(t=15, seed=4)
    pros = ProsodyContours(
        pitch=np.full(15, 300.0, dtype=np.float32),
        energy=np.full(15, 12.0, dtype=np.float32))
    plain = convert(feats, 0, loaded)
    copied = convert(feats, 0, loaded, prosody=pros)
    assert not np.allclose(plain.frames, copied.frames, atol=1e-4)


# ---------------------------------------------------------- input loading


def test_input_features_from_wav(toy_corpus, ckpts):
    record = toy_corpus.splits["test"][0]
    feats, pros = input_features(record.audio_path, toy_corpus.cfg, MEL_GROUP,
                                 want_prosody=True)
    assert feats.source_kind == MEL_GROUP
    assert feats.dim == 40
    assert pros is not None
    assert len(pros.pitch) == feats.n_frames
    feats2, pros2 = input_features(record.audio_path, toy_corpus.cfg, MEL_GROUP)
    assert pros2 is None
    assert np.array_equal(feats.frames, feats2.frames)


def test_input_features_wav_rate_mismatch(toy_corpus, tmp_path):
    wave = Waveform(np.zeros(16000, dtype=np.float32), 16000)
    path = tmp_path / "wrong.wav"
    save_wav(path, wave)
    with pytest.raises(ValueError, match="sample rate 16000"):
        input_features(path, toy_corpus.cfg, MEL_GROUP)


def test_input_features_pretrained_needs_tensor_file(toy_corpus):
    record = toy_corpus.splits["test"][0]
    with pytest.raises(ValueError, match="cannot be computed from a wav"):
        input_features(record.audio_path, toy_corpus.cfg, PRETRAINED_GROUP)


def test_input_features_from_acft(toy_corpus, tmp_path):
    arr = np.random.default_rng(5).normal(size=(22, 40)).astype(np.float32)
    path = tmp_path / "feats.acft"
    acft.write_tensor(path, arr)
    feats, pros = input_features(path, toy_corpus.cfg, MEL_GROUP)
    assert np.array_equal(feats.frames, arr)
    assert pros is None


def test_input_features_acft_validation(toy_corpus, tmp_path):
    path = tmp_path / "feats.acft"
    acft.write_tensor(path, np.zeros((22, 7), dtype=np.float32))
    with pytest.raises(ValueError, match="feature dim mismatch"):
        input_features(path, toy_corpus.cfg, MEL_GROUP)
    acft.write_tensor(path, np.zeros(22, dtype=np.float32))
    with pytest.raises(ValueError, match="expected a \\(T, D\\) tensor"):
        input_features(path, toy_corpus.cfg, MEL_GROUP)
    acft.write_tensor(path, np.zeros((22, 40), dtype=np.float32))
    with pytest.raises(ValueError, match="prosody copying needs a wav"):
        input_features(path, toy_corpus.cfg, MEL_GROUP, want_prosody=True)


# -------------------------------------------------------------- mel export


def test_export_mel_round_trip(tmp_path):
    mel = mel_features(t=9, seed=6)
    path = export_mel(mel, tmp_path / "out.acft")
    assert np.array_equal(acft.read_tensor(path), mel.frames)


def test_export_mel_rejects_bad_values(tmp_path):
    empty = AcousticFeatures(np.zeros((0, 40), dtype=np.float32), MEL_GROUP, 80.0)
    with pytest.raises(ValueError, match="zero-length"):
        export_mel(empty, tmp_path / "a.acft")
    bad = mel_features(t=4)
    bad.frames[2, 2] = np.inf
    with pytest.raises(ValueError, match="non-finite"):
        export_mel(bad, tmp_path / "b.acft")


# --------------------------------------------------------- vocoder adapter


def test_vocoder_requires_command(tmp_path):
    with pytest.raises(ValueError, match="no vocoder configured"):
        invoke_vocoder_adapter(tmp_path / "m.acft", "", tmp_path / "o.wav")
    with pytest.raises(ValueError, match="no vocoder configured"):
        invoke_vocoder_adapter(tmp_path / "m.acft", "   ", tmp_path / "o.wav")


def test_vocoder_stub_produces_wav(adapters, tmp_path):
    mel_path = export_mel(mel_features(t=20, seed=7), tmp_path / "m.acft")
    wav_path = invoke_vocoder_adapter(mel_path, adapters.vocoder,
                                      tmp_path / "o.wav")
    wave = load_wav(wav_path)
    assert wave.sample_rate_hz == 8000
    assert len(wave.samples) == 20 * 100  # stub writes hop-many samples/frame


def test_vocoder_failure_surfaces_stderr(adapters, tmp_path):
    mel_path = export_mel(mel_features(t=5, seed=8), tmp_path / "m.acft")
    with pytest.raises(RuntimeError, match="exited 2.*adapter exploded"):
        invoke_vocoder_adapter(mel_path, adapters.fail, tmp_path / "o.wav")


def test_vocoder_must_write_output(tmp_path):
    mel_path = export_mel(mel_features(t=5, seed=9), tmp_path / "m.acft")
    with pytest.raises(RuntimeError, match="wrote no wav"):
        invoke_vocoder_adapter(mel_path, "python3 -c pass", tmp_path / "o.wav")


# ------------------------------------------------------------ convert_file


def test_convert_file_wav_to_mel(toy_corpus, ckpts, tmp_path):
    record = toy_corpus.splits["test"][0]
    out = tmp_path / "converted.acft"
    info = convert_file(ckpts[2], record.audio_path, speaker_id=0,
                        kind=MEL_GROUP, out_path=out)
    assert out.exists()
    assert info["mel_path"] == str(out)
    assert info["wav_path"] is None
    assert info["stage"] == 2
    assert info["n_frames"] == acft.read_tensor(out).shape[0]


def test_convert_file_with_vocoder(toy_corpus, ckpts, adapters, tmp_path):
    record = toy_corpus.splits["test"][0]
    out = tmp_path / "converted.acft"
    info = convert_file(ckpts[2], record.audio_path, speaker_id=1,
                        kind=MEL_GROUP, out_path=out,
                        vocoder_cmd=adapters.vocoder)
    assert info["wav_path"] == str(out.with_suffix(".wav"))
    assert load_wav(info["wav_path"]).samples.shape[0] == info["n_frames"] * 100


def test_convert_file_prosody_copy(toy_corpus, ckpts, tmp_path):
    record = toy_corpus.splits["test"][0]
    plain = convert_file(ckpts[2], record.audio_path, 0, MEL_GROUP,
                         tmp_path / "plain.acft")
    copied = convert_file(ckpts[2], record.audio_path, 0, MEL_GROUP,
                          tmp_path / "copied.acft", copy_prosody=True)
    a = acft.read_tensor(tmp_path / "plain.acft")
    b = acft.read_tensor(tmp_path / "copied.acft")
    assert a.shape == b.shape
    assert not np.allclose(a, b, atol=1e-4)
    assert plain["n_frames"] == copied["n_frames"]


def test_convert_file_kind_validation(ckpts, tmp_path):
    with pytest.raises(ValueError, match="mel|pretrained"):
        convert_file(ckpts[2], tmp_path / "x.wav", 0, "spectrogram",
                     tmp_path / "y.acft")


# ------------------------------------------- trained model sanity (slow)


def test_trained_alignment_beats_random_init(toy_corpus, pipeline):
    """After alignment training, speech-encoder states on held-out native
    speech sit far closer to the text branch's states than a random
    encoder's do."""
    from accentconv.checkpoint import load_checkpoint
    from accentconv.data import make_batch

    trained, _, _ = load_checkpoint(pipeline.results[2].best_path)
    trained.eval()
    torch.manual_seed(99)
    random_model = AccentConverter(toy_corpus.model_cfg).eval()

    items = toy_corpus.datasets["native"].val[:4]
    batch = make_batch(items)

    def alignment(model):
        with torch.no_grad():
            phone_states = model.text_encoder(batch.phone_ids, batch.phone_mask)
            h_t, _ = model.length_regulator(phone_states, batch.durations,
                                            batch.phone_mask)
            h_s = model.encode_speech(batch.features, batch.frame_mask, "mel")
            return float(embedding_distance(h_t, h_s, batch.frame_mask))

    # the random model's own text branch is its comparison point, so both
    # numbers are self-consistent alignment gaps
    assert alignment(trained) < 0.5 * alignment(random_model)
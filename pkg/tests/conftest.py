"""Shared fixtures: synthetic corpus, a trained three-stage pipeline, and
external adapter stubs (vocoder/ASR) used by evaluation tests.

The corpus and pipeline are session-scoped because training, while small,
dominates suite runtime; tests must treat them as read-only.
"""

import json
from pathlib import Path
from types import SimpleNamespace

import pytest
import torch

from accentconv import toydata
from accentconv.data import load_manifest
from accentconv.features import Lexicon
from accentconv.preprocess import preprocess_corpus, resolve_cache_dir
from accentconv.training import build_stage_datasets, run_pipeline

# step budgets for the shared pipeline: stage-1 mel halves around step 500,
# stage-2 validation is cleanly monotone through 600, stage-3 improvement
# shows well before 400
PIPELINE_BUDGETS = {1: 1600, 2: 600, 3: 400}


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    torch.set_num_threads(1)
    root = tmp_path_factory.mktemp("corpus") / "toy"
    cfg = toydata.build_toy_corpus(root, seed=0)
    result = preprocess_corpus(cfg)
    cache = resolve_cache_dir(cfg)
    lexicon = Lexicon.load(cfg.features.lexicon_path)
    splits = {name: load_manifest(path)
              for name, path in result.split_paths.items()}
    return SimpleNamespace(
        root=root,
        cfg=cfg,
        cache=cache,
        lexicon=lexicon,
        model_cfg=cfg.resolved_model(lexicon.n_phones, len(toydata.SPEAKERS)),
        manifest=load_manifest(result.manifest_path),
        splits=splits,
        datasets=build_stage_datasets(cfg, splits["train"], splits["val"]),
    )


@pytest.fixture(scope="session")
def pipeline(toy_corpus, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("pipeline_run")
    results = run_pipeline(toy_corpus.cfg, toy_corpus.model_cfg,
                           toy_corpus.datasets, run_dir,
                           step_budgets=PIPELINE_BUDGETS)
    return SimpleNamespace(run_dir=run_dir, results=results)


VOCODER_STUB = """\
import struct, sys, wave

mel_path, wav_path = sys.argv[1], sys.argv[2]
with open(mel_path, "rb") as f:
    blob = f.read()
assert blob[:4] == b"ACFT", "not an ACFT file"
_, ndim = struct.unpack_from("<II", blob, 4)
dims = struct.unpack_from(f"<{ndim}I", blob, 12)
n_samples = dims[0] * 100
with wave.open(wav_path, "wb") as w:
    w.setnchannels(1)
    w.setsampwidth(2)
    w.setframerate(8000)
    w.writeframes(b"\\x00\\x00" * n_samples)
"""

ASR_STUB = """\
import json, sys
from pathlib import Path

map_path, wav_path = sys.argv[1], sys.argv[2]
table = json.loads(Path(map_path).read_text())
stem = Path(wav_path).stem
if stem not in table:
    print(f"unknown utterance {stem}", file=sys.stderr)
    sys.exit(3)
print(table[stem])
"""

FAIL_STUB = """\
import sys
print("adapter exploded: unit test", file=sys.stderr)
sys.exit(2)
"""


@pytest.fixture(scope="session")
def adapters(tmp_path_factory):
    """Stub adapter commands; `asr(mapping)` builds an echo-ASR whose output
    is looked up by wav stem in the given mapping."""
    d = tmp_path_factory.mktemp("adapters")
    (d / "vocoder.py").write_text(VOCODER_STUB)
    (d / "asr.py").write_text(ASR_STUB)
    (d / "fail.py").write_text(FAIL_STUB)

    def make_asr(mapping: dict, name: str = "map.json") -> str:
        path = d / name
        path.write_text(json.dumps(mapping))
        return f"python3 {d / 'asr.py'} {path}"

    return SimpleNamespace(
        dir=d,
        vocoder=f"python3 {d / 'vocoder.py'}",
        fail=f"python3 {d / 'fail.py'}",
        asr=make_asr,
    )


def read_log(path) -> list:
    return [json.loads(line)
            for line in Path(path).read_text().splitlines() if line.strip()]

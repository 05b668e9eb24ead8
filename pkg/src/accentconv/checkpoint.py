"""Checkpoint archives.

A checkpoint is a zip holding:

    meta.json                      step, stage tag, lineage, model sizes
    config.yaml                    echo of the run configuration
    params/<group>/<name>.acft     one tensor per parameter, float32

Parameters are grouped by the freeze-schedule partition so per-group
before/after comparisons stay trivial. Loading reconstructs the network
from the stored model sizes and copies every tensor bit-for-bit.
"""

import dataclasses
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
import yaml

from . import acft
from .config import Config, ModelConfig, config_from_dict
from .model import AccentConverter

FORMAT = 1

META_NAME = "meta.json"
CONFIG_NAME = "config.yaml"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: AccentConverter, cfg: Config, step: int,
                    stage: int, lineage: list | None = None) -> None:
    """Write the archive; `lineage` lists the stages already completed,
    e.g. ["stage1", "stage2"] for a model about to enter fine-tuning."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "step": int(step),
        "stage": int(stage),
        "lineage": list(lineage or []),
        "model": dataclasses.asdict(model.cfg),
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(META_NAME, json.dumps(meta, indent=2))
        zf.writestr(CONFIG_NAME, yaml.safe_dump(cfg.to_dict(), sort_keys=False))
        for group, params in model.parameter_groups().items():
            for name, param in params.items():
                blob = acft.tensor_bytes(param.detach().cpu().numpy())
                zf.writestr(f"params/{group}/{name}.acft", blob)


def _read_meta(zf: zipfile.ZipFile, path) -> dict:
    try:
        meta = json.loads(zf.read(META_NAME))
    except KeyError:
        raise CheckpointError(f"{path}: not a checkpoint (no {META_NAME})") from None
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format "
                              f"{meta.get('format')!r}")
    return meta


def read_meta(path) -> dict:
    with zipfile.ZipFile(Path(path)) as zf:
        return _read_meta(zf, path)


def load_checkpoint(path) -> tuple[AccentConverter, Config, dict]:
    """Rebuild the model and run config stored at `path`."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive: {exc}") from exc
    with zf:
        meta = _read_meta(zf, path)
        cfg = config_from_dict(yaml.safe_load(zf.read(CONFIG_NAME)))
        model_kwargs = dict(meta["model"])
        if "ffn_kernels" in model_kwargs:
            model_kwargs["ffn_kernels"] = tuple(model_kwargs["ffn_kernels"])
        model = AccentConverter(ModelConfig(**model_kwargs))
        tensors = {}
        for info in zf.infolist():
            if not info.filename.startswith("params/"):
                continue
            parts = info.filename.split("/")
            if len(parts) != 3 or not parts[2].endswith(".acft"):
                raise CheckpointError(f"{path}: stray archive member {info.filename}")
            name = parts[2][: -len(".acft")]
            tensors[name] = acft.tensor_from_bytes(zf.read(info), info.filename)
    expected = {name: p for group in model.parameter_groups().values()
                for name, p in group.items()}
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter mismatch (missing {missing[:3]}, extra {extra[:3]})"
        )
    with torch.no_grad():
        for name, param in expected.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"{path}: {name} has shape {arr.shape}, expected "
                    f"{tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(np.ascontiguousarray(arr)))
    return model, cfg, meta


def group_state(model: AccentConverter) -> dict:
    """Snapshot of every parameter as float32 arrays, keyed group -> name."""
    return {
        group: {name: p.detach().cpu().numpy().copy() for name, p in params.items()}
        for group, params in model.parameter_groups().items()
    }


def groups_equal(a: dict, b: dict, groups) -> bool:
    """Bit-exact comparison of the named groups between two snapshots."""
    for g in groups:
        if a[g].keys() != b[g].keys():
            return False
        for name in a[g]:
            if not np.array_equal(a[g][name], b[g][name]):
                return False
    return True

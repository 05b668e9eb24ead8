"""Figure rendering for evaluation reports and training logs."""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def save_mel_figure(mel: np.ndarray, path, title: str = "") -> Path:
    """Heatmap of a (T, n_mels) log-mel matrix, time on x."""
    fig, ax = plt.subplots(figsize=(8, 3))
    im = ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto",
                   interpolation="nearest", cmap="magma")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="log energy")
    return _save(fig, path)


def save_wer_bars(per_speaker: dict, path) -> Path:
    """Bar chart of per-speaker WER."""
    speakers = sorted(per_speaker)
    rates = [per_speaker[s] for s in speakers]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(speakers) + 2), 3.5))
    ax.bar(range(len(speakers)), rates, color="steelblue")
    ax.set_xticks(range(len(speakers)))
    ax.set_xticklabels(speakers, rotation=30, ha="right")
    ax.set_ylabel("WER")
    ax.set_ylim(bottom=0)
    for i, r in enumerate(rates):
        ax.text(i, r, f"{r:.2f}", ha="center", va="bottom", fontsize=8)
    return _save(fig, path)


def read_log(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def save_loss_curves(log_path, path, components=("total",)) -> Path:
    """Train/validation loss curves from a JSON-lines stage log."""
    rows = read_log(log_path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for comp in components:
        train = [(r["step"], r[comp]) for r in rows
                 if r["event"] == "train" and comp in r]
        if train:
            steps, vals = zip(*train)
            ax.plot(steps, vals, label=f"train {comp}")
        val = [(r["step"], r[comp]) for r in rows
               if r["event"] == "val" and comp in r]
        if val:
            steps, vals = zip(*val)
            ax.plot(steps, vals, "o--", label=f"val {comp}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if rows:
        ax.set_title(f"stage {rows[0]['stage']}")
    ax.legend()
    return _save(fig, path)

"""Stage losses, learning-rate schedule, and the three-stage training driver.

Stage 1 trains everything except the speech encoder as a TTS system. Stage 2
trains only the speech encoder to match the text branch's length-regulated
hidden states. Stage 3 fine-tunes the speech encoder on accented data with a
weighted sum of the hidden-state distance and a mel distance between the two
branches' decoder outputs. Teacher-side tensors are detached, so no gradient
ever reaches the text branch, and frozen groups are excluded from the
optimizer entirely (requires_grad is off).
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ModelConfig, StageConfig
from .data import Batch, load_utterance_features, make_batch
from .model import AccentConverter, DurationPredictor, TextBranchOutput


# ---------------------------------------------------------------------------
# masked reductions

def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def masked_l1(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean absolute error over valid entries; mask is (B, T) bool."""
    _check_same_shape(pred, target, "l1")
    diff = (pred - target).abs()
    if diff.dim() == mask.dim() + 1:
        valid = mask.sum() * diff.size(-1)
        diff = diff * mask.unsqueeze(-1).to(diff.dtype)
    else:
        valid = mask.sum()
        diff = diff * mask.to(diff.dtype)
    return diff.sum() / valid.clamp(min=1).to(diff.dtype)


def masked_mse(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean squared error over valid entries; mask is (B, T) bool."""
    _check_same_shape(pred, target, "mse")
    diff = (pred - target) ** 2
    if diff.dim() == mask.dim() + 1:
        valid = mask.sum() * diff.size(-1)
        diff = diff * mask.unsqueeze(-1).to(diff.dtype)
    else:
        valid = mask.sum()
        diff = diff * mask.to(diff.dtype)
    return diff.sum() / valid.clamp(min=1).to(diff.dtype)


def frame_norm_mean(a: Tensor, b: Tensor, mask: Tensor, p: int) -> Tensor:
    """Mean over valid frames of the per-frame p-norm of (a - b).

    `a`, `b` are (B, T, D); `mask` is (B, T) bool. This is the frame-sequence
    reading of the alignment and mel distances: each frame contributes the
    norm of its difference vector, averaged over valid frames only.
    """
    _check_same_shape(a, b, "frame")
    diff = (a - b) * mask.unsqueeze(-1).to(a.dtype)
    if p == 2:
        sq = (diff ** 2).sum(dim=-1)
        # zero frames take the constant branch: exact 0 with zero gradient
        # (sqrt alone has no finite derivative there)
        norms = torch.where(sq > 0, torch.sqrt(sq.clamp(min=1e-24)), sq * 0.0)
    elif p == 1:
        norms = diff.abs().sum(dim=-1)
    else:
        raise ValueError(f"unsupported norm order {p}")
    norms = norms * mask.to(norms.dtype)
    return norms.sum() / mask.sum().clamp(min=1).to(norms.dtype)


def embedding_distance(h_t: Tensor, h_s: Tensor, mask: Tensor) -> Tensor:
    """Mean per-frame Euclidean distance between the two branches."""
    return frame_norm_mean(h_t, h_s, mask, p=2)


def mel_distance(m_t: Tensor, m_s: Tensor, mask: Tensor) -> Tensor:
    """Mean per-frame L1 distance between the two branches' mels."""
    return frame_norm_mean(m_t, m_s, mask, p=1)


# ---------------------------------------------------------------------------
# stage losses

@dataclass
class LossBreakdown:
    """Stage loss with its components; inapplicable components are zero."""

    total: Tensor
    mel: Tensor
    duration: Tensor
    pitch: Tensor
    energy: Tensor
    emb: Tensor
    mel_star: Tensor

    def parts(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "mel": float(self.mel.detach()),
            "duration": float(self.duration.detach()),
            "pitch": float(self.pitch.detach()),
            "energy": float(self.energy.detach()),
            "emb": float(self.emb.detach()),
            "mel_star": float(self.mel_star.detach()),
        }


def _zero_like(x: Tensor) -> Tensor:
    return torch.zeros((), dtype=x.dtype, device=x.device)


def loss_stage1(out: TextBranchOutput, batch: Batch) -> LossBreakdown:
    """TTS loss: mel reconstruction (both decoder outputs) + duration in the
    log(d+1) domain + pitch + energy, all masked, summed with unit weights."""
    mel = (masked_l1(out.mel_before, batch.mel_targets, batch.frame_mask)
           + masked_l1(out.mel_after, batch.mel_targets, batch.frame_mask))
    duration = masked_mse(out.log_duration_pred,
                          DurationPredictor.to_target(batch.durations),
                          batch.phone_mask)
    pitch = masked_mse(out.pitch_pred, batch.pitch, batch.frame_mask)
    energy = masked_mse(out.energy_pred, batch.energy, batch.frame_mask)
    total = mel + duration + pitch + energy
    zero = _zero_like(total)
    return LossBreakdown(total=total, mel=mel, duration=duration, pitch=pitch,
                         energy=energy, emb=zero, mel_star=zero)


def loss_stage2(h_s: Tensor, h_t: Tensor, frame_mask: Tensor) -> LossBreakdown:
    """Alignment loss: mean per-frame Euclidean distance to the (constant)
    text-branch states."""
    emb = embedding_distance(h_t.detach(), h_s, frame_mask)
    zero = _zero_like(emb)
    return LossBreakdown(total=emb, mel=zero, duration=zero, pitch=zero,
                         energy=zero, emb=emb, mel_star=zero)


def loss_stage3(h_s: Tensor, h_t: Tensor, m_s: Tensor, m_t: Tensor,
                lambda1: float, lambda2: float, frame_mask: Tensor,
                use_mel_star: bool = True) -> LossBreakdown:
    """Fine-tuning loss: lambda1 * alignment + lambda2 * mel distance between
    the branches' decoded mels. The mel term can be switched off (the
    baseline ablation), leaving lambda1 * alignment only."""
    emb = embedding_distance(h_t.detach(), h_s, frame_mask)
    if use_mel_star:
        mel_star = mel_distance(m_t.detach(), m_s, frame_mask)
    else:
        mel_star = _zero_like(emb)
    total = lambda1 * emb + lambda2 * mel_star
    zero = _zero_like(total)
    return LossBreakdown(total=total, mel=zero, duration=zero, pitch=zero,
                         energy=zero, emb=emb, mel_star=mel_star)


# ---------------------------------------------------------------------------
# learning-rate schedule

def lr_schedule(step: int, warmup_steps: int, d: int) -> float:
    """Warmup schedule: d^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    return d ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


def stage_lr(stage_cfg: StageConfig, step: int, d_model: int) -> float:
    if stage_cfg.schedule == "constant":
        if step < 1:
            raise ValueError(f"schedule step must be >= 1, got {step}")
        return stage_cfg.constant_lr
    return lr_schedule(step, stage_cfg.warmup_steps, d_model)


# ---------------------------------------------------------------------------
# finite-difference gradient verification

def gradient_check(loss_fn, params, eps_fd: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0,
                   denom_floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` is re-evaluated after each in-place parameter nudge, so it must
    rebuild its forward pass on every call. Use float64 parameters and a
    dropout-free (eval-mode) model; `max_entries` caps how many entries per
    tensor are probed (None = all). `denom_floor` sets the scale below which
    entries are compared absolutely instead of relatively: central
    differences carry cancellation noise of roughly loss * 1e-16 / eps_fd,
    so entries smaller than that cannot be certified in relative terms.
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("no parameters to check")
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for param, grad in zip(params, analytic):
        flat = param.detach().view(-1)
        n = flat.numel()
        if max_entries is None or max_entries >= n:
            indices = range(n)
        else:
            indices = rng.choice(n, size=max_entries, replace=False)
        grad_flat = (torch.zeros_like(flat) if grad is None
                     else grad.reshape(-1))
        for i in indices:
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + eps_fd
                up = float(loss_fn())
                flat[i] = orig - eps_fd
                down = float(loss_fn())
                flat[i] = orig
            numeric = (up - down) / (2.0 * eps_fd)
            a = float(grad_flat[i])
            denom = max(abs(numeric), abs(a), denom_floor)
            worst = max(worst, abs(numeric - a) / denom)
    return worst


# ---------------------------------------------------------------------------
# stage driver

@dataclass
class StageData:
    train: list
    val: list


@dataclass
class StageResult:
    stage: int
    steps: int
    best_val: float
    best_path: Path
    last_path: Path
    log_path: Path


def stage_breakdown(model: AccentConverter, batch: Batch, stage_no: int,
                    stage_cfg: StageConfig, source_kind: str) -> LossBreakdown:
    """Forward the branches a stage needs and evaluate its loss. Teacher-side
    activations are computed without gradient tracking."""
    if stage_no == 1:
        out = model.forward_text(batch.phone_ids, batch.phone_mask,
                                 batch.speaker_ids, durations=batch.durations,
                                 pitch_target=batch.pitch,
                                 energy_target=batch.energy)
        if not torch.equal(out.frame_mask, batch.frame_mask):
            raise RuntimeError("teacher-forced frame mask mismatch")
        return loss_stage1(out, batch)
    if stage_no == 2:
        with torch.no_grad():
            phone_states = model.text_encoder(batch.phone_ids, batch.phone_mask)
            h_t, reg_mask = model.length_regulator(phone_states, batch.durations,
                                                   batch.phone_mask)
        if not torch.equal(reg_mask, batch.frame_mask):
            raise RuntimeError("teacher-forced frame mask mismatch")
        h_s = model.encode_speech(batch.features, batch.frame_mask, source_kind)
        return loss_stage2(h_s, h_t, batch.frame_mask)
    if stage_no == 3:
        with torch.no_grad():
            teacher = model.forward_text(batch.phone_ids, batch.phone_mask,
                                         batch.speaker_ids,
                                         durations=batch.durations,
                                         pitch_target=batch.pitch,
                                         energy_target=batch.energy)
        if not torch.equal(teacher.frame_mask, batch.frame_mask):
            raise RuntimeError("teacher-forced frame mask mismatch")
        student = model.forward_speech(batch.features, batch.frame_mask,
                                       source_kind, batch.speaker_ids,
                                       pitch_target=batch.pitch,
                                       energy_target=batch.energy)
        return loss_stage3(student.hidden, teacher.hidden, student.mel_after,
                           teacher.mel_after, stage_cfg.lambda_emb,
                           stage_cfg.lambda_mel_star, batch.frame_mask,
                           use_mel_star=stage_cfg.use_mel_star)
    raise ValueError(f"unknown stage {stage_no}")


def _set_stage_modes(model: AccentConverter, stage_cfg: StageConfig) -> None:
    """Trainable groups get gradients and train-mode; frozen submodules run
    in eval mode so they behave like the fixed functions they are. Gradient
    buffers left over from an earlier stage are dropped so frozen parameters
    carry no gradient state at all."""
    model.set_trainable_groups(stage_cfg.trainable_groups)
    for p in model.parameters():
        if not p.requires_grad:
            p.grad = None
    model.train()
    for name in model.frozen_module_names(stage_cfg.trainable_groups):
        getattr(model, name).eval()


def evaluate_stage_loss(model: AccentConverter, items: list, stage_no: int,
                        stage_cfg: StageConfig, source_kind: str,
                        batch_size: int | None = None) -> dict:
    """Averaged LossBreakdown parts over `items` in eval mode."""
    if not items:
        raise ValueError("no validation items")
    bs = batch_size or stage_cfg.batch_size
    was_training = model.training
    model.eval()
    totals: dict[str, float] = {}
    n = 0
    with torch.no_grad():
        for start in range(0, len(items), bs):
            chunk = items[start:start + bs]
            breakdown = stage_breakdown(model, make_batch(chunk), stage_no,
                                        stage_cfg, source_kind)
            for key, value in breakdown.parts().items():
                totals[key] = totals.get(key, 0.0) + value * len(chunk)
            n += len(chunk)
    if was_training:
        model.train()
    return {k: v / n for k, v in totals.items()}


def run_stage(model: AccentConverter, cfg: Config, stage_no: int,
              data: StageData, run_dir, lineage: list | None = None,
              max_steps: int | None = None) -> StageResult:
    """Train one stage to its step budget, logging JSON lines per event and
    writing best-by-validation and last checkpoints."""
    run_dir = Path(run_dir)
    stage_cfg = cfg.training.stage_config(stage_no)
    stage_cfg.validate()
    budget = max_steps if max_steps is not None else stage_cfg.max_steps
    if not data.train:
        raise ValueError(f"stage {stage_no}: no training items")

    torch.set_num_threads(1)
    torch.manual_seed(cfg.training.seed + 1000 * stage_no)
    rng = np.random.default_rng(cfg.training.seed + 1000 * stage_no)

    _set_stage_modes(model, stage_cfg)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(
        trainable, lr=stage_lr(stage_cfg, 1, model.cfg.hidden_dim),
        betas=(stage_cfg.beta1, stage_cfg.beta2), eps=stage_cfg.adam_eps)

    log_path = run_dir / "logs" / f"stage{stage_no}.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    best_path = ckpt_dir / f"stage{stage_no}_best.ckpt"
    last_path = ckpt_dir / f"stage{stage_no}_last.ckpt"
    out_lineage = list(lineage or []) + [f"stage{stage_no}"]

    items = sorted(data.train, key=lambda it: it.utt_id)
    source_kind = cfg.features.kind
    best_val = math.inf
    step = 0
    with open(log_path, "w", encoding="utf-8") as log:
        def emit(event: str, step: int, lr: float, parts: dict) -> None:
            record = {"event": event, "stage": stage_no, "step": step,
                      "lr": lr, **parts}
            log.write(json.dumps(record) + "\n")
            log.flush()

        def validate(step: int, lr: float) -> None:
            nonlocal best_val
            if not data.val:
                return
            parts = evaluate_stage_loss(model, data.val, stage_no, stage_cfg,
                                        source_kind)
            emit("val", step, lr, parts)
            if parts["total"] < best_val:
                best_val = parts["total"]
                save_checkpoint(best_path, model, cfg, step, stage_no,
                                out_lineage)

        while step < budget:
            order = rng.permutation(len(items))
            for start in range(0, len(items), stage_cfg.batch_size):
                step += 1
                lr = stage_lr(stage_cfg, step, model.cfg.hidden_dim)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                chunk = [items[i] for i in order[start:start + stage_cfg.batch_size]]
                breakdown = stage_breakdown(model, make_batch(chunk), stage_no,
                                            stage_cfg, source_kind)
                if not torch.isfinite(breakdown.total):
                    raise RuntimeError(
                        f"non-finite loss at stage {stage_no} step {step}"
                    )
                optimizer.zero_grad(set_to_none=True)
                breakdown.total.backward()
                if stage_cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(trainable, stage_cfg.grad_clip)
                optimizer.step()
                if step == 1 or step % cfg.training.log_every == 0 or step == budget:
                    emit("train", step, lr, breakdown.parts())
                if step % cfg.training.val_every == 0 or step == budget:
                    validate(step, lr)
                if step >= budget:
                    break

    save_checkpoint(last_path, model, cfg, step, stage_no, out_lineage)
    if not best_path.exists():
        save_checkpoint(best_path, model, cfg, step, stage_no, out_lineage)
        best_val = float("nan")
    return StageResult(stage=stage_no, steps=step, best_val=best_val,
                       best_path=best_path, last_path=last_path,
                       log_path=log_path)


# ---------------------------------------------------------------------------
# pipeline orchestration

def build_stage_datasets(cfg: Config, train_records: list,
                         val_records: list) -> dict:
    """Materialize cached features, grouped by accent tag, for the stages'
    dataset selectors. An accented-speaker allowlist in the data config
    restricts fine-tuning data; empty means all accented speakers jointly."""
    out: dict[str, StageData] = {}
    for tag in ("native", "accented"):
        train = [r for r in train_records if r.accent_tag == tag]
        val = [r for r in val_records if r.accent_tag == tag]
        if tag == "accented" and cfg.data.accented_speakers:
            keep = set(cfg.data.accented_speakers)
            train = [r for r in train if r.speaker in keep]
            val = [r for r in val if r.speaker in keep]
        out[tag] = StageData(
            train=[load_utterance_features(r, cfg) for r in train],
            val=[load_utterance_features(r, cfg) for r in val])
    return out


def stage_plan(cfg: Config) -> tuple:
    return (1, 2, 3) if cfg.training.use_stage2 else (1, 3)


def check_stage_prerequisite(cfg: Config, stage_no: int, meta: dict | None) -> None:
    """Validate that `meta` (checkpoint metadata, or None) may seed `stage_no`."""
    if stage_no == 1:
        return
    lineage = set((meta or {}).get("lineage", ()))
    if stage_no == 2:
        if "stage1" not in lineage:
            raise CheckpointError(
                "stage 2 requires a stage-1 checkpoint (got lineage "
                f"{sorted(lineage) or 'none'})"
            )
        return
    needed = "stage2" if cfg.training.use_stage2 else "stage1"
    if needed not in lineage:
        hint = ("" if cfg.training.use_stage2
                else " (training.use_stage2=false expects a stage-1 checkpoint)")
        raise CheckpointError(
            f"stage 3 requires a {needed.replace('stage', 'stage-')} checkpoint"
            f"{hint}; got lineage {sorted(lineage) or 'none'}"
        )


def run_pipeline(cfg: Config, model_cfg: ModelConfig, datasets: dict,
                 run_dir, init_checkpoint=None,
                 step_budgets: dict | None = None) -> dict:
    """Run the configured stages in order, chaining checkpoints.

    `datasets` maps accent tag -> StageData; `step_budgets` optionally caps
    steps per stage (handy for smoke runs). Returns {stage: StageResult}.
    """
    run_dir = Path(run_dir)
    stages = stage_plan(cfg)
    if init_checkpoint is not None:
        model, _, meta = load_checkpoint(init_checkpoint)
        done = {int(tag.replace("stage", "")) for tag in meta.get("lineage", ())}
        stages = tuple(s for s in stages if s not in done)
        lineage = list(meta.get("lineage", ()))
    else:
        torch.manual_seed(cfg.training.seed)
        model = AccentConverter(model_cfg)
        meta = None
        lineage = []
    results: dict[int, StageResult] = {}
    for stage_no in stages:
        check_stage_prerequisite(cfg, stage_no, meta)
        stage_cfg = cfg.training.stage_config(stage_no)
        data = datasets.get(stage_cfg.dataset)
        if data is None or not data.train:
            raise ValueError(f"stage {stage_no}: no {stage_cfg.dataset!r} data")
        budget = (step_budgets or {}).get(stage_no)
        result = run_stage(model, cfg, stage_no, data, run_dir,
                           lineage=lineage, max_steps=budget)
        results[stage_no] = result
        model, _, meta = load_checkpoint(result.best_path)
        lineage = list(meta["lineage"])
    return results

"""Progressive multi-step training with stage-to-stage distillation.

Every batch is consumed once per schedule step: shuffle at that step's grid
scale (scale 1 leaves the batch untouched), forward, cross-entropy on the
step's supervised head plus a temperature-softened KL term against the
step's teacher head (teacher logits detached from the same forward), one
backward, one optimizer update. Evaluation never shuffles.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError, RunConfig, ScheduleStep
from .data import DatasetManifest, Sample, load_image, standard_augment
from .model import GuidedNet, StageOutputs, combined_prediction, save_checkpoint
from .patch_shuffle import ShuffleSpec, shuffle_batch

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch",
    "lr",
    "acc_s3",
    "acc_s4",
    "acc_s5",
    "acc_concat",
    "acc_combined",
)

CE_CLAMP = 1e-12


class TrainingError(RuntimeError):
    """Non-finite loss or other mid-run failure."""


@dataclass
class LossRecord:
    epoch: int
    batch: int
    step_index: int
    scale: int
    head: str
    ce: float
    kd: float
    total: float


def cross_entropy(pred, label: int) -> float:
    """-log p[label] for a post-softmax probability vector."""
    pred = np.asarray(pred, dtype=np.float64)
    if abs(pred.sum() - 1.0) > 1e-5:
        raise ValueError(f"probabilities sum to {pred.sum():.6f}, expected 1")
    if not (0 <= label < pred.shape[-1]):
        raise ValueError(f"label {label} out of range")
    p = pred[label]
    if p < CE_CLAMP:
        log.warning("clamping zero probability at label %d", label)
        p = CE_CLAMP
    return float(-math.log(p))


def kd_loss(
    student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float = 4.0
) -> torch.Tensor:
    """T^2-scaled KL(teacher || student) over temperature-softened softmaxes.

    Reduces over the class axis; leading batch dimensions are averaged. The
    teacher is detached so no gradient reaches its parameters.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"logit shapes differ: {tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    t = temperature
    log_ps = F.log_softmax(student_logits / t, dim=-1)
    log_pt = F.log_softmax(teacher_logits.detach() / t, dim=-1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=-1)
    return t * t * kl.mean()


def batch_to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    """(H, W, 3) uint8 images -> normalized (B, 3, H, W) float tensor."""
    arr = np.stack(images).astype(np.float32) / 255.0
    arr = (arr - 0.5) / 0.5
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def progressive_step(
    batch: torch.Tensor,
    labels: torch.Tensor,
    step: ScheduleStep,
    model: GuidedNet,
    optimizer: torch.optim.Optimizer,
    cfg: RunConfig,
    rng: np.random.Generator,
    epoch: int = 0,
    batch_index: int = 0,
    step_index: int = 0,
) -> LossRecord:
    """One schedule step on one batch: shuffle, forward, CE (+KD), update."""
    spec = ShuffleSpec(step.scale, step.shuffle_range if step.scale > 1 else 1)
    shuffled = shuffle_batch(batch, spec, rng)
    out = model(shuffled, use_attention=cfg.use_attention, target_classes=labels)
    logits = out.logits(step.head)
    ce = F.cross_entropy(logits, labels)
    kd = (
        cfg.kd_weight * kd_loss(logits, out.logits(step.teacher), cfg.kd_temperature)
        if step.teacher is not None
        else logits.new_zeros(())
    )
    total = ce + kd
    if not torch.isfinite(total):
        raise TrainingError(
            f"non-finite loss at epoch {epoch} batch {batch_index} step {step_index} "
            f"(head {step.head}, ce={ce.item()}, kd={kd.item()})"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return LossRecord(
        epoch=epoch,
        batch=batch_index,
        step_index=step_index,
        scale=step.scale,
        head=step.head,
        ce=float(ce.item()),
        kd=float(kd.item()),
        total=float(total.item()),
    )


def _load_split(samples: list[Sample]) -> tuple[list[np.ndarray], np.ndarray]:
    images = []
    labels = []
    for s in samples:
        try:
            images.append(load_image(s.path))
            labels.append(s.label)
        except OSError as e:
            log.warning("skipping unreadable image %s: %s", s.path, e)
    return images, np.asarray(labels, dtype=np.int64)


@torch.no_grad()
def _head_hits(out: StageOutputs, labels: torch.Tensor, probs: bool) -> dict[str, int]:
    hits = {}
    for head in ("s3", "s4", "s5", "concat"):
        hits[head] = int((out.logits(head).argmax(dim=1) == labels).sum())
    hits["combined"] = int(
        (combined_prediction(out, probs=probs).argmax(dim=1) == labels).sum()
    )
    return hits


def evaluate(
    model: GuidedNet,
    manifest: DatasetManifest,
    cfg: RunConfig,
    split: str = "test",
    collect_logits: bool = False,
) -> dict:
    """Per-head and combined accuracy on a split; never shuffles, no rng."""
    samples = getattr(manifest, split)
    images, labels_arr = _load_split(samples)
    if not images:
        raise ConfigError(f"no readable images in {split} split")
    model.eval()
    totals = {h: 0 for h in ("s3", "s4", "s5", "concat", "combined")}
    records = []
    n = len(images)
    for start in range(0, n, cfg.batch_size):
        chunk = images[start : start + cfg.batch_size]
        aug = [
            standard_augment(
                img, training=False, resize_to=manifest.resize_to, crop_to=manifest.crop_to
            )
            for img in chunk
        ]
        x = batch_to_tensor(aug)
        y = torch.from_numpy(labels_arr[start : start + cfg.batch_size])
        with torch.no_grad():
            out = model(x, use_attention=cfg.use_attention)
        for head, hit in _head_hits(out, y, cfg.combine_probs).items():
            totals[head] += hit
        if collect_logits:
            combined = combined_prediction(out, probs=cfg.combine_probs)
            for i in range(len(chunk)):
                records.append(
                    {
                        "path": samples[start + i].path,
                        "label": int(y[i]),
                        "logits_s3": out.logits_s3[i].tolist(),
                        "logits_s4": out.logits_s4[i].tolist(),
                        "logits_s5": out.logits_s5[i].tolist(),
                        "logits_concat": out.logits_concat[i].tolist(),
                        "predicted": int(combined[i].argmax()),
                    }
                )
    report = {f"acc_{h}": totals[h] / n for h in totals}
    report["count"] = n
    if collect_logits:
        report["per_image"] = records
    return report


def write_metrics_csv(path: str | Path, history: list[dict], num_steps: int) -> None:
    cols = list(METRIC_COLUMNS) + [
        f"step{i}_{part}" for i in range(num_steps) for part in ("ce", "kd", "total")
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow(row)


@dataclass
class TrainResult:
    history: list[dict]
    loss_records: list[LossRecord]
    best_epoch: int
    best_accuracy: float
    best_checkpoint: str | None
    last_checkpoint: str | None


def train(manifest: DatasetManifest, cfg: RunConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Full training loop; returns history and checkpoint locations.

    Each epoch shuffles sample order, augments, and runs every schedule step
    per batch; learning rate follows cosine annealing; the best checkpoint by
    combined test accuracy is kept alongside the last one.
    """
    if manifest.num_classes != cfg.num_classes:
        raise ConfigError(
            f"dataset has {manifest.num_classes} classes but config says {cfg.num_classes}"
        )
    if not manifest.train:
        raise ConfigError("training split is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = GuidedNet(cfg)
    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=cfg.learning_rate,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(1, cfg.epochs)
    )
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    train_images, train_labels = _load_split(manifest.train)
    if len(train_images) == 0:
        raise ConfigError("no readable training images")

    history: list[dict] = []
    loss_records: list[LossRecord] = []
    best_acc, best_epoch = -1.0, -1
    best_path = str(out_dir / "best.pt") if out_dir else None
    last_path = str(out_dir / "last.pt") if out_dir else None

    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_images))
        step_sums = [[0.0, 0.0, 0.0] for _ in cfg.schedule]
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            aug = [
                standard_augment(
                    train_images[i],
                    training=True,
                    rng=rng,
                    resize_to=manifest.resize_to,
                    crop_to=manifest.crop_to,
                )
                for i in idx
            ]
            x = batch_to_tensor(aug)
            y = torch.from_numpy(train_labels[idx])
            for si, step in enumerate(cfg.schedule):
                rec = progressive_step(
                    x, y, step, model, optimizer, cfg, rng,
                    epoch=epoch, batch_index=n_batches, step_index=si,
                )
                loss_records.append(rec)
                step_sums[si][0] += rec.ce
                step_sums[si][1] += rec.kd
                step_sums[si][2] += rec.total
            n_batches += 1
        report = evaluate(model, manifest, cfg)
        row = {"epoch": epoch, "lr": optimizer.param_groups[0]["lr"], **{
            k: v for k, v in report.items() if k.startswith("acc_")
        }}
        for si, (ce, kd, tot) in enumerate(step_sums):
            row[f"step{si}_ce"] = ce / n_batches
            row[f"step{si}_kd"] = kd / n_batches
            row[f"step{si}_total"] = tot / n_batches
        history.append(row)
        scheduler.step()
        log.info(
            "epoch %d: combined acc %.4f, concat acc %.4f",
            epoch, row["acc_combined"], row["acc_concat"],
        )
        if out_dir is not None:
            if row["acc_combined"] > best_acc:
                save_checkpoint(best_path, model, cfg, epoch, history, optimizer)
            save_checkpoint(last_path, model, cfg, epoch, history, optimizer)
            write_metrics_csv(out_dir / "metrics.csv", history, len(cfg.schedule))
        if row["acc_combined"] > best_acc:
            best_acc, best_epoch = row["acc_combined"], epoch

    if cfg.epochs == 0 and out_dir is not None:
        save_checkpoint(last_path, model, cfg, -1, history, optimizer)
        save_checkpoint(best_path, model, cfg, -1, history, optimizer)
        write_metrics_csv(out_dir / "metrics.csv", history, len(cfg.schedule))

    return TrainResult(
        history=history,
        loss_records=[r for r in loss_records],
        best_epoch=best_epoch,
        best_accuracy=best_acc,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
    )

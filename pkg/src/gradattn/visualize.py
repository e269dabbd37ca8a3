"""Attention heatmap export: grayscale maps, color overlays, logit dumps."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .model import GuidedNet, combined_prediction
from .training import batch_to_tensor

log = logging.getLogger(__name__)


def normalize_heatmap(a: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map degenerates to all zeros."""
    a = np.asarray(a, dtype=np.float64)
    span = a.max() - a.min()
    if span == 0:
        return np.zeros_like(a)
    return (a - a.min()) / span


def upsample(a: np.ndarray, size: int) -> np.ndarray:
    """Bilinear upsample a (u, v) map to (size, size)."""
    return cv2.resize(a.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a [0, 1] heatmap over an RGB uint8 image with a jet colormap."""
    colored = cv2.applyColorMap((heat * 255).astype(np.uint8), cv2.COLORMAP_JET)
    colored = cv2.cvtColor(colored, cv2.COLOR_BGR2RGB)
    return ((1 - alpha) * image + alpha * colored).clip(0, 255).astype(np.uint8)


def export_heatmaps(
    model: GuidedNet,
    image_paths: list[str | Path],
    out_dir: str | Path,
    resize_to: int | None = None,
    crop_to: int | None = None,
) -> tuple[list[dict], int]:
    """Write stage heatmaps + overlays + a logits JSON per readable image.

    Images are eval-transformed (resize, center crop) before the forward
    pass; heatmaps are upsampled to the network input size. Returns the
    artifact descriptions and the count of skipped (unreadable) inputs.
    """
    from .data import load_image, standard_augment  # local import avoids a cycle

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    resize_to = resize_to or cfg.resize_size
    crop_to = crop_to or cfg.input_size
    model.eval()
    artifacts, skipped = [], 0
    for path in image_paths:
        path = Path(path)
        try:
            img = load_image(path)
        except (OSError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", path, e)
            skipped += 1
            continue
        view = standard_augment(img, training=False, resize_to=resize_to, crop_to=crop_to)
        x = batch_to_tensor([view])
        out = model(x, use_attention=True)
        combined = combined_prediction(out, probs=cfg.combine_probs)[0]
        record = {
            "source": str(path),
            "predicted_class": int(combined.argmax()),
            "logits": {
                head: out.logits(head)[0].tolist()
                for head in ("s3", "s4", "s5", "concat")
            },
            "heatmaps": {},
            "attention_maps": {},
        }
        for head in ("s3", "s4", "s5"):
            attn = out.attention(head)[0].detach().numpy()
            heat = normalize_heatmap(upsample(attn, crop_to))
            gray_path = out_dir / f"{path.stem}_{head}.png"
            over_path = out_dir / f"{path.stem}_{head}_overlay.png"
            Image.fromarray((heat * 255).astype(np.uint8)).save(gray_path)
            Image.fromarray(overlay(view, heat)).save(over_path)
            record["heatmaps"][head] = str(gray_path)
            record["attention_maps"][head] = attn.tolist()
        json_path = out_dir / f"{path.stem}.json"
        json_path.write_text(json.dumps(record, indent=2) + "\n")
        record["json"] = str(json_path)
        artifacts.append(record)
    return artifacts, skipped

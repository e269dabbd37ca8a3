"""Dataset loading, standard augmentation, and a synthetic fine-grained set.

Datasets are class-per-folder image trees (root/train/<class>/*, root/test/
<class>/*). The synthetic generator writes images that share one global
template and differ only by a small class-specific motif stamped at a random
location, so the class is decidable only from local evidence; motif
positions are recorded in a sidecar for localization measurements.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .config import ConfigError

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}
META_FILENAME = "synthetic_meta.json"


class DatasetError(ValueError):
    """Malformed dataset directory."""


@dataclass
class Sample:
    path: str
    label: int


@dataclass
class DatasetManifest:
    root: str
    classes: list[str]
    train: list[Sample]
    test: list[Sample]
    resize_to: int = 72
    crop_to: int = 64

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def _scan_split(split_dir: Path) -> tuple[list[str], dict[str, list[Path]]]:
    classes = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    files: dict[str, list[Path]] = {}
    for cls in classes:
        imgs = sorted(
            p for p in (split_dir / cls).iterdir() if p.suffix.lower() in IMAGE_EXTS
        )
        if not imgs:
            raise DatasetError(f"class directory has no images: {split_dir / cls}")
        files[cls] = imgs
    return classes, files


def load_manifest(root: str | Path, resize_to: int = 72, crop_to: int = 64) -> DatasetManifest:
    """Scan root/train and root/test; class labels follow sorted class names."""
    root = Path(root)
    train_dir, test_dir = root / "train", root / "test"
    for d in (train_dir, test_dir):
        if not d.is_dir():
            raise DatasetError(f"missing split directory: {d}")
    train_classes, train_files = _scan_split(train_dir)
    test_classes, test_files = _scan_split(test_dir)
    if train_classes != test_classes:
        raise DatasetError(
            f"train/test class sets differ: {train_classes} vs {test_classes}"
        )
    if not train_classes:
        raise DatasetError(f"no class directories under {train_dir}")
    label = {c: i for i, c in enumerate(train_classes)}
    train = [Sample(str(p), label[c]) for c in train_classes for p in train_files[c]]
    test = [Sample(str(p), label[c]) for c in test_classes for p in test_files[c]]
    return DatasetManifest(
        root=str(root),
        classes=train_classes,
        train=train,
        test=test,
        resize_to=resize_to,
        crop_to=crop_to,
    )


def load_image(path: str | Path) -> np.ndarray:
    """Decode to (H, W, 3) uint8 RGB."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


_upscale_warned: set[tuple[int, int, int]] = set()


def _rotate_replicate(img: np.ndarray, angle: float) -> np.ndarray:
    h, w = img.shape[:2]
    mat = cv2.getRotationMatrix2D((w / 2 - 0.5, h / 2 - 0.5), angle, 1.0)
    return cv2.warpAffine(img, mat, (w, h), borderMode=cv2.BORDER_REPLICATE)


def standard_augment(
    image: np.ndarray,
    training: bool,
    rng: np.random.Generator | None = None,
    resize_to: int = 72,
    crop_to: int = 64,
    flip: bool | None = None,
    angle: float | None = None,
    crop_offset: tuple[int, int] | None = None,
) -> np.ndarray:
    """Resize / crop / flip / rotate pipeline.

    Training: resize, random crop, horizontal flip (p=0.5), random rotation
    within +-15 degrees with replicated borders. Evaluation: resize then
    center crop, fully deterministic. The flip / angle / crop_offset
    arguments pin individual draws (test hooks); unset ones come from rng.
    """
    h, w = image.shape[:2]
    if (h < resize_to or w < resize_to) and (h, w, resize_to) not in _upscale_warned:
        _upscale_warned.add((h, w, resize_to))
        log.warning("upscaling %dx%d images to resize target %d", h, w, resize_to)
    img = cv2.resize(image, (resize_to, resize_to), interpolation=cv2.INTER_LINEAR)
    margin = resize_to - crop_to
    if not training:
        off = margin // 2
        return img[off : off + crop_to, off : off + crop_to]
    if rng is None and (flip is None or angle is None or crop_offset is None):
        raise ValueError("training augmentation needs an rng unless all draws are pinned")
    if crop_offset is None:
        crop_offset = (
            int(rng.integers(0, margin + 1)),
            int(rng.integers(0, margin + 1)),
        )
    oy, ox = crop_offset
    img = img[oy : oy + crop_to, ox : ox + crop_to]
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if flip:
        img = img[:, ::-1]
    if angle is None:
        angle = float(rng.uniform(-15.0, 15.0))
    if angle != 0.0:
        img = _rotate_replicate(np.ascontiguousarray(img), angle)
    return np.ascontiguousarray(img)


# ---------------------------------------------------------------------------
# Synthetic fine-grained dataset
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_classes: int = 4
    image_size: int = 64
    motif_size: int = 8
    train_per_class: int = 100
    test_per_class: int = 50
    noise: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if self.motif_size >= self.image_size / 4:
            raise ConfigError(
                f"motif size {self.motif_size} must stay below a quarter of "
                f"image size {self.image_size} (the signal must be local)"
            )
        if self.num_classes < 2:
            raise ConfigError("need at least 2 synthetic classes")


_MOTIF_COLORS = [
    (220, 40, 40),
    (40, 200, 40),
    (60, 90, 230),
    (235, 210, 40),
    (210, 60, 210),
    (40, 210, 210),
    (240, 140, 30),
]


def _motif_mask(shape_idx: int, s: int) -> np.ndarray:
    """Procedural binary mask for one motif shape family."""
    yy, xx = np.mgrid[0:s, 0:s]
    cy = cx = (s - 1) / 2
    shape_idx %= 5
    if shape_idx == 0:  # filled square
        return np.ones((s, s), bool)
    if shape_idx == 1:  # disc
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (s / 2) ** 2
    if shape_idx == 2:  # diagonal cross
        return (np.abs(yy - xx) <= 1) | (np.abs(yy + xx - (s - 1)) <= 1)
    if shape_idx == 3:  # ring
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (r2 <= (s / 2) ** 2) & (r2 >= (s / 4) ** 2)
    # checkerboard
    return ((yy // 2 + xx // 2) % 2).astype(bool)


def class_motif(class_idx: int, size: int) -> np.ndarray:
    """The (size, size, 3) uint8 motif stamped onto images of this class."""
    color = np.array(_MOTIF_COLORS[class_idx % len(_MOTIF_COLORS)], dtype=np.uint8)
    mask = _motif_mask(class_idx // len(_MOTIF_COLORS) + class_idx, size)
    motif = np.zeros((size, size, 3), dtype=np.uint8)
    motif[mask] = color
    return motif


def global_template(spec: SyntheticSpec) -> np.ndarray:
    """Class-independent background: smooth texture plus a large ring."""
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    coarse = rng.uniform(60, 140, size=(8, 8, 3))
    base = cv2.resize(coarse.astype(np.float32), (s, s), interpolation=cv2.INTER_CUBIC)
    yy, xx = np.mgrid[0:s, 0:s]
    r2 = (yy - s / 2) ** 2 + (xx - s / 2) ** 2
    ring = (r2 <= (0.4 * s) ** 2) & (r2 >= (0.3 * s) ** 2)
    base[ring] += 60.0
    return np.clip(base, 0, 255).astype(np.uint8)


def _stamp(template: np.ndarray, motif: np.ndarray, y: int, x: int, noise: float,
           rng: np.random.Generator) -> np.ndarray:
    img = template.astype(np.float32).copy()
    s = motif.shape[0]
    mask = motif.any(axis=-1)
    region = img[y : y + s, x : x + s]
    region[mask] = motif[mask]
    if noise > 0:
        img += rng.normal(0.0, noise * 255.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Write the dataset tree plus a motif-location sidecar; returns the manifest.

    Motifs are kept >= motif_size + 2 pixels away from the borders so the
    resize-and-crop evaluation transform cannot cut them off.
    """
    out_dir = Path(out_dir)
    template = global_template(spec)
    motifs = [class_motif(c, spec.motif_size) for c in range(spec.num_classes)]
    margin = spec.motif_size + 2
    lo, hi = margin, spec.image_size - spec.motif_size - margin
    locations: dict[str, list[int]] = {}
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        for c in range(spec.num_classes):
            cls_dir = out_dir / split / f"class_{c:02d}"
            cls_dir.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                rng = np.random.default_rng(
                    [spec.seed, 0 if split == "train" else 1, c, i]
                )
                y = int(rng.integers(lo, hi + 1))
                x = int(rng.integers(lo, hi + 1))
                img = _stamp(template, motifs[c], y, x, spec.noise, rng)
                rel = f"{split}/class_{c:02d}/{i:04d}.png"
                Image.fromarray(img).save(out_dir / rel)
                locations[rel] = [y, x, spec.motif_size]
    meta = {"spec": asdict(spec), "motifs": locations}
    (out_dir / META_FILENAME).write_text(json.dumps(meta, indent=2) + "\n")
    return load_manifest(out_dir)


def load_synthetic_meta(root: str | Path) -> dict:
    path = Path(root) / META_FILENAME
    if not path.is_file():
        raise DatasetError(f"no synthetic metadata sidecar at {path}")
    return json.loads(path.read_text())


def map_bbox_through_eval(
    bbox: tuple[int, int, int], orig_size: int, resize_to: int, crop_to: int
) -> tuple[int, int, int, int]:
    """Map a (y, x, size) box in the original image into eval-crop pixels.

    Returns (y0, x0, y1, x1), clipped to the crop; the eval transform is
    resize to resize_to then center crop to crop_to.
    """
    y, x, s = bbox
    scale = resize_to / orig_size
    off = (resize_to - crop_to) // 2
    y0 = int(np.floor(y * scale)) - off
    x0 = int(np.floor(x * scale)) - off
    y1 = int(np.ceil((y + s) * scale)) - off
    x1 = int(np.ceil((x + s) * scale)) - off
    return (
        max(0, y0),
        max(0, x0),
        min(crop_to, y1),
        min(crop_to, x1),
    )

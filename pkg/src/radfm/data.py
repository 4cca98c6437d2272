"""Manifest-driven datasets, deterministic batching and synthetic generators.

A manifest is a JSON file::

    {
      "task": "classification" | "segmentation" | "captioning" | "pretrain",
      "n_classes": 2,                       # classification / segmentation
      "image_size": 224,                    # optional, task default otherwise
      "normalization": {"mean": [..3], "std": [..3]},
      "splits": {
        "train": [{"image": "img/0.png", "label": 1}, ...],
        "val":   [{"image": "img/5.png", "mask": "mask/5.png"}, ...],
        "test":  [{"image": "img/7.png", "caption": "a circle at the top"}, ...]
      }
    }

Paths are relative to the manifest. Images are PNG; masks are single-channel
PNGs holding integer labels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import DataError

TASKS = ("classification", "segmentation", "captioning", "pretrain")
DEFAULT_IMAGE_SIZE = {"classification": 224, "segmentation": 448, "captioning": 224, "pretrain": 224}
SHAPES = ("circle", "square", "cross")
POSITIONS = ("top", "bottom")


@dataclass
class Split:
    images: torch.Tensor  # [n, 3, H, W], normalised
    targets: object  # label tensor [n], mask tensor [n, H, W], or list of str
    paths: list[str] = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    def batches(self, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True):
        """Yield (images, targets) batches in an order fixed by (seed, epoch)."""
        n = len(self)
        if shuffle:
            g = torch.Generator().manual_seed(_mix(seed, epoch))
            order = torch.randperm(n, generator=g)
        else:
            order = torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if isinstance(self.targets, list):
                tgt = [self.targets[i] for i in idx.tolist()]
            else:
                tgt = self.targets[idx]
            yield self.images[idx], tgt

    def __iter__(self):
        for i in range(len(self)):
            tgt = self.targets[i]
            yield self.images[i], tgt


def _mix(seed: int, epoch: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{epoch}".encode()).digest()[:8], "little") >> 1


@dataclass
class Dataset:
    task: str
    splits: dict[str, Split]
    n_classes: int | None = None
    normalization: dict | None = None

    def __getitem__(self, name) -> Split:
        return self.splits[name]


# --------------------------------------------------------------------------
# loading


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L") if im.mode not in ("RGB", "L") else im)
    except FileNotFoundError:
        raise DataError(f"missing file: {path}")
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}")
    arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def _read_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im).astype(np.int64)
    except FileNotFoundError:
        raise DataError(f"missing file: {path}")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"missing manifest: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})")
    if manifest.get("task") not in TASKS:
        raise DataError(f"{path}: task must be one of {TASKS}")
    splits = manifest.get("splits") or {}
    seen = {}
    for name, entries in splits.items():
        for e in entries:
            if e["image"] in seen and seen[e["image"]] != name:
                raise DataError(f"{path}: {e['image']} listed in both {seen[e['image']]} and {name}")
            seen[e["image"]] = name
    return manifest


def load_dataset(manifest_path, image_size: int | None = None) -> Dataset:
    """Load every split listed in a manifest, resized and normalised."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    task = manifest["task"]
    n_classes = manifest.get("n_classes")
    size = image_size or manifest.get("image_size") or DEFAULT_IMAGE_SIZE[task]

    raw = {}
    for name, entries in manifest["splits"].items():
        imgs, targets = [], []
        for e in entries:
            img = torch.from_numpy(_read_image(root / e["image"]))
            imgs.append(F.interpolate(img[None], size=(size, size), mode="bilinear",
                                      align_corners=False, antialias=True)[0])
            if task == "classification":
                label = int(e["label"])
                if n_classes is not None and not 0 <= label < n_classes:
                    raise DataError(f"{e['image']}: label {label} outside [0, {n_classes})")
                targets.append(label)
            elif task == "segmentation":
                mask = _read_mask(root / e["mask"])
                if n_classes is not None and (mask.min() < 0 or mask.max() >= n_classes):
                    raise DataError(f"{e['mask']}: labels outside [0, {n_classes})")
                m = torch.from_numpy(mask)[None, None].float()
                targets.append(F.interpolate(m, size=(size, size), mode="nearest")[0, 0].long())
            elif task == "captioning":
                targets.append(str(e["caption"]))
        images = torch.stack(imgs) if imgs else torch.zeros(0, 3, size, size)
        if task == "classification":
            targets = torch.tensor(targets, dtype=torch.long)
        elif task == "segmentation":
            targets = torch.stack(targets) if targets else torch.zeros(0, size, size, dtype=torch.long)
        elif task == "pretrain":
            targets = torch.zeros(len(imgs), dtype=torch.long)
        raw[name] = (images, targets, [e["image"] for e in entries])

    norm = manifest.get("normalization")
    if norm is None:
        train = raw.get("train")
        if train is None or len(train[0]) == 0:
            raise DataError("manifest has no normalization and no training images")
        norm = channel_stats(train[0])
    mean = torch.tensor(norm["mean"], dtype=torch.float32)[None, :, None, None]
    std = torch.tensor(norm["std"], dtype=torch.float32)[None, :, None, None]
    splits = {
        name: Split((imgs - mean) / std, tgt, paths) for name, (imgs, tgt, paths) in raw.items()
    }
    return Dataset(task, splits, n_classes, norm)


def channel_stats(images) -> dict:
    x = torch.as_tensor(images, dtype=torch.float64)
    std = x.std(dim=(0, 2, 3))
    std = torch.where(std > 0, std, torch.ones_like(std))
    return {"mean": x.mean(dim=(0, 2, 3)).tolist(), "std": std.tolist()}


# --------------------------------------------------------------------------
# writing


def _to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3:
        img = img[0] if img.shape[0] in (1, 3) and np.allclose(img[0], img[-1]) else img.transpose(1, 2, 0)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_manifest(out_dir, task, splits: dict, n_classes=None, image_size=None) -> Path:
    """Write images (values in [0, 1]) and targets to PNGs plus a manifest.

    ``splits`` maps split name to ``(images, targets)``. Normalisation
    statistics are computed from the quantised training images.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if task == "segmentation":
        (out_dir / "masks").mkdir(exist_ok=True)
    entries = {}
    train_pixels = []
    for name, (images, targets) in splits.items():
        entries[name] = []
        for i, img in enumerate(images):
            rel = f"images/{name}_{i:05d}.png"
            arr = _to_uint8(img)
            Image.fromarray(arr).save(out_dir / rel)
            if name == "train":
                train_pixels.append(np.asarray(_read_image(out_dir / rel)))
            entry = {"image": rel}
            if task == "classification":
                entry["label"] = int(targets[i])
            elif task == "segmentation":
                mrel = f"masks/{name}_{i:05d}.png"
                Image.fromarray(np.asarray(targets[i], dtype=np.uint8)).save(out_dir / mrel)
                entry["mask"] = mrel
            elif task == "captioning":
                entry["caption"] = str(targets[i])
            entries[name].append(entry)
    manifest = {"task": task, "splits": entries}
    if n_classes is not None:
        manifest["n_classes"] = int(n_classes)
    if image_size is not None:
        manifest["image_size"] = int(image_size)
    if train_pixels:
        manifest["normalization"] = channel_stats(np.stack(train_pixels))
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def convert_medmnist(npz_path, out_dir, image_size: int | None = None) -> Path:
    """Turn a MedMNIST-style ``.npz`` (``train_images``, ``train_labels``, ...)
    into PNG files and a classification manifest."""
    data = np.load(npz_path)
    splits = {}
    n_classes = 0
    for name in ("train", "val", "test"):
        if f"{name}_images" not in data:
            continue
        images = data[f"{name}_images"].astype(np.float32) / 255.0
        if images.ndim == 4 and images.shape[-1] in (1, 3):
            images = images.transpose(0, 3, 1, 2)
        labels = data[f"{name}_labels"].reshape(len(images), -1)[:, 0].astype(int)
        n_classes = max(n_classes, int(labels.max()) + 1)
        splits[name] = (images, labels)
    if not splits:
        raise DataError(f"{npz_path}: no '<split>_images' arrays found")
    return write_manifest(out_dir, "classification", splits, n_classes, image_size)


# --------------------------------------------------------------------------
# synthetic generators


@dataclass
class SyntheticData:
    images: np.ndarray  # [n, H, W] float32 in [0, 1]
    targets: object
    task: str
    n_classes: int | None = None

    def split(self, fractions=(0.5, 0.25, 0.25)) -> dict:
        n = len(self.images)
        cuts = np.cumsum([int(round(f * n)) for f in fractions[:-1]])
        bounds = [0, *cuts.tolist(), n]
        names = ("train", "val", "test")[: len(fractions)]
        return {
            name: (self.images[a:b], self.targets[a:b])
            for name, a, b in zip(names, bounds[:-1], bounds[1:])
        }


def synth_blobs(n: int, n_classes: int = 2, seed: int = 0, size: int = 56,
                noise: float = 0.02) -> SyntheticData:
    """Elongated Gaussian bumps whose orientation and peak intensity depend
    on the class; centres jitter slightly. Labels are balanced and shuffled."""
    if n <= 0:
        raise DataError("n must be positive")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    angles = np.pi * np.arange(n_classes) / n_classes
    amplitudes = np.linspace(0.5, 0.85, n_classes) if n_classes > 1 else np.array([0.8])
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    images = np.empty((n, size, size), dtype=np.float32)
    s_major, s_minor = 0.3 * size, 0.1 * size
    for i, c in enumerate(labels):
        cy, cx = size / 2 + rng.normal(0, 0.02 * size, 2)
        cos, sin = np.cos(angles[c]), np.sin(angles[c])
        u = (xx - cx) * cos + (yy - cy) * sin
        v = -(xx - cx) * sin + (yy - cy) * cos
        bump = np.exp(-(u**2) / (2 * s_major**2) - v**2 / (2 * s_minor**2))
        images[i] = 0.1 + amplitudes[c] * bump + rng.normal(0, noise, (size, size))
    return SyntheticData(np.clip(images, 0, 1), labels.astype(np.int64), "classification", n_classes)


def synth_squares(n: int, seed: int = 0, size: int = 64, min_side=None, max_side=None,
                  noise: float = 0.05) -> SyntheticData:
    """One bright axis-aligned square per dark image; mask = the square exactly."""
    if n <= 0:
        raise DataError("n must be positive")
    rng = np.random.default_rng(seed)
    lo = min_side or size // 4
    hi = max_side or size // 2
    images = np.empty((n, size, size), dtype=np.float32)
    masks = np.zeros((n, size, size), dtype=np.int64)
    for i in range(n):
        side = int(rng.integers(lo, hi + 1))
        top, left = rng.integers(0, size - side + 1, 2)
        masks[i, top : top + side, left : left + side] = 1
        images[i] = 0.15 + 0.7 * masks[i] + rng.normal(0, noise, (size, size))
    return SyntheticData(np.clip(images, 0, 1).astype(np.float32), masks, "segmentation", 2)


def _draw_shape(canvas, shape, cy, cx, r):
    size = canvas.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    elif shape == "square":
        region = (abs(yy - cy) <= r) & (abs(xx - cx) <= r)
    else:
        w = max(1, r // 3)
        region = ((abs(yy - cy) <= w) & (abs(xx - cx) <= r)) | (
            (abs(xx - cx) <= w) & (abs(yy - cy) <= r)
        )
    canvas[region] = 0.9


def synth_shapes_captions(n: int, seed: int = 0, size: int = 56) -> SyntheticData:
    """Images of a circle, square or cross in the top or bottom half, captioned
    ``"a <shape> at the <position>"``."""
    if n <= 0:
        raise DataError("n must be positive")
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size), dtype=np.float32)
    captions = []
    for i in range(n):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        pos = POSITIONS[int(rng.integers(len(POSITIONS)))]
        r = size // 8
        cy = size // 4 if pos == "top" else 3 * size // 4
        cx = int(rng.integers(r + 1, size - r - 1))
        canvas = np.full((size, size), 0.1, dtype=np.float32)
        _draw_shape(canvas, shape, cy, cx, r)
        images[i] = np.clip(canvas + rng.normal(0, 0.02, canvas.shape), 0, 1)
        captions.append(f"a {shape} at the {pos}")
    return SyntheticData(images, np.array(captions, dtype=object), "captioning")


def normalize(images, stats=None):
    """Standardise [n, H, W] or [n, C, H, W] images; returns (tensor, stats)."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if x.ndim == 3:
        x = x[:, None].expand(-1, 3, -1, -1)
    stats = stats or channel_stats(x)
    mean = torch.tensor(stats["mean"], dtype=torch.float32)[None, :, None, None]
    std = torch.tensor(stats["std"], dtype=torch.float32)[None, :, None, None]
    return ((x - mean) / std).contiguous(), stats

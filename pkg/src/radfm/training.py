"""Helpers shared by the adaptation estimators."""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import asdict
from pathlib import Path

import torch
import torch.nn.functional as F

from .core import ParameterStore, load_checkpoint, save_checkpoint
from .exceptions import ConfigError
from .vit import EncoderConfig, VisionTransformer, encoder_config

ENCODER_PREFIX = "encoder."


def resolve_encoder(encoder, img_size: int | None = None) -> VisionTransformer:
    """Build a fresh encoder from a preset name, a checkpoint path or a module.

    Modules are deep-copied so fitting never mutates the caller's object.
    Checkpoints must carry an ``encoder_config`` entry in their metadata and
    the weights under the ``encoder.`` prefix.
    """
    if isinstance(encoder, VisionTransformer):
        return copy.deepcopy(encoder)
    if isinstance(encoder, EncoderConfig):
        return VisionTransformer(encoder)
    if isinstance(encoder, str) and not Path(encoder).suffix:
        kw = {"img_size": img_size} if img_size else {}
        return VisionTransformer(encoder_config(encoder, **kw))
    if isinstance(encoder, (str, Path)):
        return load_encoder(encoder)
    raise ConfigError(f"cannot build an encoder from {encoder!r}")


def save_encoder(encoder: VisionTransformer, path, step: int = 0, config=None) -> Path:
    store = ParameterStore.from_module(encoder)
    store = ParameterStore(
        {ENCODER_PREFIX + k: v for k, v in store.entries.items()},
        {ENCODER_PREFIX + k for k in store.frozen},
        step,
    )
    return save_checkpoint(
        store, path, config=config, meta={"encoder_config": asdict(encoder.config)}
    )


def load_encoder(path) -> VisionTransformer:
    store, header = load_checkpoint(path)
    cfg = header.get("meta", {}).get("encoder_config")
    if cfg is None:
        raise ConfigError(f"{path}: checkpoint has no encoder_config metadata")
    encoder = VisionTransformer(EncoderConfig(**cfg))
    sub = store.subset(ENCODER_PREFIX)
    if not sub.entries:
        raise ConfigError(f"{path}: no tensors under the '{ENCODER_PREFIX}' prefix")
    ParameterStore(
        {k[len(ENCODER_PREFIX):]: v for k, v in sub.entries.items()},
        {k[len(ENCODER_PREFIX):] for k in sub.frozen},
        sub.step,
    ).load_into(encoder)
    return encoder


def resize_images(images: torch.Tensor, size) -> torch.Tensor:
    size = (size, size) if isinstance(size, int) else tuple(size)
    if tuple(images.shape[-2:]) == size:
        return images
    return F.interpolate(images, size=size, mode="bilinear", align_corners=False, antialias=True)


def minibatches(n: int, batch_size: int, shuffle: bool = True):
    order = torch.randperm(n) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def encoder_snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items() if k.startswith(ENCODER_PREFIX)}


def history_csv(rows, fields) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()

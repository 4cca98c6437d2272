"""Input validation helpers used by the estimators."""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import DataError, ShapeError


def check_images(X, multiple_of: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Return ``X`` as a float tensor of shape (B, 3, H, W).

    Accepts arrays or tensors shaped (B, H, W) or (B, C, H, W) with C in
    {1, 3}; single-channel input is replicated to three channels.
    """
    if isinstance(X, (list, tuple)):
        X = np.stack([np.asarray(x) for x in X])
    t = torch.as_tensor(np.asarray(X) if not isinstance(X, torch.Tensor) else X)
    t = t.to(dtype)
    if t.ndim == 3:
        t = t[:, None]
    if t.ndim != 4:
        raise ShapeError(f"expected images of rank 3 or 4, got shape {tuple(t.shape)}")
    if t.shape[0] == 0:
        raise DataError("empty image batch")
    if t.shape[1] == 1:
        t = t.expand(-1, 3, -1, -1)
    elif t.shape[1] != 3:
        raise ShapeError(f"expected 1 or 3 channels, got {t.shape[1]}")
    if not torch.isfinite(t).all():
        raise DataError("images contain NaN or Inf")
    if multiple_of is not None:
        h, w = t.shape[-2:]
        if h % multiple_of or w % multiple_of:
            raise ShapeError(f"image size {h}x{w} is not a multiple of {multiple_of}")
    return t.contiguous()


def check_labels(y, n_samples: int, n_classes: int | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(y)).long().reshape(-1)
    if t.numel() != n_samples:
        raise DataError(f"got {t.numel()} labels for {n_samples} samples")
    if t.numel() == 0:
        raise DataError("empty label array")
    if (t < 0).any() or (n_classes is not None and (t >= n_classes).any()):
        raise DataError(f"labels must lie in [0, {n_classes})")
    return t


def check_masks(masks, images: torch.Tensor, n_classes: int) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(masks)).long()
    if m.ndim == 4 and m.shape[1] == 1:
        m = m[:, 0]
    if m.ndim != 3 or m.shape[0] != images.shape[0] or m.shape[-2:] != images.shape[-2:]:
        raise DataError(
            f"mask shape {tuple(m.shape)} does not match images {tuple(images.shape)}"
        )
    if (m < 0).any() or (m >= n_classes).any():
        raise DataError(f"mask labels must lie in [0, {n_classes})")
    return m


def check_is_fitted(estimator, attribute: str) -> None:
    from sklearn.exceptions import NotFittedError

    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )

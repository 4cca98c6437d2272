"""Frozen-encoder dense adaptation.

A parallel stride-2 convolutional branch provides priors at strides 8, 16
and 32. Patch tokens tapped from three encoder layers are reshaped to maps,
projected, resized onto those strides and added to the projected priors.
Two upsampling stages then decode to logits at 1/8 resolution::

    U16 = psi(Up(F32) ++ F16)
    U8  = psi(Up(U16) ++ F8)
    logits = conv1x1(U8)

where ``++`` is channel concatenation and ``psi`` is two 3x3 conv + BN +
ReLU layers.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from torch import nn

from .core import count_parameters, freeze, seed_everything
from .exceptions import ConfigError, DataError, ShapeError
from .metrics import seg_metrics
from .training import encoder_snapshot, minibatches, resize_images, resolve_encoder
from .validation import check_images, check_is_fitted, check_masks
from .vit import TokenSequence, VisionTransformer

logger = logging.getLogger(__name__)

STRIDES = (8, 16, 32)
HISTORY_FIELDS = ("epoch", "split", "loss", "miou", "dice", "f1")


@dataclass(frozen=True)
class DenseConfig:
    fusion_width: int
    pyramid_width: int
    layers: tuple = (3, 7, 11)


# fusion widths calibrated so the adapter (encoder excluded, 2 classes) has
# 14.27M / 69.76M trainable parameters on the small / base encoders
PRESETS = {
    "tiny": DenseConfig(fusion_width=32, pyramid_width=16, layers=(1, 2, 3)),
    "small": DenseConfig(fusion_width=479, pyramid_width=64),
    "base": DenseConfig(fusion_width=1101, pyramid_width=64),
}
TARGET_PARAM_COUNTS = {"small": 14.27e6, "base": 69.76e6}


def conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ConvPyramid(nn.Module):
    """Stem of two stride-2 stages, then stride-2 stages tapped at 1/8, 1/16, 1/32."""

    def __init__(self, width: int = 64, in_chans: int = 3):
        super().__init__()
        self.stem = nn.Sequential(conv_bn_relu(in_chans, width, 2), conv_bn_relu(width, width, 2))
        self.stage8 = conv_bn_relu(width, 2 * width, 2)
        self.stage16 = conv_bn_relu(2 * width, 4 * width, 2)
        self.stage32 = conv_bn_relu(4 * width, 4 * width, 2)
        self.out_channels = {8: 2 * width, 16: 4 * width, 32: 4 * width}

    def forward(self, images):
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image size {h}x{w} is not divisible by 32")
        c8 = self.stage8(self.stem(images))
        c16 = self.stage16(c8)
        c32 = self.stage32(c16)
        return c8, c16, c32


def tokens_to_map(tokens: TokenSequence) -> torch.Tensor:
    """[B, N, D] patch tokens -> [B, D, gh, gw], row-major; class token dropped."""
    x = tokens.patch_tokens
    gh, gw = tokens.grid
    B, N, D = x.shape
    if N != gh * gw:
        raise ShapeError(f"{N} tokens do not fill grid {gh}x{gw}")
    return x.transpose(1, 2).reshape(B, D, gh, gw)


def map_to_tokens(fmap: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`tokens_to_map` for the patch tokens."""
    B, D, gh, gw = fmap.shape
    return fmap.reshape(B, D, gh * gw).transpose(1, 2)


def upsample2x(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class AlignFuse(nn.Module):
    """Project a token map to the fusion width, resize it onto the prior's
    grid and add the projected prior."""

    def __init__(self, token_dim, prior_dim, fusion_width):
        super().__init__()
        self.token_proj = nn.Conv2d(token_dim, fusion_width, 1)
        self.prior_proj = nn.Conv2d(prior_dim, fusion_width, 1, bias=False)

    def forward(self, token_map, prior):
        t = self.token_proj(token_map)
        t = F.interpolate(t, size=prior.shape[-2:], mode="bilinear", align_corners=False)
        return t + self.prior_proj(prior)


class UpBlock(nn.Module):
    """psi: two 3x3 conv + BN + ReLU layers on the concatenated input."""

    def __init__(self, width):
        super().__init__()
        self.width = width
        self.convs = nn.Sequential(conv_bn_relu(2 * width, width), conv_bn_relu(width, width))

    def forward(self, coarse, fine):
        up = upsample2x(coarse)
        if up.shape[1] != self.width or fine.shape[1] != self.width:
            raise ShapeError(
                f"decoder expects width {self.width}, got {up.shape[1]} and {fine.shape[1]}"
            )
        return self.convs(torch.cat([up, fine], dim=1))


class Decoder(nn.Module):
    def __init__(self, width, n_classes):
        super().__init__()
        self.up16 = UpBlock(width)
        self.up8 = UpBlock(width)
        self.classifier = nn.Conv2d(width, n_classes, 1)

    def forward(self, f8, f16, f32):
        u16 = self.up16(f32, f16)
        u8 = self.up8(u16, f8)
        return self.classifier(u8)


class DenseAdapterNet(nn.Module):
    """Frozen encoder + trainable conv pyramid, fusion and decoder."""

    def __init__(self, encoder: VisionTransformer, n_classes: int, fusion_width: int,
                 pyramid_width: int, layers=(3, 7, 11)):
        super().__init__()
        if len(layers) != 3:
            raise ConfigError("exactly three encoder layers are tapped (for strides 8, 16, 32)")
        self.encoder = freeze(encoder)
        self.layers = tuple(layers)
        self.pyramid = ConvPyramid(pyramid_width, encoder.config.in_chans)
        self.fuse = nn.ModuleDict({
            str(s): AlignFuse(encoder.embed_dim, self.pyramid.out_channels[s], fusion_width)
            for s in STRIDES
        })
        self.decoder = Decoder(fusion_width, n_classes)

    def train(self, mode=True):
        super().train(mode)
        self.encoder.eval()
        return self

    def encoder_input(self, images):
        p = self.encoder.config.patch_size
        h, w = images.shape[-2:]
        size = (max(p, round(h / p) * p), max(p, round(w / p) * p))
        return resize_images(images, size)

    @torch.no_grad()
    def token_maps(self, images) -> list[torch.Tensor]:
        """Token maps for strides 8, 16, 32 (earliest layer -> finest stride)."""
        taps = self.encoder.forward_with_intermediates(self.encoder_input(images), self.layers)
        return [tokens_to_map(t) for t in taps]

    def align_fuse(self, token_map, prior, stride):
        if stride not in STRIDES:
            raise ConfigError(f"unknown stride {stride}; expected one of {STRIDES}")
        return self.fuse[str(stride)](token_map, prior)

    def forward(self, images, token_maps=None):
        if token_maps is None:
            token_maps = self.token_maps(images)
        priors = self.pyramid(images)
        fused = [self.align_fuse(v, c, s) for v, c, s in zip(token_maps, priors, STRIDES)]
        return self.decoder(*fused)

    def adapter_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("encoder.")]


def build_dense_net(encoder, n_classes, preset="small", fusion_width=None,
                    pyramid_width=None, layers=None):
    cfg = PRESETS[preset]
    return DenseAdapterNet(
        encoder, n_classes,
        fusion_width or cfg.fusion_width,
        pyramid_width or cfg.pyramid_width,
        layers if layers is not None else cfg.layers,
    )


def adapter_parameter_count(preset: str, n_classes: int = 2, fusion_width=None) -> int:
    """Trainable parameters of the adapter at a preset, counted tensor by tensor.

    Built on the meta device, so even the base preset costs no memory.
    """
    from .vit import encoder_config

    with torch.device("meta"):
        encoder = VisionTransformer(encoder_config(preset))
        net = build_dense_net(encoder, n_classes, preset, fusion_width=fusion_width)
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def calibrate_fusion_width(preset: str, target: float, n_classes: int = 2, lo=16, hi=4096) -> int:
    """Smallest fusion width whose adapter count is closest to ``target``."""
    best = None
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if adapter_parameter_count(preset, n_classes, mid) < target:
            lo = mid
        else:
            hi = mid
    for w in (lo, hi):
        err = abs(adapter_parameter_count(preset, n_classes, w) - target)
        if best is None or err < best[0]:
            best = (err, w)
    return best[1]


class DenseSegmenter(BaseEstimator):
    """Semantic segmenter on a frozen ViT encoder.

    Parameters
    ----------
    encoder : str, path or VisionTransformer, default="small"
    preset : {"tiny", "small", "base"}, default=None
        Adapter widths and tapped layers; defaults to ``encoder`` when that is
        a preset name, else ``"small"``.
    n_classes : int, default=None
        Inferred from the training masks when omitted.
    layers : tuple of int, default=None
        0-based encoder layers tapped for strides 8, 16, 32.
    epochs, lr, weight_decay, batch_size
        AdamW settings.
    image_size : int, default=448
        Square size inputs are resized to (must be divisible by 32).
    random_state : int, default=0

    Attributes
    ----------
    model_ : DenseAdapterNet
    history_ : list of dict
        Rows ``epoch, split, loss, miou, dice, f1``.
    best_epoch_ : int
        Epoch with the best validation mIoU (train mIoU without ``eval_set``).
    """

    def __init__(self, encoder="small", preset=None, n_classes=None, layers=None, epochs=20,
                 lr=1e-4, weight_decay=1e-4, batch_size=16, image_size=448, random_state=0):
        self.encoder = encoder
        self.preset = preset
        self.n_classes = n_classes
        self.layers = layers
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.image_size = image_size
        self.random_state = random_state

    def _preset(self):
        if self.preset is not None:
            return self.preset
        return self.encoder if self.encoder in PRESETS else "small"

    def _prepare(self, X, masks=None):
        X = check_images(X)
        if self.image_size % 32:
            raise ShapeError("image_size must be divisible by 32")
        if masks is None:
            return resize_images(X, self.image_size), None
        masks = check_masks(masks, X, self._n_classes(masks))
        X = resize_images(X, self.image_size)
        if masks.shape[-1] != self.image_size or masks.shape[-2] != self.image_size:
            masks = F.interpolate(masks[:, None].float(), size=X.shape[-2:], mode="nearest")[:, 0].long()
        return X, masks

    def _n_classes(self, masks):
        if self.n_classes is not None:
            return self.n_classes
        if hasattr(self, "n_classes_"):
            return self.n_classes_
        return max(int(np.asarray(masks).max()) + 1, 2)

    def fit(self, X, masks, eval_set=None):
        seed_everything(self.random_state)
        self.n_classes_ = self._n_classes(masks)
        X, masks = self._prepare(X, masks)
        if eval_set is not None:
            X_val, m_val = self._prepare(*eval_set)
            if X_val.shape[0] == 0:
                raise DataError("empty validation split")

        encoder = resolve_encoder(self.encoder)
        model = build_dense_net(encoder, self.n_classes_, self._preset(), layers=self.layers)
        params = model.adapter_parameters()
        opt = torch.optim.AdamW(params, lr=self.lr, weight_decay=self.weight_decay)

        # the encoder is frozen and inputs are not augmented, so taps are computed once
        model.eval()
        cached = _token_maps(model, X)
        cached_val = _token_maps(model, X_val) if eval_set is not None else None

        history = []
        best = (-1.0, None, -1)
        for epoch in range(self.epochs):
            model.train()
            total, count = 0.0, 0
            for idx in minibatches(X.shape[0], self.batch_size):
                logits = model(X[idx], [t[idx] for t in cached])
                loss = segmentation_loss(logits, masks[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            model.eval()
            rep = _seg_report(model, X, masks, cached, self.n_classes_)
            history.append({"epoch": epoch, "split": "train", "loss": total / count, **rep})
            if eval_set is not None:
                rep = _seg_report(model, X_val, m_val, cached_val, self.n_classes_)
                history.append({"epoch": epoch, "split": "val", **rep})
            if rep["miou"] > best[0]:
                best = (rep["miou"], copy.deepcopy(model.state_dict()), epoch)

        model.load_state_dict(best[1])
        model.eval()
        self.model_ = model
        self.history_ = history
        self.best_epoch_ = best[2]
        return self

    @torch.no_grad()
    def decision_function(self, X):
        """Logits at 1/8 of ``image_size``: [n, n_classes, H/8, W/8]."""
        check_is_fitted(self, "model_")
        X, _ = self._prepare(X)
        self.model_.eval()
        return torch.cat([self.model_(X[i : i + 16]) for i in range(0, X.shape[0], 16)])

    def predict(self, X):
        """Integer label masks at ``image_size`` resolution."""
        logits = self.decision_function(X)
        return upsample_logits(logits, (self.image_size, self.image_size)).argmax(1).numpy()

    def score(self, X, masks):
        X_t = check_images(X)
        m = check_masks(masks, X_t, self.n_classes_)
        pred = self.predict(X)
        if m.shape[-2:] != pred.shape[-2:]:
            m = F.interpolate(m[:, None].float(), size=pred.shape[-2:], mode="nearest")[:, 0].long()
        return seg_metrics(pred, m.numpy(), self.n_classes_)["miou"]

    def encoder_state(self) -> dict:
        check_is_fitted(self, "model_")
        return encoder_snapshot(self.model_)

    def n_trainable_parameters(self) -> int:
        check_is_fitted(self, "model_")
        return count_parameters(self.model_)


def upsample_logits(logits, size):
    return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


def segmentation_loss(logits, masks):
    """Per-pixel cross-entropy on logits upsampled to the mask resolution."""
    if logits.shape[0] != masks.shape[0]:
        raise DataError("logits and masks differ in batch size")
    return F.cross_entropy(upsample_logits(logits, masks.shape[-2:]), masks)


@torch.no_grad()
def _token_maps(model, X, batch_size=32):
    chunks = [model.token_maps(X[i : i + batch_size]) for i in range(0, X.shape[0], batch_size)]
    return [torch.cat([c[k] for c in chunks]) for k in range(3)]


@torch.no_grad()
def _seg_report(model, X, masks, cached, n_classes, batch_size=32):
    preds = []
    for i in range(0, X.shape[0], batch_size):
        sl = slice(i, i + batch_size)
        logits = model(X[sl], [t[sl] for t in cached])
        preds.append(upsample_logits(logits, masks.shape[-2:]).argmax(1))
    rep = seg_metrics(torch.cat(preds).numpy(), masks.numpy(), n_classes)
    return {k: rep[k] for k in ("miou", "dice", "f1")}


def expected_pyramid_sizes(h, w):
    return {s: (h // s, w // s) for s in STRIDES}


__all__ = [
    "ConvPyramid", "AlignFuse", "Decoder", "DenseAdapterNet", "DenseSegmenter",
    "tokens_to_map", "map_to_tokens", "adapter_parameter_count", "calibrate_fusion_width",
    "build_dense_net", "segmentation_loss", "upsample2x", "PRESETS", "TARGET_PARAM_COUNTS",
]

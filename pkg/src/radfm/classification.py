"""Classification on top of the ViT encoder: full fine-tuning, head-only
probing with a frozen backbone, and LoRA."""

from __future__ import annotations

import copy
import fnmatch
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF
from sklearn.base import BaseEstimator, ClassifierMixin
from torch import nn

from .core import count_parameters, freeze, seed_everything
from .exceptions import ConfigError, DataError, DomainError
from .metrics import classification_report
from .training import encoder_snapshot, minibatches, resize_images, resolve_encoder
from .validation import check_images, check_is_fitted, check_labels
from .vit import VisionTransformer

logger = logging.getLogger(__name__)

REGIMES = ("full", "head_only", "lora")
LORA_TARGETS = ("*.attn.q", "*.attn.v")
HISTORY_FIELDS = ("epoch", "split", "acc", "f1", "auc")


@dataclass
class ClsConfig:
    image_size: int = 224
    batch_size: int = 128
    epochs: int = 40
    lr: float = 1e-5
    weight_decay: float = 0.01
    warmup_epochs: int = 10
    clip_norm: float = 1.0
    regime: str = "full"
    lora_r: int = 8
    lora_alpha: float = 16.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_r


# --------------------------------------------------------------------------
# LoRA


class LoRALinear(nn.Module):
    """Frozen linear map plus a trainable rank-r update scaled by alpha / r."""

    def __init__(self, base: nn.Linear, r: int, alpha: float):
        super().__init__()
        if r <= 0:
            raise DomainError(f"LoRA rank must be positive, got {r}")
        self.base = base
        self.r = r
        self.alpha = alpha
        self.scaling = alpha / r
        self.lora_A = nn.Parameter(torch.empty(r, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, r))
        nn.init.normal_(self.lora_A, std=0.02)
        base.weight.requires_grad_(False)
        if base.bias is not None:
            base.bias.requires_grad_(False)

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)


def lora_wrap(module: nn.Module, targets=LORA_TARGETS, r: int = 8, alpha: float = 16.0,
              freeze_rest: bool = True) -> nn.Module:
    """Replace every ``nn.Linear`` whose dotted name matches a glob in
    ``targets`` with a :class:`LoRALinear`, in place.

    With ``freeze_rest`` every pre-existing parameter of ``module`` is frozen,
    leaving only the inserted A/B factors trainable.
    """
    if r <= 0:
        raise DomainError(f"LoRA rank must be positive, got {r}")
    if isinstance(targets, str):
        targets = (targets,)
    names = [
        name for name, m in module.named_modules()
        if isinstance(m, nn.Linear) and any(fnmatch.fnmatchcase(name, t) for t in targets)
    ]
    if not names:
        raise ConfigError(f"LoRA targets {targets} matched no linear layer")
    if freeze_rest:
        freeze(module)
    for name in names:
        parent_name, _, child = name.rpartition(".")
        parent = module.get_submodule(parent_name) if parent_name else module
        setattr(parent, child, LoRALinear(getattr(parent, child), r, alpha))
    return module


@torch.no_grad()
def merge_lora(module: nn.Module) -> nn.Module:
    """Deep copy of ``module`` with every LoRA layer folded into a plain Linear."""
    module = copy.deepcopy(module)
    names = [n for n, m in module.named_modules() if isinstance(m, LoRALinear)]
    for name in names:
        parent_name, _, child = name.rpartition(".")
        parent = module.get_submodule(parent_name) if parent_name else module
        lora = getattr(parent, child)
        merged = lora.base
        merged.weight += lora.scaling * (lora.lora_B @ lora.lora_A)
        setattr(parent, child, merged)
    return module


# --------------------------------------------------------------------------
# model


@torch.no_grad()
def extract_embedding(encoder: VisionTransformer, images: torch.Tensor) -> torch.Tensor:
    """Class token after the terminal norm, shape [B, D]."""
    return encoder(images).class_token


class ClassifierNet(nn.Module):
    """Encoder class token -> non-affine batch norm -> linear layer.

    The parameter-free batch norm standardises features whose scale can be
    tiny when layer scale starts near zero.
    """

    def __init__(self, encoder: VisionTransformer, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head_norm = nn.BatchNorm1d(encoder.embed_dim, affine=False)
        self.head = nn.Linear(encoder.embed_dim, n_classes)
        nn.init.trunc_normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward(self, images):
        return self.head(self.head_norm(self.encoder(images).class_token))


def build_classifier_net(encoder, n_classes, regime="full", lora_r=8, lora_alpha=16.0):
    net = ClassifierNet(encoder, n_classes)
    if regime == "head_only":
        freeze(net.encoder)
    elif regime == "lora":
        lora_wrap(net.encoder, LORA_TARGETS, lora_r, lora_alpha)
    elif regime != "full":
        raise ConfigError(f"unknown regime {regime!r}")
    return net


def augment_batch(images: torch.Tensor, max_angle: float = 15.0, scale=(0.8, 1.0)) -> torch.Tensor:
    """Random flip, rotation within +-max_angle degrees and resized crop, per sample."""
    out = []
    h, w = images.shape[-2:]
    for img in images:
        if torch.rand(1).item() < 0.5:
            img = TF.horizontal_flip(img)
        angle = torch.empty(1).uniform_(-max_angle, max_angle).item()
        img = TF.rotate(img, angle)
        s = torch.empty(1).uniform_(*scale).item()
        ch, cw = max(1, int(round(h * math.sqrt(s)))), max(1, int(round(w * math.sqrt(s))))
        top = int(torch.randint(0, h - ch + 1, (1,)).item())
        left = int(torch.randint(0, w - cw + 1, (1,)).item())
        out.append(TF.resized_crop(img, top, left, ch, cw, [h, w], antialias=True))
    return torch.stack(out)


class ViTClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier reading the encoder's class token.

    Parameters
    ----------
    encoder : str, path or VisionTransformer, default="small"
        Preset name (``tiny``/``small``/``base``), encoder checkpoint path, or
        a module (deep-copied).
    regime : {"full", "head_only", "lora"}, default="full"
    lora_r, lora_alpha : int, float
        LoRA rank and scale numerator; used only for ``regime="lora"``.
    epochs, lr, weight_decay, warmup_epochs, batch_size, clip_norm
        AdamW training settings. The learning rate ramps linearly over the
        warm-up epochs and is constant afterwards.
    image_size : int, default=224
        Inputs are resized to this square size.
    augment : bool, default=True
        Random flips, rotations and resized crops during training.
    random_state : int, default=0

    Attributes
    ----------
    model_ : ClassifierNet
    classes_ : ndarray
    history_ : list of dict
        Rows ``epoch, split, acc, f1, auc`` (macro F1, one-vs-rest AUC).
    grad_norms_ : list of float
        Global gradient norm after clipping, one entry per optimizer step.
    best_epoch_ : int
        Epoch whose weights were kept (best validation macro F1).
    """

    def __init__(self, encoder="small", regime="full", lora_r=8, lora_alpha=16.0, epochs=40,
                 lr=1e-5, weight_decay=0.01, warmup_epochs=10, batch_size=128, clip_norm=1.0,
                 image_size=224, augment=True, random_state=0):
        self.encoder = encoder
        self.regime = regime
        self.lora_r = lora_r
        self.lora_alpha = lora_alpha
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.image_size = image_size
        self.augment = augment
        self.random_state = random_state

    def _prepare(self, X):
        return resize_images(check_images(X), self.image_size)

    def fit(self, X, y, eval_set=None):
        """Train on (X, y); ``eval_set=(X_val, y_val)`` drives model selection."""
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        seed_everything(self.random_state)
        X = self._prepare(X)
        y_raw = np.asarray(y).reshape(-1)
        if y_raw.size == 0:
            raise DataError("empty training split")
        self.classes_ = np.unique(y_raw)
        y_t = check_labels(np.searchsorted(self.classes_, y_raw), X.shape[0])
        n_classes = max(len(self.classes_), 2)
        if eval_set is not None:
            X_val = self._prepare(eval_set[0])
            y_val = np.searchsorted(self.classes_, np.asarray(eval_set[1]).reshape(-1))
            if X_val.shape[0] == 0:
                raise DataError("empty validation split")

        encoder = resolve_encoder(self.encoder, self.image_size)
        model = build_classifier_net(encoder, n_classes, self.regime, self.lora_r, self.lora_alpha)
        params = [p for p in model.parameters() if p.requires_grad]
        opt = torch.optim.AdamW(params, lr=self.lr, weight_decay=self.weight_decay)
        steps_per_epoch = math.ceil(X.shape[0] / self.batch_size)
        warmup_steps = self.warmup_epochs * steps_per_epoch

        history, grad_norms = [], []
        best = (-1.0, None, -1)
        step = 0
        for epoch in range(self.epochs):
            model.train()
            if self.regime != "full":
                model.encoder.eval()
            for idx in minibatches(X.shape[0], self.batch_size):
                xb = X[idx]
                if self.augment:
                    xb = augment_batch(xb)
                scale = min(1.0, (step + 1) / warmup_steps) if warmup_steps else 1.0
                for g in opt.param_groups:
                    g["lr"] = self.lr * scale
                loss = F.cross_entropy(model(xb), y_t[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if self.clip_norm is not None:
                    torch.nn.utils.clip_grad_norm_(params, self.clip_norm)
                grad_norms.append(
                    torch.linalg.vector_norm(
                        torch.stack([p.grad.norm() for p in params if p.grad is not None])
                    ).item()
                )
                opt.step()
                step += 1

            model.eval()
            train_rep = classification_report(y_t.numpy(), _proba(model, X), n_classes)
            history.append({"epoch": epoch, "split": "train", **train_rep})
            if eval_set is not None:
                rep = classification_report(y_val, _proba(model, X_val), n_classes)
                history.append({"epoch": epoch, "split": "val", **rep})
            else:
                rep = train_rep
            if rep["f1"] > best[0]:
                best = (rep["f1"], copy.deepcopy(model.state_dict()), epoch)

        if best[1] is not None:
            model.load_state_dict(best[1])
        model.eval()
        self.model_ = model
        self.n_classes_ = n_classes
        self.history_ = history
        self.grad_norms_ = grad_norms
        self.best_epoch_ = best[2]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return _proba(self.model_, self._prepare(X))[:, : len(self.classes_)]

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X):
        """Class-token embeddings, [n_samples, D]."""
        check_is_fitted(self, "model_")
        self.model_.eval()
        return extract_embedding(self.model_.encoder, self._prepare(X)).numpy()

    def encoder_state(self) -> dict:
        check_is_fitted(self, "model_")
        return encoder_snapshot(self.model_)

    def n_trainable_parameters(self) -> int:
        check_is_fitted(self, "model_")
        return count_parameters(self.model_)


@torch.no_grad()
def _proba(model, X, batch_size=256):
    model.eval()
    out = [F.softmax(model(X[i : i + batch_size]), dim=-1) for i in range(0, X.shape[0], batch_size)]
    return torch.cat(out).numpy()

"""Global-crops-only self-distillation pretraining (DINO + iBOT objectives)."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF
from sklearn.base import BaseEstimator, TransformerMixin
from torch import nn

from .core import TrainSchedule, seed_everything
from .exceptions import ConfigError, DomainError, NumericError, ShapeError
from .validation import check_images, check_is_fitted
from .vit import VisionTransformer, encoder_config

logger = logging.getLogger(__name__)

LOSS_TRACE_FIELDS = ("step", "lr", "momentum", "teacher_temp", "dino", "ibot", "total")


@dataclass
class PretrainConfig:
    """Pretraining hyperparameters."""

    student_architecture: str = "small"
    batch_size_per_gpu: int = 256
    effective_batch: int = 256
    patch_size: int = 14
    drop_path_rate: float = 0.3
    layer_scale: float = 1e-5
    epochs: int = 10
    base_learning_rate: float = 2e-4
    min_learning_rate: float = 1e-6
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.2
    optimizer: str = "adamw"
    teacher_momentum_start: float = 0.994
    teacher_momentum_end: float = 1.0
    warmup_teacher_temperature: float = 0.04
    teacher_temperature: float = 0.07
    student_temperature: float = 0.1
    dino_loss_weight: float = 1.0
    ibot_loss_weight: float = 1.0
    prototypes: int = 131072
    bottleneck_dim: int = 256
    head_layers: int = 3
    head_hidden_dim: int = 2048
    global_crop_size: int = 224
    n_global_crops: int = 2
    mask_ratio_min: float = 0.1
    mask_ratio_max: float = 0.5
    center_rate: float = 0.1
    center_init: str = "first_batch"
    teacher_temp_warmup_fraction: float = 0.3
    lr_warmup_fraction: float = 0.1
    augment: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer.lower() != "adamw":
            raise ConfigError("only the AdamW optimizer is supported")
        if self.n_global_crops < 0:
            raise ConfigError("n_global_crops must be non-negative")
        if not 0.0 <= self.mask_ratio_min <= self.mask_ratio_max <= 1.0:
            raise ConfigError("mask ratios must satisfy 0 <= min <= max <= 1")
        if not 0.0 < self.center_rate <= 1.0:
            raise ConfigError("center_rate must lie in (0, 1]")
        if self.center_init not in ("zeros", "first_batch"):
            raise ConfigError("center_init must be 'zeros' or 'first_batch'")

    def schedule(self, total_steps: int) -> TrainSchedule:
        return TrainSchedule(
            total_steps=total_steps,
            base_lr=self.base_learning_rate,
            min_lr=self.min_learning_rate,
            warmup_steps=int(round(self.lr_warmup_fraction * total_steps)),
            weight_decay_start=self.weight_decay_start,
            weight_decay_end=self.weight_decay_end,
            momentum_start=self.teacher_momentum_start,
            momentum_end=self.teacher_momentum_end,
            warmup_teacher_temp=self.warmup_teacher_temperature,
            teacher_temp=self.teacher_temperature,
            teacher_temp_warmup_steps=int(round(self.teacher_temp_warmup_fraction * total_steps)),
        )


TINY_PRETRAIN = dict(
    student_architecture="tiny",
    batch_size_per_gpu=8,
    effective_batch=8,
    epochs=50,
    base_learning_rate=1e-3,
    prototypes=512,
    bottleneck_dim=32,
    head_hidden_dim=64,
    global_crop_size=56,
    drop_path_rate=0.1,
)


# --------------------------------------------------------------------------
# heads


class PrototypeHead(nn.Module):
    """MLP to an L2-normalised bottleneck, then a weight-normalised prototype layer.

    The prototype weights are normalised row-wise with the gain fixed at 1,
    so each logit is a cosine similarity in [-1, 1].
    """

    def __init__(self, in_dim, n_prototypes, hidden_dim=2048, bottleneck_dim=256, n_layers=3):
        super().__init__()
        if n_layers < 1:
            raise ConfigError("head needs at least one layer")
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [bottleneck_dim]
        layers = []
        for i in range(n_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < n_layers - 1:
                layers.append(nn.GELU())
        self.mlp = nn.Sequential(*layers)
        self.prototypes = nn.Parameter(torch.empty(n_prototypes, bottleneck_dim))
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.prototypes, std=0.02)

    @property
    def n_prototypes(self) -> int:
        return self.prototypes.shape[0]

    def forward(self, x):
        z = F.normalize(self.mlp(x), dim=-1)
        return z @ F.normalize(self.prototypes, dim=-1).T


# --------------------------------------------------------------------------
# losses


def _check_temps(*temps):
    for t in temps:
        if not t > 0:
            raise DomainError(f"temperatures must be positive, got {t}")


def dino_loss(student_logits, teacher_logits, t_student, t_teacher, center):
    """Cross-view distillation loss on class-token prototype scores.

    ``student_logits`` is [V_s, B, P] and ``teacher_logits`` [V_t, B, P].
    Teacher targets are centred, sharpened and detached. Every pair of
    different views (student view i, teacher view j, i != j) contributes one
    cross-entropy per image and the result is the mean. With a single view
    on either side there are no such pairs, so all pairs are used instead.
    """
    _check_temps(t_student, t_teacher)
    if student_logits.ndim != 3 or teacher_logits.ndim != 3:
        raise ShapeError("dino_loss expects [views, batch, prototypes] logits")
    targets = F.softmax((teacher_logits - center) / t_teacher, dim=-1).detach()
    log_probs = F.log_softmax(student_logits / t_student, dim=-1)
    # [V_t, V_s, B]
    ce = -torch.einsum("tbp,sbp->tsb", targets, log_probs)
    vt, vs = ce.shape[:2]
    keep = ~torch.eye(vt, vs, dtype=torch.bool)
    if not keep.any():
        keep = torch.ones(vt, vs, dtype=torch.bool)
    return ce[keep].mean()


def ibot_loss(student_patch_logits, teacher_patch_logits, mask, t_student, t_teacher, center):
    """Masked-patch distillation loss, averaged over masked positions only.

    Returns ``(loss, empty)``; ``empty`` is True when no position is masked,
    in which case the loss is a zero that still participates in autograd.
    """
    _check_temps(t_student, t_teacher)
    if student_patch_logits.shape != teacher_patch_logits.shape:
        raise ShapeError("student/teacher patch logits differ in shape")
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != student_patch_logits.shape[:2]:
        raise ShapeError(f"mask {tuple(mask.shape)} vs logits {tuple(student_patch_logits.shape)}")
    if not mask.any():
        return student_patch_logits.sum() * 0.0, True
    targets = F.softmax((teacher_patch_logits[mask] - center) / t_teacher, dim=-1).detach()
    log_probs = F.log_softmax(student_patch_logits[mask] / t_student, dim=-1)
    return -(targets * log_probs).sum(-1).mean(), False


@torch.no_grad()
def update_teacher(student: nn.Module, teacher: nn.Module, momentum: float) -> None:
    """EMA update, in place: teacher <- m * teacher + (1 - m) * student."""
    if not 0.0 <= momentum <= 1.0:
        raise DomainError(f"momentum must lie in [0, 1], got {momentum}")
    s_params = dict(student.named_parameters())
    t_params = dict(teacher.named_parameters())
    if s_params.keys() != t_params.keys() or any(
        s_params[k].shape != t_params[k].shape for k in s_params
    ):
        raise ConfigError("student and teacher are not structurally identical")
    for name, t in t_params.items():
        t.mul_(momentum).add_(s_params[name].detach(), alpha=1.0 - momentum)


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, rate: float) -> torch.Tensor:
    if not 0.0 < rate <= 1.0:
        raise DomainError(f"center rate must lie in (0, 1], got {rate}")
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    return (1.0 - rate) * center + rate * batch_mean


# --------------------------------------------------------------------------
# views and masks


def _random_resized_crop_params(h, w, scale=(0.32, 1.0), ratio=(3 / 4, 4 / 3)):
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * torch.empty(1).uniform_(*scale).item()
        aspect = math.exp(torch.empty(1).uniform_(*log_ratio).item())
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(torch.randint(0, h - ch + 1, (1,)).item())
            left = int(torch.randint(0, w - cw + 1, (1,)).item())
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def augment_view(img: torch.Tensor, size: int) -> torch.Tensor:
    """One global view of a single [C, H, W] image."""
    top, left, ch, cw = _random_resized_crop_params(*img.shape[-2:])
    out = TF.resized_crop(img, top, left, ch, cw, [size, size], antialias=True)
    if torch.rand(1).item() < 0.5:
        out = TF.horizontal_flip(out)
    brightness = torch.empty(1).uniform_(0.9, 1.1).item()
    contrast = torch.empty(1).uniform_(0.9, 1.1).item()
    mean = out.mean()
    out = (out - mean) * contrast + mean * brightness
    if torch.rand(1).item() < 0.5:
        sigma = torch.empty(1).uniform_(0.1, 2.0).item()
        k = max(3, int(2 * math.ceil(2 * sigma) + 1))
        k = min(k, size - (1 - size % 2))
        out = TF.gaussian_blur(out, [k, k], [sigma, sigma])
    return out


def make_global_crops(images: torch.Tensor, n_crops: int = 2, crop_size: int = 224, augment=True):
    """Return ``n_crops`` batches of global views; no local crops exist here.

    With ``augment=False`` each view is the whole image resized to
    ``crop_size`` (the identity when the source already has that size).
    """
    if n_crops < 0:
        raise DomainError("n_crops must be non-negative")
    h, w = images.shape[-2:]
    if h < crop_size or w < crop_size:
        raise ShapeError(f"image {h}x{w} smaller than crop size {crop_size}")
    views = []
    for _ in range(n_crops):
        if not augment:
            if (h, w) == (crop_size, crop_size):
                views.append(images.clone())
            else:
                views.append(
                    F.interpolate(images, size=(crop_size, crop_size), mode="bilinear",
                                  align_corners=False, antialias=True)
                )
            continue
        views.append(torch.stack([augment_view(img, crop_size) for img in images]))
    return views


def random_token_masks(batch: int, n_tokens: int, ratio_min=0.1, ratio_max=0.5):
    """Boolean [B, N] masks; sample b masks round(r_b * N) tokens, r_b ~ U[min, max]."""
    masks = torch.zeros(batch, n_tokens, dtype=torch.bool)
    ratios = torch.empty(batch).uniform_(ratio_min, ratio_max)
    for b in range(batch):
        k = int(round(ratios[b].item() * n_tokens))
        if k:
            masks[b, torch.randperm(n_tokens)[:k]] = True
    return masks, ratios


# --------------------------------------------------------------------------
# student / teacher


class SSLNetwork(nn.Module):
    """Encoder plus separate class-token (DINO) and patch-token (iBOT) heads."""

    def __init__(self, encoder: VisionTransformer, config: PretrainConfig):
        super().__init__()
        self.encoder = encoder
        head_kw = dict(
            hidden_dim=config.head_hidden_dim,
            bottleneck_dim=config.bottleneck_dim,
            n_layers=config.head_layers,
        )
        self.dino_head = PrototypeHead(encoder.embed_dim, config.prototypes, **head_kw)
        self.ibot_head = PrototypeHead(encoder.embed_dim, config.prototypes, **head_kw)

    def forward(self, images, masks=None):
        tokens = self.encoder(images, masks)
        return self.dino_head(tokens.class_token), self.ibot_head(tokens.patch_tokens)


class PretrainState:
    """Student, EMA teacher, centres, optimizer and schedule for one run."""

    def __init__(self, config: PretrainConfig, total_steps: int, encoder=None):
        self.config = config
        if encoder is None:
            encoder = VisionTransformer(
                encoder_config(
                    config.student_architecture,
                    patch_size=config.patch_size,
                    drop_path_rate=config.drop_path_rate,
                    layer_scale_init=config.layer_scale,
                    img_size=config.global_crop_size,
                )
            )
        self.student = SSLNetwork(encoder, config)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher.eval()
        P = config.prototypes
        self.dino_center = torch.zeros(P)
        self.ibot_center = torch.zeros(P)
        self.schedule = config.schedule(total_steps)
        self.optimizer = torch.optim.AdamW(
            self.student.parameters(),
            lr=0.0,
            betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps,
            weight_decay=config.weight_decay_start,
        )
        self.step = 0


def pretrain_step(images: torch.Tensor, state: PretrainState) -> dict:
    """One optimisation step; returns the logged losses and schedule values."""
    cfg = state.config
    sched = state.schedule.values(state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = sched["lr"]
        group["weight_decay"] = sched["weight_decay"]
    t_teacher = sched["teacher_temp"]

    views = make_global_crops(images, cfg.n_global_crops, cfg.global_crop_size, cfg.augment)
    if len(views) < 1:
        raise ConfigError("pretraining needs at least one global crop")
    batch = torch.cat(views)
    V, B = len(views), images.shape[0]
    n_tokens = (cfg.global_crop_size // cfg.patch_size) ** 2
    masks, _ = random_token_masks(V * B, n_tokens, cfg.mask_ratio_min, cfg.mask_ratio_max)

    with torch.no_grad():
        t_cls, t_patch = state.teacher(batch)
    if state.step == 0 and cfg.center_init == "first_batch":
        # an all-zero centre would leave the first targets uncentred
        state.dino_center = t_cls.mean(0)
        state.ibot_center = t_patch.reshape(-1, t_patch.shape[-1]).mean(0)
    state.student.train()
    s_cls, s_patch = state.student(batch, masks)

    d_loss = dino_loss(
        s_cls.reshape(V, B, -1), t_cls.reshape(V, B, -1),
        cfg.student_temperature, t_teacher, state.dino_center,
    )
    i_loss, empty = ibot_loss(
        s_patch, t_patch, masks, cfg.student_temperature, t_teacher, state.ibot_center
    )
    if empty:
        logger.warning("step %d: no masked tokens, iBOT loss is 0", state.step)
    total = cfg.dino_loss_weight * d_loss + cfg.ibot_loss_weight * i_loss
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss at step {state.step}",
            diagnostics={"step": state.step, **sched,
                         "dino": d_loss.item(), "ibot": i_loss.item()},
        )

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    update_teacher(state.student, state.teacher, sched["momentum"])
    state.dino_center = update_center(state.dino_center, t_cls, cfg.center_rate)
    state.ibot_center = update_center(state.ibot_center, t_patch[masks], cfg.center_rate) \
        if masks.any() else state.ibot_center
    state.step += 1
    return {
        "step": state.step - 1,
        "lr": sched["lr"],
        "momentum": sched["momentum"],
        "teacher_temp": t_teacher,
        "dino": d_loss.item(),
        "ibot": i_loss.item(),
        "total": total.item(),
    }


def format_loss_trace(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=LOSS_TRACE_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                         for k in LOSS_TRACE_FIELDS})
    return buf.getvalue()


class SelfDistillationPretrainer(TransformerMixin, BaseEstimator):
    """Pretrain a ViT by global-crop self-distillation, then embed images.

    Parameters
    ----------
    config : PretrainConfig or dict, default=None
        Hyperparameters. ``None`` uses the defaults; a dict is passed to
        :class:`PretrainConfig`.
    random_state : int, default=0
        Seed for every random draw of the run.

    Attributes
    ----------
    encoder_ : VisionTransformer
        The teacher encoder after training (the usual export for DINO-style runs).
    student_ : SSLNetwork
    history_ : list of dict
        One row per step with keys ``step, lr, momentum, teacher_temp, dino, ibot, total``.
    """

    def __init__(self, config=None, random_state=0):
        self.config = config
        self.random_state = random_state

    def _config(self) -> PretrainConfig:
        if self.config is None:
            return PretrainConfig()
        if isinstance(self.config, dict):
            return PretrainConfig(**self.config)
        return self.config

    def fit(self, X, y=None):
        cfg = self._config()
        X = check_images(X)
        seed_everything(self.random_state)
        bs = min(cfg.effective_batch, X.shape[0])
        steps_per_epoch = math.ceil(X.shape[0] / bs)
        total = cfg.epochs * steps_per_epoch
        state = PretrainState(cfg, total)
        history = []
        for epoch in range(cfg.epochs):
            order = torch.randperm(X.shape[0])
            for start in range(0, X.shape[0], bs):
                history.append(pretrain_step(X[order[start : start + bs]], state))
        self.state_ = state
        self.student_ = state.student
        self.encoder_ = state.teacher.encoder
        self.history_ = history
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @torch.no_grad()
    def transform(self, X):
        """Class-token embeddings from the teacher encoder, as a numpy array."""
        check_is_fitted(self, "encoder_")
        X = check_images(X, multiple_of=self._config().patch_size)
        self.encoder_.eval()
        return self.encoder_(X).class_token.numpy()

    def loss_trace_csv(self) -> str:
        check_is_fitted(self, "history_")
        return format_loss_trace(self.history_)


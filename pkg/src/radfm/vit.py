"""Vision Transformer encoder with layer scale, stochastic depth and
intermediate-layer taps."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigError, DomainError, ShapeError

PATCH_SIZE = 14


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    embed_dim: int = 384
    num_heads: int = 6
    patch_size: int = PATCH_SIZE
    drop_path_rate: float = 0.0
    layer_scale_init: float = 1e-5
    mlp_ratio: float = 4.0
    img_size: int = 224
    in_chans: int = 3

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("drop_path_rate must lie in [0, 1)")
        if self.layer_scale_init < 0:
            raise ConfigError("layer_scale_init must be non-negative")
        if self.depth < 0 or self.img_size % self.patch_size:
            raise ConfigError("invalid depth or img_size")


PRESETS = {
    "tiny": dict(depth=4, embed_dim=64, num_heads=4, layer_scale_init=0.1),
    "small": dict(depth=12, embed_dim=384, num_heads=6),
    "base": dict(depth=12, embed_dim=768, num_heads=12),
}


def encoder_config(preset: str = "small", **overrides) -> EncoderConfig:
    try:
        base = dict(PRESETS[preset])
    except KeyError:
        raise ConfigError(f"unknown encoder preset {preset!r}; choose from {sorted(PRESETS)}")
    base.update(overrides)
    return EncoderConfig(**base)


@dataclass
class TokenSequence:
    """Class token plus patch tokens laid out row-major over ``grid``."""

    class_token: torch.Tensor  # [B, D]
    patch_tokens: torch.Tensor  # [B, N, D]
    grid: tuple[int, int]

    def __post_init__(self):
        gh, gw = self.grid
        if self.patch_tokens.shape[1] != gh * gw:
            raise ShapeError(
                f"{self.patch_tokens.shape[1]} patch tokens do not fill grid {gh}x{gw}"
            )

    @classmethod
    def from_tensor(cls, x: torch.Tensor, grid) -> "TokenSequence":
        return cls(x[:, 0], x[:, 1:], tuple(grid))

    def to_tensor(self) -> torch.Tensor:
        return torch.cat([self.class_token[:, None], self.patch_tokens], dim=1)

    @property
    def n_tokens(self) -> int:
        return self.patch_tokens.shape[1]


def drop_path(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    """Per-sample stochastic depth on a residual branch output."""
    if p == 0.0 or not training:
        return x
    keep = 1.0 - p
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = torch.empty(shape, dtype=x.dtype, device=x.device).bernoulli_(keep)
    return x * mask / keep


class LayerScale(nn.Module):
    def __init__(self, dim, init_value):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), float(init_value)))

    def forward(self, x):
        return x * self.gamma


class Attention(nn.Module):
    # separate q/k/v projections so LoRA can target q and v individually
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        h = self.num_heads

        def split(t):
            return t.reshape(B, N, h, D // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio, drop_path_rate, layer_scale_init):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.ls1 = LayerScale(dim, layer_scale_init)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = LayerScale(dim, layer_scale_init)
        self.drop_path_rate = drop_path_rate

    def forward(self, x, use_drop_path=None):
        active = self.training if use_drop_path is None else use_drop_path
        x = x + drop_path(self.ls1(self.attn(self.norm1(x))), self.drop_path_rate, active)
        x = x + drop_path(self.ls2(self.mlp(self.norm2(x))), self.drop_path_rate, active)
        return x


class VisionTransformer(nn.Module):
    """ViT producing a class token and a grid of patch tokens.

    Positional embeddings are learned for the ``img_size`` grid and resized
    bilinearly for other input sizes. ``mask_token`` replaces masked patch
    embeddings when a boolean mask is passed to :meth:`patchify`.
    """

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        D = config.embed_dim
        self.patch_embed = nn.Conv2d(
            config.in_chans, D, kernel_size=config.patch_size, stride=config.patch_size
        )
        g = config.img_size // config.patch_size
        self.init_grid = (g, g)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, D))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + g * g, D))
        self.mask_token = nn.Parameter(torch.zeros(1, D))
        n = config.depth
        rates = [config.drop_path_rate * i / (n - 1) if n > 1 else 0.0 for i in range(n)]
        self.blocks = nn.ModuleList(
            Block(D, config.num_heads, config.mlp_ratio, r, config.layer_scale_init) for r in rates
        )
        self.norm = nn.LayerNorm(D, eps=1e-6)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.cls_token, std=1e-6)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    @property
    def depth(self) -> int:
        return self.config.depth

    def grid_for(self, height: int, width: int) -> tuple[int, int]:
        p = self.config.patch_size
        if height % p or width % p:
            raise ShapeError(f"image size {height}x{width} is not a multiple of patch size {p}")
        return height // p, width // p

    def interpolate_pos_embed(self, grid) -> torch.Tensor:
        if tuple(grid) == self.init_grid:
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        gh0, gw0 = self.init_grid
        D = patch_pos.shape[-1]
        patch_pos = patch_pos.reshape(1, gh0, gw0, D).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=tuple(grid), mode="bilinear", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, -1, D)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def patchify(self, images: torch.Tensor, masks: torch.Tensor | None = None) -> TokenSequence:
        """Embed patches, prepend the class token and add positions.

        ``masks`` is an optional boolean [B, N] array; masked patch
        embeddings are swapped for the learned mask token before positions
        are added.
        """
        if images.ndim != 4:
            raise ShapeError(f"expected [B, C, H, W], got {tuple(images.shape)}")
        grid = self.grid_for(*images.shape[-2:])
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        if masks is not None:
            if masks.shape != x.shape[:2]:
                raise ShapeError(f"mask shape {tuple(masks.shape)} != {tuple(x.shape[:2])}")
            x = torch.where(masks[..., None], self.mask_token.to(x.dtype), x)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.interpolate_pos_embed(grid)
        return TokenSequence.from_tensor(x, grid)

    def forward_tokens(self, tokens: TokenSequence) -> TokenSequence:
        """Run every block and the terminal norm. Drop path follows ``self.training``."""
        x = tokens.to_tensor()
        if x.shape[-1] != self.embed_dim:
            raise ShapeError(f"token dim {x.shape[-1]} != embed_dim {self.embed_dim}")
        for blk in self.blocks:
            x = blk(x)
        return TokenSequence.from_tensor(self.norm(x), tokens.grid)

    def forward(self, images: torch.Tensor, masks: torch.Tensor | None = None) -> TokenSequence:
        return self.forward_tokens(self.patchify(images, masks))

    def forward_with_intermediates(self, images: torch.Tensor, layers) -> list[TokenSequence]:
        """Tap block outputs (after the residual add, before the final norm).

        Indices are 0-based and returned in request order. Drop path is off
        regardless of the module mode.
        """
        layers = list(layers)
        for idx in layers:
            if not 0 <= idx < self.depth:
                raise DomainError(f"layer index {idx} outside [0, {self.depth})")
        if not layers:
            return []
        tokens = self.patchify(images)
        x = tokens.to_tensor()
        taps = {}
        last = max(layers)
        for i, blk in enumerate(self.blocks[: last + 1]):
            x = blk(x, use_drop_path=False)
            if i in layers:
                taps[i] = x
        return [TokenSequence.from_tensor(taps[i], tokens.grid) for i in layers]


def build_encoder(preset: str = "small", **overrides) -> VisionTransformer:
    return VisionTransformer(encoder_config(preset, **overrides))

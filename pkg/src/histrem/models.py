"""Model zoo: four classifier families behind one interface.

families:
  resnet    - plain residual CNN (stem + staged basic blocks + MLP head)
  resnet_a  - same topology with narrower widths plus channel (squeeze-
              excitation) and spatial (single-channel sigmoid mask) attention
              after each stage
  vit       - patch-embedding transformer encoder with a class token
  ours      - convolutional stem to a token grid, self-attention blocks each
              wrapped in an identity-skip residual, global pooling, MLP head

Inputs are channels-last float batches [B, S, S, 3]; outputs are logits
[B, num_classes]. Networks are deterministic in eval mode (dropout defaults
to 0) and per-sample independent, so batch permutation permutes logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .seeding import derive_seed

FAMILIES = ("resnet", "resnet_a", "vit", "ours")


class InvalidConfig(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    family: str = "resnet"
    input_size: int = 64
    num_classes: int = 2
    # conv families
    widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    se_reduction: int = 4
    # token families
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 16
    stem_strides: tuple[int, int] = (2, 4)
    # shared
    head_hidden: tuple[int, ...] = ()
    dropout: float = 0.0

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise InvalidConfig(f"unknown family {self.family!r}")
        if self.input_size < 8:
            raise InvalidConfig(f"input_size too small: {self.input_size}")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.family in ("resnet", "resnet_a"):
            if not self.widths:
                raise InvalidConfig("widths must be nonempty")
            if self.blocks_per_stage < 1:
                raise InvalidConfig("blocks_per_stage must be >= 1")
        if self.family == "vit":
            if self.input_size % self.patch_size != 0:
                raise InvalidConfig(
                    f"patch size {self.patch_size} does not divide input size {self.input_size}"
                )
        if self.family in ("vit", "ours"):
            if self.embed_dim % self.heads != 0:
                raise InvalidConfig(
                    f"heads {self.heads} must divide embed_dim {self.embed_dim}"
                )
            if self.depth < 1:
                raise InvalidConfig("depth must be >= 1")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "blocks_per_stage": self.blocks_per_stage,
            "se_reduction": self.se_reduction,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "patch_size": self.patch_size,
            "stem_strides": list(self.stem_strides),
            "head_hidden": list(self.head_hidden),
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("widths", "stem_strides", "head_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _norm(channels: int) -> nn.GroupNorm:
    groups = 4 if channels % 4 == 0 else 1
    return nn.GroupNorm(groups, channels)


def _mlp_head(in_dim: int, hidden: tuple[int, ...], num_classes: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    for h in hidden:
        layers += [nn.Linear(in_dim, h), nn.ReLU()]
        in_dim = h
    layers.append(nn.Linear(in_dim, num_classes))
    return nn.Sequential(*layers)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _norm(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _norm(cout)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ChannelGate(nn.Module):
    """Squeeze-excitation: global pool -> bottleneck MLP -> sigmoid gates."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)[:, :, None, None]


class SpatialGate(nn.Module):
    """Single-channel sigmoid mask from channel-pooled statistics."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, 7, padding=3)

    def mask(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.mask(x)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, d = t.shape
        return t.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        q, k, _ = self.qkv(x).chunk(3, dim=-1)
        dots = self._split(q) @ self._split(k).transpose(-1, -2) * self.scale
        return dots.softmax(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        attn = (self._split(q) @ self._split(k).transpose(-1, -2) * self.scale).softmax(dim=-1)
        out = (self.drop(attn) @ self._split(v)).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class PreNorm(nn.Module):
    def __init__(self, dim: int, fn: nn.Module):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fn = fn

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fn(self.norm(x))


class Residual(nn.Module):
    """Identity-skip wrapper: forward(x) = x + inner(x)."""

    def __init__(self, inner: nn.Module):
        super().__init__()
        self.inner = inner

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.inner(x)


def _token_mlp(dim: int, ratio: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, dim * ratio), nn.GELU(), nn.Linear(dim * ratio, dim))


def transformer_blocks(dim: int, depth: int, heads: int, ratio: int, dropout: float) -> nn.ModuleList:
    blocks = []
    for _ in range(depth):
        blocks.append(Residual(PreNorm(dim, MultiHeadSelfAttention(dim, heads, dropout))))
        blocks.append(Residual(PreNorm(dim, _token_mlp(dim, ratio))))
    return nn.ModuleList(blocks)


class ClassifierNet(nn.Module):
    """Base class: validates channels-last input, exposes the shared config."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def _to_nchw(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[3] != 3:
            raise ShapeMismatch(f"expected [B, S, S, 3], got {tuple(x.shape)}")
        s = self.config.input_size
        if x.shape[1] != s or x.shape[2] != s:
            raise ShapeMismatch(
                f"expected spatial size {s}, got {tuple(x.shape[1:3])}"
            )
        return x.permute(0, 3, 1, 2).contiguous()


class ResNetClassifier(ClassifierNet):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        widths = config.widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, padding=1, bias=False), _norm(widths[0]), nn.ReLU()
        )
        stages = []
        cin = widths[0]
        for i, w in enumerate(widths):
            blocks: list[nn.Module] = []
            for b in range(config.blocks_per_stage):
                stride = 2 if (b == 0 and i > 0) else 1
                blocks.append(BasicBlock(cin, w, stride))
                cin = w
            if config.family == "resnet_a":
                blocks.append(ChannelGate(w, config.se_reduction))
                blocks.append(SpatialGate())
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.head = _mlp_head(widths[-1], config.head_hidden, config.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._to_nchw(x)
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.head(x.mean(dim=(2, 3)))


class ViTClassifier(ClassifierNet):
    def __init__(self, config: ModelConfig):
        super().__init__(config)
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, config.patch_size, stride=config.patch_size)
        self.n_patches = (config.input_size // config.patch_size) ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.n_patches + 1, d))
        self.blocks = transformer_blocks(d, config.depth, config.heads, config.mlp_ratio, config.dropout)
        self.norm = nn.LayerNorm(d)
        self.head = _mlp_head(d, config.head_hidden, config.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._to_nchw(x)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        x = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x)[:, 0])


class AttentionResidualClassifier(ClassifierNet):
    """Conv stem to a token grid, residual self-attention blocks, MLP head."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        d = config.embed_dim
        s1, s2 = config.stem_strides
        self.stem = nn.Sequential(
            nn.Conv2d(3, d // 2, 3, stride=s1, padding=1, bias=False),
            _norm(d // 2),
            nn.ReLU(),
            nn.Conv2d(d // 2, d, 3, stride=s2, padding=1, bias=False),
        )
        grid = math.ceil(config.input_size / s1)
        grid = math.ceil(grid / s2)
        self.n_tokens = grid * grid
        self.pos_embed = nn.Parameter(torch.zeros(1, self.n_tokens, d))
        self.blocks = transformer_blocks(d, config.depth, config.heads, config.mlp_ratio, config.dropout)
        self.norm = nn.LayerNorm(d)
        self.head = _mlp_head(d, config.head_hidden, config.num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._to_nchw(x)
        x = self.stem(x).flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x).mean(dim=1))


def _trunc_normal_(tensor: torch.Tensor, std: float, g: torch.Generator) -> None:
    with torch.no_grad():
        tensor.normal_(0.0, std, generator=g)
        for _ in range(16):
            bad = tensor.abs() > 2 * std
            if not bad.any():
                return
            fresh = torch.empty(int(bad.sum()), dtype=tensor.dtype)
            fresh.normal_(0.0, std, generator=g)
            tensor[bad] = fresh
        tensor.clamp_(-2 * std, 2 * std)


def _init_parameters(net: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(derive_seed(seed, "init"))
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.Linear):
                _trunc_normal_(module.weight, 0.02, g)
                module.bias.zero_()
            elif isinstance(module, (nn.GroupNorm, nn.LayerNorm)):
                module.weight.fill_(1.0)
                module.bias.zero_()
        for name, param in net.named_parameters():
            if "pos_embed" in name or "cls_token" in name:
                _trunc_normal_(param, 0.02, g)


_FAMILY_CLASSES = {
    "resnet": ResNetClassifier,
    "resnet_a": ResNetClassifier,
    "vit": ViTClassifier,
    "ours": AttentionResidualClassifier,
}


def build(config: ModelConfig, seed: int = 0) -> ClassifierNet:
    """Build and initialize a network; bitwise deterministic per seed."""
    config.validate()
    net = _FAMILY_CLASSES[config.family](config)
    _init_parameters(net, seed)
    net.eval()
    return net


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def predict_probs(net: ClassifierNet, images, batch_size: int = 64) -> "torch.Tensor":
    """Activity probabilities (positive-class softmax) for a stack of images."""
    net.eval()
    x = torch.as_tensor(images, dtype=torch.float32)
    probs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            logits = net(x[start : start + batch_size])
            probs.append(torch.softmax(logits, dim=1)[:, 1])
    return torch.cat(probs) if probs else torch.zeros(0)


PRESETS: dict[str, ModelConfig] = {
    # desk scale: sized so the full ablation grid runs in minutes on a CPU
    "resnet-desk": ModelConfig(family="resnet", input_size=64, widths=(16, 32, 64, 128)),
    "resnet-efficient-desk": ModelConfig(family="resnet", input_size=64, widths=(12, 24, 40, 64)),
    "resnet-a-desk": ModelConfig(family="resnet_a", input_size=64, widths=(12, 24, 48, 96)),
    "vit-desk": ModelConfig(family="vit", input_size=64, embed_dim=128, depth=4, heads=4),
    "vit-wide-desk": ModelConfig(family="vit", input_size=64, embed_dim=192, depth=4, heads=6),
    "ours-desk": ModelConfig(
        family="ours", input_size=64, embed_dim=128, depth=4, heads=4, head_hidden=(64,)
    ),
    # tiny scale for finite-difference gradient checks (<= 5k parameters)
    "resnet-tiny": ModelConfig(family="resnet", input_size=16, widths=(4, 8), blocks_per_stage=1),
    "resnet-a-tiny": ModelConfig(
        family="resnet_a", input_size=16, widths=(4, 8), blocks_per_stage=1, se_reduction=2
    ),
    "vit-tiny": ModelConfig(
        family="vit", input_size=16, patch_size=8, embed_dim=12, depth=1, heads=2, mlp_ratio=2
    ),
    "ours-tiny": ModelConfig(
        family="ours",
        input_size=16,
        stem_strides=(2, 2),
        embed_dim=12,
        depth=1,
        heads=2,
        mlp_ratio=2,
        head_hidden=(8,),
    ),
    # full-scale reference configs: buildable for completeness, not trained here
    "resnet-full": ModelConfig(family="resnet", input_size=224, widths=(64, 128, 256, 512), blocks_per_stage=3),
    "vit-base": ModelConfig(family="vit", input_size=224, embed_dim=768, depth=12, heads=12),
    "vit-large": ModelConfig(family="vit", input_size=224, embed_dim=1024, depth=24, heads=16),
    "ours-full": ModelConfig(family="ours", input_size=224, stem_strides=(4, 4), embed_dim=256, depth=6, heads=8, head_hidden=(64,)),
}

TINY_PRESETS = ("resnet-tiny", "resnet-a-tiny", "vit-tiny", "ours-tiny")


def preset(name: str, input_size: int | None = None) -> ModelConfig:
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    cfg = PRESETS[name]
    if input_size is not None and input_size != cfg.input_size:
        cfg = replace(cfg, input_size=input_size)
    return cfg

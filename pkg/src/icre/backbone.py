"""Dual-stream ResNet backbone, GeM pooling, BNNeck and the identity classifier."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "Variant",
    "BackboneConfig",
    "StageFeatures",
    "EmbeddingBatch",
    "DualStreamBackbone",
    "GeM",
    "gem_pool",
    "BNNeck",
    "IdentityClassifier",
]

GEM_EPS = 1e-6


class Variant(str, enum.Enum):
    RESNET50 = "RESNET50"
    TINY = "TINY"


@dataclass(frozen=True)
class BackboneConfig:
    variant: Variant = Variant.TINY
    stem_channels: int = 16
    stage_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    stage_strides: tuple[int, int, int, int] = (1, 2, 2, 1)
    stage_blocks: tuple[int, int, int, int] = (1, 1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if len(self.stage_channels) != 4 or len(self.stage_strides) != 4:
            raise ValueError("need exactly four stage widths and strides")
        if self.stage_strides[-1] != 1:
            raise ValueError("last stage stride must be 1")
        widths = (self.stem_channels, *self.stage_channels)
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError("channel widths must be non-decreasing")

    @classmethod
    def tiny(cls) -> "BackboneConfig":
        return cls()

    @classmethod
    def resnet50(cls) -> "BackboneConfig":
        return cls(
            variant=Variant.RESNET50,
            stem_channels=64,
            stage_channels=(256, 512, 1024, 2048),
            stage_strides=(1, 2, 2, 1),
            stage_blocks=(3, 4, 6, 3),
        )

    @property
    def stem_stride(self) -> int:
        # 7x7/2 conv + 3x3/2 max-pool for ResNet-50, a single 3x3/2 conv otherwise
        return 4 if self.variant is Variant.RESNET50 else 2

    def stage_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """Output (C, H, W) of stages 1-4 for an input of the given size."""
        shapes = []
        h, w = height, width
        if self.variant is Variant.RESNET50:
            h, w = _conv_out(h, 7, 2, 3), _conv_out(w, 7, 2, 3)
            h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
        else:
            h, w = _conv_out(h, 3, 2, 1), _conv_out(w, 3, 2, 1)
        for c, s in zip(self.stage_channels, self.stage_strides):
            h, w = _conv_out(h, 3, s, 1), _conv_out(w, 3, s, 1)
            shapes.append((c, h, w))
        return shapes


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


@dataclass
class StageFeatures:
    f_l: torch.Tensor
    f_m: torch.Tensor
    f_h: torch.Tensor
    f_1: Optional[torch.Tensor] = None

    def by_stage(self) -> dict[int, torch.Tensor]:
        out = {2: self.f_l, 3: self.f_m, 4: self.f_h}
        if self.f_1 is not None:
            out[1] = self.f_1
        return out


@dataclass
class EmbeddingBatch:
    """Pooled (``F_pool``) and BNNeck (``F_bn``) features with their labels."""

    F_pool: torch.Tensor
    F_bn: torch.Tensor
    identities: torch.Tensor
    modalities: torch.Tensor
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.F_pool.shape[0]
        if self.F_bn.shape != self.F_pool.shape:
            raise ValueError("F_pool and F_bn must have the same shape")
        if len(self.identities) != n or len(self.modalities) != n:
            raise ValueError("label arrays must have one entry per row")


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        idt = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + idt)


class Bottleneck(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        mid = cout // 4
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        idt = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + idt)


def _make_stem(cfg: BackboneConfig) -> nn.Sequential:
    if cfg.variant is Variant.RESNET50:
        return nn.Sequential(
            nn.Conv2d(3, cfg.stem_channels, 7, 2, 3, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
    return nn.Sequential(
        nn.Conv2d(3, cfg.stem_channels, 3, 2, 1, bias=False),
        nn.BatchNorm2d(cfg.stem_channels),
        nn.ReLU(inplace=True),
    )


class DualStreamBackbone(nn.Module):
    """Modality-specific stems followed by four shared residual stages.

    ``forward(images, modalities)`` accepts a mixed batch: rows are routed
    through the stem of their modality (0 = visible, 1 = infrared) and put
    back in input order before the shared stages.
    """

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or BackboneConfig.tiny()
        self.stem_vis = _make_stem(cfg)
        self.stem_ir = _make_stem(cfg)
        block = Bottleneck if cfg.variant is Variant.RESNET50 else BasicBlock
        stages = []
        cin = cfg.stem_channels
        for cout, stride, n in zip(cfg.stage_channels, cfg.stage_strides, cfg.stage_blocks):
            layers = [block(cin, cout, stride)] + [block(cout, cout, 1) for _ in range(n - 1)]
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stages = nn.ModuleList(stages)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def stems(self):
        return {0: self.stem_vis, 1: self.stem_ir}

    def shared_parameters(self):
        return list(self.stages.parameters())

    def forward(self, images: torch.Tensor, modalities) -> StageFeatures:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        modalities = torch.as_tensor(modalities).reshape(-1)
        if modalities.numel() == 1 and images.shape[0] != 1:
            modalities = modalities.expand(images.shape[0])
        if modalities.numel() != images.shape[0]:
            raise ValueError("one modality label per image is required")
        x = None
        for code, stem in self.stems().items():
            sel = (modalities == code).nonzero(as_tuple=True)[0]
            if sel.numel() == 0:
                continue
            out = stem(images[sel])
            if x is None:
                x = out.new_empty((images.shape[0], *out.shape[1:]))
            x = x.index_copy(0, sel, out)
        if x is None or (modalities > 1).any() or (modalities < 0).any():
            raise ValueError("modality labels must be 0 (VIS) or 1 (IR)")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return StageFeatures(f_1=feats[0], f_l=feats[1], f_m=feats[2], f_h=feats[3])


def gem_pool(fmap: torch.Tensor, p: float = 3.0, eps: float = GEM_EPS) -> torch.Tensor:
    """Generalized-mean pooling over the spatial axes of an ``(N, C, H, W)`` map."""
    if p < 1:
        raise ValueError("GeM exponent must be >= 1")
    if not torch.isfinite(fmap).all():
        raise ValueError("non-finite input to gem_pool")
    return fmap.clamp(min=eps).pow(p).mean(dim=(-2, -1)).pow(1.0 / p)


class GeM(nn.Module):
    def __init__(self, p: float = 3.0, eps: float = GEM_EPS):
        super().__init__()
        self.p = p
        self.eps = eps

    def forward(self, x):
        return gem_pool(x, self.p, self.eps)

    def extra_repr(self):
        return f"p={self.p}, eps={self.eps}"


class BNNeck(nn.BatchNorm1d):
    """BatchNorm1d without the bias term."""

    def __init__(self, dim: int, momentum: float = 0.1):
        super().__init__(dim, momentum=momentum)
        self.bias.requires_grad_(False)
        nn.init.zeros_(self.bias)

    def forward(self, x):
        if self.training and x.shape[0] < 2:
            raise ValueError("BNNeck needs at least two samples in training mode")
        return super().forward(x)


class IdentityClassifier(nn.Linear):
    def __init__(self, dim: int, num_classes: int, bias: bool = True):
        super().__init__(dim, num_classes, bias=bias)
        nn.init.normal_(self.weight, std=0.001)
        if bias:
            nn.init.zeros_(self.bias)

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ValueError(f"expected {self.in_features}-d features, got {x.shape[-1]}")
        return super().forward(x)

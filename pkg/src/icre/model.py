"""The full network: dual-stream backbone -> MPFR -> SDCE -> GeM -> BNNeck -> classifier."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .backbone import BackboneConfig, BNNeck, DualStreamBackbone, EmbeddingBatch, GeM, IdentityClassifier, Variant
from .mpfr import MPFR
from .sdce import SDCE

__all__ = ["ICRENet"]


class ICRENet(nn.Module):
    """Switchable ICRE network.

    With ``mpfr=False`` the SDCE stage is skipped too (it consumes the MPFR
    output), so ``f_h`` feeds pooling directly, giving the baseline.
    ``sdce_residual`` adds the SDCE output onto ``f_h`` instead of replacing
    it; GeM clamps negatives, and the layer-normalized SDCE tokens are
    roughly zero-mean, so pooling them alone discards most of the signal.
    """

    def __init__(
        self,
        num_classes: int,
        backbone: BackboneConfig | None = None,
        image_size: tuple[int, int] = (64, 32),
        mpfr: bool = True,
        sdce: bool = True,
        mpfr_scales: Sequence[int] = (2, 3, 4),
        heads: int | None = None,
        sdce_self_block: bool = True,
        sdce_jib: bool = True,
        beta_cross: bool = True,
        beta_self: bool = False,
        gem_p: float = 3.0,
        bn_momentum: float = 0.1,
        sdce_residual: bool = True,
    ):
        super().__init__()
        cfg = backbone or BackboneConfig.tiny()
        self.num_classes = num_classes
        self.backbone = DualStreamBackbone(cfg)
        shapes = dict(enumerate(cfg.stage_shapes(*image_size), start=1))
        c_h = shapes[4][0]
        self.mpfr = MPFR(shapes, mpfr_scales) if mpfr else None
        if heads is None:
            heads = 8 if cfg.variant is Variant.RESNET50 else 4
        self.sdce = (
            SDCE(c_h, heads, self_block=sdce_self_block, jib=sdce_jib, beta_cross=beta_cross, beta_self=beta_self)
            if (mpfr and sdce) else None
        )
        self.sdce_residual = sdce_residual
        self.pool = GeM(gem_p)
        self.bnneck = BNNeck(c_h, momentum=bn_momentum)
        self.classifier = IdentityClassifier(c_h, num_classes)
        for m in self.modules():
            if isinstance(m, nn.BatchNorm2d) or isinstance(m, nn.BatchNorm1d):
                m.momentum = bn_momentum

    def feature_map(self, images: torch.Tensor, modalities) -> torch.Tensor:
        stages = self.backbone(images, modalities)
        if self.mpfr is None:
            return stages.f_h
        fused = self.mpfr(stages)
        if self.sdce is None:
            return fused
        enhanced = self.sdce(stages.f_h, fused)
        return stages.f_h + enhanced if self.sdce_residual else enhanced

    def embed(self, images: torch.Tensor, modalities) -> tuple[torch.Tensor, torch.Tensor]:
        f_pool = self.pool(self.feature_map(images, modalities))
        return f_pool, self.bnneck(f_pool)

    def forward(self, images: torch.Tensor, modalities, identities: torch.Tensor | None = None):
        f_pool, f_bn = self.embed(images, modalities)
        logits = self.classifier(f_bn)
        if identities is None:
            return logits
        mods = torch.as_tensor(modalities).reshape(-1).expand(images.shape[0])
        return logits, EmbeddingBatch(f_pool, f_bn, identities, mods)

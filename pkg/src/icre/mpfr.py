"""Multi-perception feature refinement: mask-weighted fusion of backbone stages."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .backbone import StageFeatures

__all__ = [
    "ConvBlock",
    "align_stride",
    "build_descriptor",
    "DilatedMask",
    "normalize_masks",
    "weighted_sum",
    "MPFR",
]


class ConvBlock(nn.Sequential):
    """Conv -> BatchNorm -> ReLU."""

    def __init__(self, cin: int, cout: int, kernel_size: int = 3, stride: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, kernel_size, stride, kernel_size // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=False),
        )


def align_stride(src_hw: Sequence[int], dst_hw: Sequence[int]) -> tuple[int, int]:
    """Stride that maps ``src_hw`` onto ``dst_hw`` with a padded 3x3 conv."""
    strides = []
    for s, d in zip(src_hw, dst_hw):
        if d <= 0 or s % d:
            raise ValueError(f"spatial size {tuple(src_hw)} cannot be reduced to {tuple(dst_hw)}")
        strides.append(s // d)
    return tuple(strides)


def build_descriptor(fmap: torch.Tensor) -> torch.Tensor:
    """Channel-wise max and mean maps, concatenated as ``(N, 2, H, W)`` (max first)."""
    return torch.cat([fmap.amax(dim=1, keepdim=True), fmap.mean(dim=1, keepdim=True)], dim=1)


class DilatedMask(nn.Module):
    """Sum of three 3x3 convolutions (dilations 1, 2, 3) from a 2-channel descriptor to one mask."""

    def __init__(self, dilations: Sequence[int] = (1, 2, 3)):
        super().__init__()
        self.branches = nn.ModuleList(nn.Conv2d(2, 1, 3, padding=d, dilation=d, bias=True) for d in dilations)

    def forward(self, desc: torch.Tensor) -> torch.Tensor:
        out = self.branches[0](desc)
        for conv in self.branches[1:]:
            out = out + conv(desc)
        return out


def normalize_masks(masks: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Per-pixel softmax across scales; a single mask is gated by a sigmoid instead."""
    if not masks:
        raise ValueError("need at least one mask")
    if len(masks) == 1:
        return [torch.sigmoid(masks[0])]
    w = torch.softmax(torch.stack(masks, dim=0), dim=0)
    return list(w.unbind(0))


def weighted_sum(aligned: Sequence[torch.Tensor], weights: Sequence[torch.Tensor]) -> torch.Tensor:
    """``sum_i w_i * f_i`` with each 1-channel weight broadcast over channels."""
    if len(aligned) != len(weights):
        raise ValueError("one weight map per aligned feature is required")
    ref = aligned[0].shape
    out = None
    for f, w in zip(aligned, weights):
        if f.shape != ref or w.shape[-2:] != ref[-2:] or w.shape[1] != 1:
            raise ValueError("aligned features and weights have inconsistent shapes")
        out = f * w if out is None else out + f * w
    return out


class MPFR(nn.Module):
    """Aggregates the selected backbone stages into a map shaped like ``f_h``.

    ``stage_shapes`` maps stage index (1-4) to its ``(C, H, W)`` output;
    ``scales`` selects which stages take part (default 2, 3, 4). Each stage is
    aligned to ``(C_a, H_h, W_h)`` with ``C_a`` = channels of stage 3, masked,
    and the weighted sum is lifted back to ``C_h`` by a 1x1 ConvBlock.
    """

    def __init__(self, stage_shapes: dict, scales: Sequence[int] = (2, 3, 4), aligned_channels: int | None = None):
        super().__init__()
        scales = tuple(sorted(scales))
        if not scales:
            raise ValueError("MPFR needs a non-empty scale subset")
        if any(s not in stage_shapes for s in scales):
            raise ValueError(f"unknown stage in {scales}")
        self.scales = scales
        c_h, h_h, w_h = stage_shapes[4]
        c_a = aligned_channels or stage_shapes[3][0]
        self.strides = {}
        self.align = nn.ModuleDict()
        self.masks = nn.ModuleDict()
        for s in scales:
            c, h, w = stage_shapes[s]
            stride = align_stride((h, w), (h_h, w_h))
            self.strides[s] = stride
            self.align[str(s)] = ConvBlock(c, c_a, 3, stride)
            self.masks[str(s)] = DilatedMask()
        self.fusion = ConvBlock(c_a, c_h, kernel_size=1)

    def align_scale(self, fmap: torch.Tensor, stage: int) -> torch.Tensor:
        return self.align[str(stage)](fmap)

    def spatial_weights(self, aligned: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        raw = [self.masks[str(s)](build_descriptor(f)) for s, f in zip(self.scales, aligned)]
        return normalize_masks(raw)

    def forward(self, stages: StageFeatures, return_weights: bool = False):
        by_stage = stages.by_stage()
        missing = [s for s in self.scales if s not in by_stage]
        if missing:
            raise ValueError(f"stage features {missing} were not provided")
        aligned = [self.align_scale(by_stage[s], s) for s in self.scales]
        weights = self.spatial_weights(aligned)
        out = self.fusion(weighted_sum(aligned, weights))
        if return_weights:
            return out, weights
        return out

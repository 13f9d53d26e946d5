"""U-Net over rasterized map patches, sharing the feature-pyramid contract.

A 4-stage encoder with skip connections into a decoder that emits coarse
features at half resolution, fine features at full resolution, and
segmentation logits supervised in the ground-truth frame.
"""

from __future__ import annotations

import torch
from torch import nn

from ..se2 import GridSpec
from .bev import FeaturePyramid, conv_block


class MapUNet(nn.Module):
    """4-stage strided encoder, skip-merging decoder, fused full-res head.

    Skips are merged with 1x1 convolutions and the single full-resolution
    operation emits fine features and segmentation logits together, which
    keeps the memory-bound full-resolution work minimal on CPU.
    """

    def __init__(self, c_in: int = 3, d_coarse: int = 64, d_fine: int = 16,
                 width: int = 16, n_classes: int = 3):
        super().__init__()
        w = width
        self.d_fine = d_fine
        self.enc0 = conv_block(c_in, w, stride=2)
        self.enc1 = conv_block(w, 2 * w, stride=2)
        self.enc2 = conv_block(2 * w, 4 * w, stride=2)
        self.enc3 = conv_block(4 * w, 8 * w, stride=2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec2 = conv_block(12 * w, 4 * w, kernel=1)
        self.dec1 = conv_block(6 * w, 2 * w, kernel=1)
        self.dec0 = conv_block(3 * w, w, kernel=1)
        self.coarse_head = nn.Conv2d(w, d_coarse, 1)
        self.fine_seg_head = nn.Conv2d(w, d_fine + n_classes, 1)

    def forward(self, patch: torch.Tensor, spec: GridSpec):
        if patch.shape[1] != self.enc0[0].in_channels:
            raise ValueError(f"expected {self.enc0[0].in_channels} channels, "
                             f"got {patch.shape[1]}")
        e0 = self.enc0(patch)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        d2 = self.dec2(torch.cat([self.up(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up(d2), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up(d1), e0], dim=1))
        full = self.fine_seg_head(self.up(d0))
        pyramid = FeaturePyramid(self.coarse_head(d0), full[:, :self.d_fine], spec)
        return pyramid, full[:, self.d_fine:]

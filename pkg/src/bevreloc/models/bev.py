"""Perspective image encoding, depth-weighted BEV splatting, BEV decoding.

The image encoder is a small strided CNN emitting 1/8-resolution features
plus a softmax depth distribution per feature pixel.  Features are lifted
along depth-bin centers through the camera model into ego space and
sum-pooled into BEV cells (linear in the features, which the tests
exploit).  The decoder turns the raw BEV grid into the coarse/fine
feature pyramid and auxiliary segmentation logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..camera import CameraRig
from ..se2 import GridSpec

ENCODER_STRIDE = 8


@dataclass(frozen=True)
class DepthBins:
    """Uniform-in-depth bins; features are lifted at bin centers."""

    d_min: float = 4.0
    d_max: float = 60.0
    step: float = 1.0

    def __post_init__(self):
        if self.d_max <= self.d_min or self.step <= 0:
            raise ValueError("require d_max > d_min and positive step")
        if abs(self.count - (self.d_max - self.d_min) / self.step) > 1e-9:
            raise ValueError("range must tile into whole bins")

    @property
    def count(self) -> int:
        return int(round((self.d_max - self.d_min) / self.step))

    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.count) + 0.5) * self.step


@dataclass
class FeaturePyramid:
    """Coarse (low-res, high-channel) and fine (full-res, low-channel) maps."""

    coarse: torch.Tensor  # (B, D_c, H/2, W/2)
    fine: torch.Tensor    # (B, D_f, H, W)
    spec: GridSpec

    def __post_init__(self):
        _, dc, hc, wc = self.coarse.shape
        _, df, hf, wf = self.fine.shape
        if (hc * 2, wc * 2) != (hf, wf):
            raise ValueError(f"coarse {hc}x{wc} must be half of fine {hf}x{wf}")
        if dc <= df:
            raise ValueError("coarse must have more channels than fine")


def conv_block(c_in: int, c_out: int, stride: int = 1, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(c_out),
        nn.GELU(),
    )


class ImageEncoder(nn.Module):
    """4-stage strided CNN: images at (H, W) -> features + depth at (H/8, W/8)."""

    def __init__(self, rig: CameraRig, bins: DepthBins, d_img: int = 64, width: int = 16):
        super().__init__()
        self.rig = rig
        self.bins = bins
        self.d_img = d_img
        self.stem = conv_block(3, width)
        self.down1 = conv_block(width, width * 2, stride=2)
        self.down2 = conv_block(width * 2, width * 4, stride=2)
        self.down3 = conv_block(width * 4, width * 4, stride=2)
        self.head = nn.Conv2d(width * 4, d_img + bins.count, 1)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, N, 3, H, W) images -> (B, N, D_img, h, w), (B, N, D, h, w)."""
        b, n, c, h, w = images.shape
        ih, iw = self.rig.image_size
        if (h, w) != (ih, iw):
            raise ValueError(f"expected {ih}x{iw} images, got {h}x{w}")
        if n != len(self.rig):
            raise ValueError(f"expected {len(self.rig)} cameras, got {n}")
        x = images.reshape(b * n, c, h, w)
        x = self.down3(self.down2(self.down1(self.stem(x))))
        x = self.head(x)
        feats = x[:, :self.d_img]
        depth = torch.softmax(x[:, self.d_img:], dim=1)
        hh, ww = h // ENCODER_STRIDE, w // ENCODER_STRIDE
        return (feats.reshape(b, n, self.d_img, hh, ww),
                depth.reshape(b, n, self.bins.count, hh, ww))


def splat_geometry(rig: CameraRig, bins: DepthBins, spec: GridSpec,
                   feat_h: int, feat_w: int):
    """Precomputed BEV cell index per (camera, depth bin, feature pixel).

    Feature pixel (i, j) unprojects from image position
    u = (j + 0.5) * (W / w) - 0.5 (the pixel-center lattice of the input
    image), through the pinhole at each bin center, into the ego frame.
    Returns int64 (N, D, h*w) flat cell indices and a bool in-range mask.
    """
    ih, iw = rig.image_size
    centers = bins.centers()
    n, d, hw = len(rig), bins.count, feat_h * feat_w
    index = np.zeros((n, d, hw), dtype=np.int64)
    valid = np.zeros((n, d, hw), dtype=bool)

    jj, ii = np.meshgrid(np.arange(feat_w), np.arange(feat_h))
    for k, cam in enumerate(rig.cameras):
        u = (jj.ravel() + 0.5) * (iw / feat_w) - 0.5
        v = (ii.ravel() + 0.5) * (ih / feat_h) - 0.5
        ray = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy,
                        np.ones(hw)], axis=0)  # (3, hw)
        r = cam.rotation_ego_from_cam()
        for q, depth in enumerate(centers):
            p_cam = ray * depth
            p_ego = r @ p_cam + np.asarray(cam.position)[:, None]
            row = np.floor((spec.x_range[1] - p_ego[0]) / spec.resolution).astype(np.int64)
            col = np.floor((spec.y_range[1] - p_ego[1]) / spec.resolution).astype(np.int64)
            ok = (row >= 0) & (row < spec.rows) & (col >= 0) & (col < spec.cols)
            index[k, q] = np.where(ok, row * spec.cols + col, 0)
            valid[k, q] = ok
    return index, valid


def lift_splat(features: torch.Tensor, depths: torch.Tensor, rig: CameraRig,
               spec: GridSpec, bins: DepthBins | None = None) -> torch.Tensor:
    """Sum-pool depth-weighted features into BEV cells.

    features: (B, N, C, h, w); depths: (B, N, D, h, w) -> (B, C, rows, cols).
    Projections outside the grid are discarded.
    """
    bins = DepthBins() if bins is None else bins
    b, n, c, h, w = features.shape
    if depths.shape != (b, n, bins.count, h, w):
        raise ValueError(f"depths {tuple(depths.shape)} inconsistent with "
                         f"features {tuple(features.shape)} and {bins.count} bins")

    index, valid = splat_geometry(rig, bins, spec, h, w)
    idx = torch.from_numpy(index).to(features.device)              # (N, D, hw)
    mask = torch.from_numpy(valid).to(features.device, features.dtype)

    feats = features.reshape(b, n, c, h * w)
    weights = depths.reshape(b, n, bins.count, h * w) * mask       # (B, N, D, hw)

    out = features.new_zeros(b, c, spec.rows * spec.cols)
    flat_idx = idx.reshape(1, 1, -1).expand(b, c, -1)              # (B, C, N*D*hw)
    src = (feats.unsqueeze(3) * weights.unsqueeze(2))              # (B, N, C, D, hw)
    src = src.permute(0, 2, 1, 3, 4).reshape(b, c, -1)
    out.scatter_add_(2, flat_idx, src)
    return out.reshape(b, c, spec.rows, spec.cols)


class BevDecoder(nn.Module):
    """Raw BEV grid -> feature pyramid + segmentation logits off the fine path.

    The encoder works at strided resolutions and the decoder merges skip
    connections with 1x1 convolutions; the only full-resolution compute is
    one fused 1x1 head producing the fine features and the segmentation
    logits together (full-resolution tensors dominate CPU cost).
    """

    def __init__(self, c_in: int, d_coarse: int = 64, d_fine: int = 16,
                 width: int = 16, n_classes: int = 3):
        super().__init__()
        w = width
        self.d_fine = d_fine
        self.enc0 = conv_block(c_in, w, stride=2)
        self.enc1 = conv_block(w, 2 * w, stride=2)
        self.enc2 = conv_block(2 * w, 4 * w, stride=2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec1 = conv_block(6 * w, 2 * w, kernel=1)
        self.dec0 = conv_block(3 * w, w, kernel=1)
        self.coarse_head = nn.Conv2d(w, d_coarse, 1)
        self.fine_seg_head = nn.Conv2d(w, d_fine + n_classes, 1)

    def forward(self, raw: torch.Tensor, spec: GridSpec):
        e0 = self.enc0(raw)
        e1 = self.enc1(e0)
        e2 = self.enc2(e1)
        d1 = self.dec1(torch.cat([self.up(e2), e1], dim=1))
        d0 = self.dec0(torch.cat([self.up(d1), e0], dim=1))
        full = self.fine_seg_head(self.up(d0))
        pyramid = FeaturePyramid(self.coarse_head(d0), full[:, :self.d_fine], spec)
        return pyramid, full[:, self.d_fine:]

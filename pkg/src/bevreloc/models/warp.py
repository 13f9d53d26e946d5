"""Differentiable SE(2) warping of feature maps about the grid center.

output(r, c) samples the input at the pixel of to_matrix(xi) applied to
(r, c)'s metric coordinates, with bilinear interpolation between pixel
centers and zeros outside the grid.  Gradients flow to both the features
and the pose.
"""

from __future__ import annotations

import torch

from ..se2 import GridSpec


def _source_indices(xi: torch.Tensor, spec: GridSpec, device, dtype):
    """Fractional source pixel indices for every output pixel; (B, H, W) pair."""
    h, w = spec.rows, spec.cols
    res = spec.resolution
    x_max, y_max = spec.x_range[1], spec.y_range[1]

    rows = torch.arange(h, device=device, dtype=dtype) + 0.5
    cols = torch.arange(w, device=device, dtype=dtype) + 0.5
    x = x_max - rows * res   # (H,)
    y = y_max - cols * res   # (W,)
    xg = x[:, None].expand(h, w)
    yg = y[None, :].expand(h, w)

    c = torch.cos(xi[:, 2])[:, None, None]
    s = torch.sin(xi[:, 2])[:, None, None]
    xs = c * xg - s * yg + xi[:, 0][:, None, None]
    ys = s * xg + c * yg + xi[:, 1][:, None, None]

    src_r = (x_max - xs) / res - 0.5
    src_c = (y_max - ys) / res - 0.5
    return src_r, src_c


def warp_features(features: torch.Tensor, xi: torch.Tensor, spec: GridSpec) -> torch.Tensor:
    """Resample (B, C, H, W) features by the batched offset (B, 3)."""
    b, ch, h, w = features.shape
    if (h, w) != (spec.rows, spec.cols):
        raise ValueError(f"features {h}x{w} do not match spec {spec.rows}x{spec.cols}")
    if xi.shape != (b, 3):
        raise ValueError(f"xi must be ({b}, 3), got {tuple(xi.shape)}")

    src_r, src_c = _source_indices(xi, spec, features.device, features.dtype)

    # a non-finite pose must not corrupt the gather; it surfaces in the
    # pose tensor itself, while the warped output degrades to zeros
    finite = torch.isfinite(src_r) & torch.isfinite(src_c)
    src_r = torch.nan_to_num(src_r, nan=-1.0, posinf=-1.0, neginf=-1.0)
    src_c = torch.nan_to_num(src_c, nan=-1.0, posinf=-1.0, neginf=-1.0)

    r0 = torch.floor(src_r)
    c0 = torch.floor(src_c)
    dr = src_r - r0
    dc = src_c - c0

    flat = features.reshape(b, ch, h * w)
    out = torch.zeros_like(features)
    for roff, rw in ((0, 1 - dr), (1, dr)):
        for coff, cw in ((0, 1 - dc), (1, dc)):
            ri = r0 + roff
            ci = c0 + coff
            valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w) & finite
            idx = (ri.clamp(0, h - 1) * w + ci.clamp(0, w - 1)).long()
            taps = torch.gather(flat, 2, idx.reshape(b, 1, h * w).expand(b, ch, h * w))
            weight = (rw * cw * valid).reshape(b, 1, h * w)
            out += (taps * weight).reshape(b, ch, h, w)
    return out


def warp_validity_mask(xi: torch.Tensor, spec: GridSpec, device=None,
                       dtype=torch.float32) -> torch.Tensor:
    """(B, H, W) mask of output pixels whose four taps are all in range."""
    ones = torch.ones(xi.shape[0], 1, spec.rows, spec.cols, device=device, dtype=dtype)
    return (warp_features(ones, xi.to(dtype), spec)[:, 0] >= 1.0 - 1e-6)

"""Differentiable SE(2) helpers on (..., 3) pose tensors.

Torch mirror of the double-precision scalar algebra in `se2`; the two
are cross-checked in the test suite.  Angles are wrapped to (-pi, pi].
"""

from __future__ import annotations

import math

import torch


def wrap_angle_t(theta: torch.Tensor) -> torch.Tensor:
    return math.pi - torch.remainder(math.pi - theta, 2 * math.pi)


def compose_t(second: torch.Tensor, first: torch.Tensor) -> torch.Tensor:
    """Batched offset composition (matrix second @ first)."""
    c2, s2 = torch.cos(second[..., 2]), torch.sin(second[..., 2])
    dx = c2 * first[..., 0] - s2 * first[..., 1] + second[..., 0]
    dy = s2 * first[..., 0] + c2 * first[..., 1] + second[..., 1]
    dtheta = wrap_angle_t(second[..., 2] + first[..., 2])
    return torch.stack([dx, dy, dtheta], dim=-1)


def inverse_t(xi: torch.Tensor) -> torch.Tensor:
    c, s = torch.cos(xi[..., 2]), torch.sin(xi[..., 2])
    dx = -(c * xi[..., 0] + s * xi[..., 1])
    dy = s * xi[..., 0] - c * xi[..., 1]
    return torch.stack([dx, dy, wrap_angle_t(-xi[..., 2])], dim=-1)


def residual_target_t(gt: torch.Tensor, coarse_pred: torch.Tensor) -> torch.Tensor:
    """Batched refinement target: compose(result, coarse_pred) == gt."""
    return compose_t(gt, inverse_t(coarse_pred))

"""SE(2) pose-offset algebra and metric<->pixel grid conventions.

Every other module builds on the conventions fixed here:

* A pose offset is the triple (dx, dy, dtheta): longitudinal and lateral
  translation in meters plus a heading offset in radians wrapped to
  (-pi, pi].  The same triple doubles as a world pose (x, y, heading).
* Rasters are row-major grids where ego-forward (+x) points toward row 0
  and ego-left (+y) points toward column 0.

All algebra here is double precision; network code converts at its own
boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - (math.pi - theta) % _TWO_PI


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=float), _TWO_PI)


@dataclass(frozen=True)
class PoseOffset:
    """A 3-DoF rigid correction (dx, dy, dtheta).

    dx is longitudinal (ego-forward), dy lateral (ego-left), dtheta a
    heading offset in radians.  The angle is re-wrapped into (-pi, pi]
    on construction; non-finite components are rejected.
    """

    dx: float
    dy: float
    dtheta: float

    def __post_init__(self):
        dx = float(self.dx)
        dy = float(self.dy)
        dtheta = float(self.dtheta)
        if not (math.isfinite(dx) and math.isfinite(dy) and math.isfinite(dtheta)):
            raise ValueError(f"non-finite pose offset ({dx}, {dy}, {dtheta})")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)
        object.__setattr__(self, "dtheta", wrap_angle(dtheta))

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=float)

    def to_json_dict(self) -> dict:
        return {"dx": self.dx, "dy": self.dy, "dtheta": self.dtheta}

    @staticmethod
    def from_json_dict(d: dict) -> "PoseOffset":
        return PoseOffset(d["dx"], d["dy"], d["dtheta"])

    @staticmethod
    def identity() -> "PoseOffset":
        return PoseOffset(0.0, 0.0, 0.0)


# A world pose (x, y, heading) shares the representation of an offset.
Pose = PoseOffset


class SE2Matrix:
    """3x3 homogeneous SE(2) matrix with validated structure."""

    __slots__ = ("m",)

    def __init__(self, m: np.ndarray):
        m = np.asarray(m, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"expected 3x3 matrix, got {m.shape}")
        r = m[:2, :2]
        if not np.array_equal(m[2], (0.0, 0.0, 1.0)):
            raise ValueError("bottom row must be exactly (0, 0, 1)")
        if not np.allclose(r.T @ r, np.eye(2), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("upper-left block is not a proper rotation")
        self.m = m

    @property
    def rotation(self) -> np.ndarray:
        return self.m[:2, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.m[:2, 2]

    def __matmul__(self, other: "SE2Matrix") -> "SE2Matrix":
        return SE2Matrix(self.m @ other.m)


def to_matrix(xi: PoseOffset) -> SE2Matrix:
    """Homogeneous matrix with R = R(dtheta) and t = (dx, dy)."""
    c, s = math.cos(xi.dtheta), math.sin(xi.dtheta)
    return SE2Matrix(np.array([
        [c, -s, xi.dx],
        [s, c, xi.dy],
        [0.0, 0.0, 1.0],
    ]))


def to_offset(mat: SE2Matrix) -> PoseOffset:
    """Inverse of to_matrix."""
    m = mat.m
    return PoseOffset(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))


def compose(second: PoseOffset, first: PoseOffset) -> PoseOffset:
    """Offset equivalent to applying `first` then `second` (matrix second @ first)."""
    c2, s2 = math.cos(second.dtheta), math.sin(second.dtheta)
    return PoseOffset(
        c2 * first.dx - s2 * first.dy + second.dx,
        s2 * first.dx + c2 * first.dy + second.dy,
        second.dtheta + first.dtheta,  # wrapped by the constructor
    )


def inverse(xi: PoseOffset) -> PoseOffset:
    """Offset such that compose(inverse(xi), xi) is the identity."""
    c, s = math.cos(xi.dtheta), math.sin(xi.dtheta)
    return PoseOffset(-(c * xi.dx + s * xi.dy), s * xi.dx - c * xi.dy, -xi.dtheta)


def residual_target(gt: PoseOffset, coarse_pred: PoseOffset) -> PoseOffset:
    """Remaining correction after a first-stage prediction.

    Defined so that compose(result, coarse_pred) == gt; this is the
    supervision target of the refinement stage.
    """
    return compose(gt, inverse(coarse_pred))


def transform_points(xi: PoseOffset, points: np.ndarray) -> np.ndarray:
    """Apply the rigid transform to an (N, 2) array of points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    c, s = math.cos(xi.dtheta), math.sin(xi.dtheta)
    r = np.array([[c, -s], [s, c]])
    return pts @ r.T + np.array([xi.dx, xi.dy])


@dataclass(frozen=True)
class GridSpec:
    """Metric raster geometry: a rows x cols grid at fixed meters-per-pixel.

    Row 0 sits at x_max (ego-forward), column 0 at y_max (ego-left).
    Ranges must tile exactly into the pixel counts.
    """

    rows: int
    cols: int
    resolution: float
    x_range: tuple[float, float]
    y_range: tuple[float, float]

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        x_min, x_max = self.x_range
        y_min, y_max = self.y_range
        if not math.isclose((x_max - x_min) / self.resolution, self.rows, abs_tol=1e-9):
            raise ValueError("rows must equal (x_max - x_min) / resolution")
        if not math.isclose((y_max - y_min) / self.resolution, self.cols, abs_tol=1e-9):
            raise ValueError("cols must equal (y_max - y_min) / resolution")

    @property
    def x_max(self) -> float:
        return self.x_range[1]

    @property
    def y_max(self) -> float:
        return self.y_range[1]

    def metric_to_pixel(self, x, y):
        """Fractional (row, col) of metric coordinates; out-of-range allowed."""
        row = (self.x_range[1] - np.asarray(x, dtype=float)) / self.resolution
        col = (self.y_range[1] - np.asarray(y, dtype=float)) / self.resolution
        return row, col

    def pixel_to_metric(self, row, col):
        """Exact inverse of metric_to_pixel."""
        x = self.x_range[1] - np.asarray(row, dtype=float) * self.resolution
        y = self.y_range[1] - np.asarray(col, dtype=float) * self.resolution
        return x, y

    def pixel_center_coords(self):
        """Metric (x, y) of every pixel center as two (rows, cols) arrays."""
        rows = np.arange(self.rows, dtype=float) + 0.5
        cols = np.arange(self.cols, dtype=float) + 0.5
        x = self.x_range[1] - rows * self.resolution
        y = self.y_range[1] - cols * self.resolution
        return np.meshgrid(x, y, indexing="ij")

    def to_json_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "resolution": self.resolution,
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "GridSpec":
        return GridSpec(d["rows"], d["cols"], d["resolution"],
                        tuple(d["x_range"]), tuple(d["y_range"]))


def metric_to_pixel(spec: GridSpec, x, y):
    return spec.metric_to_pixel(x, y)


def pixel_to_metric(spec: GridSpec, row, col):
    return spec.pixel_to_metric(row, col)


# Canonical grids: the ego perceptual range is [-64, 64] m longitudinally
# and [-32, 32] m laterally at 0.5 m/px; map patches cover the central
# 128 m x 128 m around the (noisy) query pose at the same resolution.
BEV_SPEC = GridSpec(rows=256, cols=128, resolution=0.5,
                    x_range=(-64.0, 64.0), y_range=(-32.0, 32.0))
MAP_SPEC = GridSpec(rows=256, cols=256, resolution=0.5,
                    x_range=(-64.0, 64.0), y_range=(-64.0, 64.0))

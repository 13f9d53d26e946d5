"""Metric rasterization of vector maps and GPS-error simulation.

A raster pixel is set when its center lies inside the rendered shape, so
rendering agrees exactly with a point-in-polygon oracle evaluated at
pixel centers.  Channel order is fixed: (lanes, buildings, nodes); in
segmentation-label context channel 0 is the drivable area (lanes widened
to their rendered width).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .se2 import GridSpec, MAP_SPEC, PoseOffset, compose, inverse, transform_points
from .vectormap import VectorMap

CHANNELS = ("lanes", "buildings", "nodes")
DEFAULT_LANE_WIDTH = 3.0
DEFAULT_NODE_RADIUS = 1.0
_PNG_SET_VALUE = 255


@dataclass
class RasterMap:
    """Binary multi-channel raster with its grid geometry and world origin."""

    channels: np.ndarray  # (3, rows, cols) uint8 in {0, 1}
    spec: GridSpec
    origin_pose: PoseOffset

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        if self.channels.shape != (len(CHANNELS), self.spec.rows, self.spec.cols):
            raise ValueError(f"bad raster shape {self.channels.shape}")
        if self.channels.max(initial=0) > 1:
            raise ValueError("raster values must be binary")

    def save(self, path_stem) -> tuple[Path, Path]:
        """Write planar grayscale PNG (channels stacked along rows) + sidecar."""
        stem = Path(path_stem)
        png = stem.with_suffix(".png")
        planar = (self.channels.reshape(-1, self.spec.cols) * _PNG_SET_VALUE).astype(np.uint8)
        Image.fromarray(planar, mode="L").save(png, optimize=False)
        sidecar = stem.with_suffix(".json")
        sidecar.write_text(json.dumps({
            "version": 1,
            "spec": self.spec.to_json_dict(),
            "origin_pose": self.origin_pose.to_json_dict(),
            "channels": list(CHANNELS),
            "set_value": _PNG_SET_VALUE,
        }, sort_keys=True) + "\n")
        return png, sidecar

    @staticmethod
    def load(path_stem) -> "RasterMap":
        stem = Path(path_stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        spec = GridSpec.from_json_dict(meta["spec"])
        planar = np.asarray(Image.open(stem.with_suffix(".png")), dtype=np.uint8)
        channels = (planar.reshape(len(meta["channels"]), spec.rows, spec.cols)
                    // meta["set_value"]).astype(np.uint8)
        return RasterMap(channels, spec, PoseOffset.from_json_dict(meta["origin_pose"]))


@dataclass(frozen=True)
class NoiseSpec:
    """Uniform 3-DoF perturbation bounds simulating GPS error."""

    max_translation: float
    max_rotation: float
    rng_seed: int

    def __post_init__(self):
        if self.max_translation < 0:
            raise ValueError("max_translation must be >= 0")
        if not 0 <= self.max_rotation < np.pi:
            raise ValueError("max_rotation must lie in [0, pi)")

    def to_json_dict(self) -> dict:
        return {"max_translation": self.max_translation,
                "max_rotation": self.max_rotation,
                "rng_seed": self.rng_seed}

    @staticmethod
    def from_json_dict(d: dict) -> "NoiseSpec":
        return NoiseSpec(d["max_translation"], d["max_rotation"], d["rng_seed"])


def perturb_pose(gt_pose: PoseOffset, noise: NoiseSpec) -> tuple[PoseOffset, PoseOffset]:
    """Draw a noisy pose around the ground truth.

    Returns (noisy_pose, xi1) where xi1 = (dx, dy, dtheta) is drawn
    component-wise uniform (that draw order is part of the reproducibility
    contract) and noisy_pose = gt_pose composed with xi1 in the ego frame,
    so that xi1 is exactly the offset mapping ground-truth-frame content
    onto the noisy frame.
    """
    rng = np.random.default_rng(noise.rng_seed)
    t, r = noise.max_translation, noise.max_rotation
    dx = rng.uniform(-t, t) if t > 0 else 0.0
    dy = rng.uniform(-t, t) if t > 0 else 0.0
    dtheta = rng.uniform(-r, r) if r > 0 else 0.0
    xi1 = PoseOffset(dx, dy, dtheta)
    return compose(gt_pose, xi1), xi1


def _window(spec: GridSpec, x_lo, x_hi, y_lo, y_hi, pad):
    """Integer pixel window covering a metric bbox, clipped to the grid."""
    r_lo, c_lo = spec.metric_to_pixel(x_hi + pad, y_hi + pad)
    r_hi, c_hi = spec.metric_to_pixel(x_lo - pad, y_lo - pad)
    r0 = max(int(np.floor(r_lo)), 0)
    r1 = min(int(np.ceil(r_hi)) + 1, spec.rows)
    c0 = max(int(np.floor(c_lo)), 0)
    c1 = min(int(np.ceil(c_hi)) + 1, spec.cols)
    return r0, r1, c0, c1


def _centers(spec: GridSpec, r0, r1, c0, c1):
    x = spec.x_range[1] - (np.arange(r0, r1) + 0.5) * spec.resolution
    y = spec.y_range[1] - (np.arange(c0, c1) + 0.5) * spec.resolution
    return np.meshgrid(x, y, indexing="ij")


def _fill_polygon(plane: np.ndarray, spec: GridSpec, poly: np.ndarray):
    r0, r1, c0, c1 = _window(spec, poly[:, 0].min(), poly[:, 0].max(),
                             poly[:, 1].min(), poly[:, 1].max(), 0.0)
    if r0 >= r1 or c0 >= c1:
        return
    px, py = _centers(spec, r0, r1, c0, c1)
    inside = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < xi)
    plane[r0:r1, c0:c1] |= inside


def _fill_capsule(plane: np.ndarray, spec: GridSpec, a: np.ndarray, b: np.ndarray, half_w: float):
    r0, r1, c0, c1 = _window(spec, min(a[0], b[0]), max(a[0], b[0]),
                             min(a[1], b[1]), max(a[1], b[1]), half_w)
    if r0 >= r1 or c0 >= c1:
        return
    px, py = _centers(spec, r0, r1, c0, c1)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        d2 = (px - a[0]) ** 2 + (py - a[1]) ** 2
    else:
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
        d2 = (px - (a[0] + t * ab[0])) ** 2 + (py - (a[1] + t * ab[1])) ** 2
    plane[r0:r1, c0:c1] |= d2 <= half_w * half_w


def _fill_disc(plane: np.ndarray, spec: GridSpec, center: np.ndarray, radius: float):
    _fill_capsule(plane, spec, center, center, radius)


def rasterize(vmap: VectorMap, spec: GridSpec, center: PoseOffset,
              lane_width: float = DEFAULT_LANE_WIDTH,
              node_radius: float = DEFAULT_NODE_RADIUS,
              channel_mask: tuple[bool, bool, bool] = (True, True, True)) -> RasterMap:
    """Render the map into the ego frame of `center` (heading points to row 0).

    Lanes are drawn as capsules of their stored width (falling back to
    lane_width), buildings are filled polygons, nodes are filled discs.
    Deterministic; an empty map yields an all-zero raster.
    """
    channels = np.zeros((3, spec.rows, spec.cols), dtype=bool)
    to_ego = inverse(center)

    if channel_mask[0]:
        for i, lane in enumerate(vmap.lanes):
            width = vmap.lane_widths[i] if vmap.lane_widths is not None else lane_width
            pts = transform_points(to_ego, lane)
            for a, b in zip(pts[:-1], pts[1:]):
                _fill_capsule(channels[0], spec, a, b, width / 2.0)
    if channel_mask[1]:
        for building in vmap.buildings:
            _fill_polygon(channels[1], spec, transform_points(to_ego, building.polygon))
    if channel_mask[2]:
        for node in vmap.nodes:
            pt = transform_points(to_ego, node.xy)[0]
            _fill_disc(channels[2], spec, pt, node_radius)

    return RasterMap(channels.astype(np.uint8), spec, center)


def extract_patch(vmap: VectorMap, noisy_pose: PoseOffset,
                  lane_width: float = DEFAULT_LANE_WIDTH,
                  node_radius: float = DEFAULT_NODE_RADIUS,
                  channel_mask: tuple[bool, bool, bool] = (True, True, True)) -> RasterMap:
    """Canonical 256x256 px, 0.5 m/px map patch centered on the noisy pose."""
    return rasterize(vmap, MAP_SPEC, noisy_pose, lane_width, node_radius, channel_mask)


def segmentation_labels(vmap: VectorMap, gt_pose: PoseOffset,
                        spec: GridSpec | None = None,
                        lane_width: float = DEFAULT_LANE_WIDTH,
                        node_radius: float = DEFAULT_NODE_RADIUS) -> np.ndarray:
    """Ego-frame labels (drivable, buildings, nodes) at the true pose.

    The drivable plane is the union of lane centerlines widened to their
    stored width, which is exact for generated worlds where that width is
    the full road width.
    """
    from .se2 import BEV_SPEC
    spec = BEV_SPEC if spec is None else spec
    return rasterize(vmap, spec, gt_pose, lane_width, node_radius).channels

"""Procedural city-like worlds with exact ground truth.

Worlds are jittered road grids with rectangular buildings set back into
the blocks and PoI nodes near intersections.  Road centerlines carry the
full road width so the rendered lane channel doubles as the exact
drivable area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .se2 import PoseOffset
from .vectormap import Building, MapNode, VectorMap

# Road positions start 0.4..0.6 blocks from the edge and advance by
# 0.8..1.2 blocks; an extent of k blocks therefore yields between
# ceil((k-1)/1.2)+1 and floor((k-0.8)/0.8)+1 roads per axis.
_START_JITTER = (0.4, 0.6)
_SPACING_JITTER = (0.8, 1.2)

BUILDING_HEIGHT_RANGE = (6.0, 30.0)
_SETBACK_RANGE = (2.0, 6.0)
_MIN_BUILDING_SIDE = 6.0
_HEADING_JITTER = math.radians(8.0)


@dataclass(frozen=True)
class WorldSpec:
    """Parameters of a generated world."""

    extent: float = 512.0
    block_size: float = 128.0
    road_width: float = 8.0
    building_density: float = 0.5
    node_density: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.extent < 4 * self.block_size:
            raise ValueError("extent must be at least 4 blocks")
        for name in ("building_density", "node_density"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "extent": self.extent,
            "block_size": self.block_size,
            "road_width": self.road_width,
            "building_density": self.building_density,
            "node_density": self.node_density,
            "rng_seed": self.rng_seed,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "WorldSpec":
        return WorldSpec(**d)


def _road_positions(rng: np.random.Generator, extent: float, block: float) -> np.ndarray:
    half = extent / 2.0
    limit = half - _START_JITTER[0] * block
    pos = -half + rng.uniform(*_START_JITTER) * block
    out = []
    while pos <= limit:
        out.append(pos)
        pos += rng.uniform(*_SPACING_JITTER) * block
    return np.asarray(out)


def generate_world(spec: WorldSpec) -> VectorMap:
    """Deterministic road grid + buildings + intersection nodes."""
    rng = np.random.default_rng(spec.rng_seed)
    half = spec.extent / 2.0

    xs = _road_positions(rng, spec.extent, spec.block_size)  # roads running along y
    ys = _road_positions(rng, spec.extent, spec.block_size)  # roads running along x

    lanes: list[np.ndarray] = []
    for y in ys:
        lanes.append(np.array([[-half, y], [half, y]]))
    for x in xs:
        lanes.append(np.array([[x, -half], [x, half]]))
    lane_widths = [spec.road_width] * len(lanes)

    buildings: list[Building] = []
    rw = spec.road_width / 2.0
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            # usable block interior between the road edges
            x0, x1 = xs[i] + rw, xs[i + 1] - rw
            y0, y1 = ys[j] + rw, ys[j + 1] - rw
            xm, ym = (x0 + x1) / 2.0, (y0 + y1) / 2.0
            for qx0, qx1, qy0, qy1 in ((x0, xm, y0, ym), (xm, x1, y0, ym),
                                       (x0, xm, ym, y1), (xm, x1, ym, y1)):
                occupied = rng.uniform() < spec.building_density
                setbacks = rng.uniform(*_SETBACK_RANGE, size=4)
                height = rng.uniform(*BUILDING_HEIGHT_RANGE)
                if not occupied:
                    continue
                bx0, bx1 = qx0 + setbacks[0], qx1 - setbacks[1]
                by0, by1 = qy0 + setbacks[2], qy1 - setbacks[3]
                if bx1 - bx0 < _MIN_BUILDING_SIDE or by1 - by0 < _MIN_BUILDING_SIDE:
                    continue
                poly = np.array([[bx0, by0], [bx1, by0], [bx1, by1], [bx0, by1]])
                buildings.append(Building(poly, height))

    nodes: list[MapNode] = []
    corner = rw + 1.5
    for x in xs:
        for y in ys:
            present = rng.uniform() < spec.node_density
            sx, sy = rng.choice([-1.0, 1.0]), rng.choice([-1.0, 1.0])
            kind = "traffic-signal" if rng.uniform() < 0.6 else "pole"
            if present:
                nodes.append(MapNode(x + sx * corner, y + sy * corner, kind))

    return VectorMap(lanes, buildings, nodes,
                     bounds=(-half, -half, half, half), lane_widths=lane_widths)


def sample_ego_pose(vmap: VectorMap, rng: np.random.Generator,
                    end_margin: float = 20.0) -> PoseOffset:
    """Random on-road pose: heading tangent to the road with a small jitter.

    Works on any VectorMap with lanes; lateral placement stays 1 m inside
    the lane's rendered width.
    """
    if not vmap.lanes:
        raise ValueError("world has no roads to place poses on")
    lengths = np.array([np.linalg.norm(np.diff(l, axis=0), axis=1).sum() for l in vmap.lanes])
    idx = rng.choice(len(vmap.lanes), p=lengths / lengths.sum())
    lane = vmap.lanes[idx]
    width = vmap.lane_widths[idx] if vmap.lane_widths is not None else 3.0

    seg_len = np.linalg.norm(np.diff(lane, axis=0), axis=1)
    total = seg_len.sum()
    margin = min(end_margin, 0.4 * total)
    s = rng.uniform(margin, total - margin)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    k = int(np.searchsorted(cum, s, side="right")) - 1
    k = min(k, len(seg_len) - 1)
    t = (s - cum[k]) / seg_len[k]
    point = lane[k] + t * (lane[k + 1] - lane[k])
    tangent = (lane[k + 1] - lane[k]) / seg_len[k]

    lateral = rng.uniform(-1.0, 1.0) * max(width / 2.0 - 1.0, 0.0)
    normal = np.array([-tangent[1], tangent[0]])
    point = point + lateral * normal

    heading = math.atan2(tangent[1], tangent[0]) + rng.uniform(-_HEADING_JITTER, _HEADING_JITTER)
    if rng.uniform() < 0.5:
        heading += math.pi
    return PoseOffset(point[0], point[1], heading)

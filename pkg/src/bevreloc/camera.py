"""Pinhole camera rig and semantic ray-cast rendering of generated worlds.

Renders class-colored images rather than photorealistic ones: the ground
plane is colored by drivable class, buildings are extruded boxes using
their stored heights, and nodes become thin vertical markers.  Camera
axes follow the usual pinhole convention (z forward, x right in image,
y down); yaw 0 looks along ego +x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .se2 import PoseOffset
from .vectormap import VectorMap

IMAGE_WIDTH = 352
IMAGE_HEIGHT = 128
DEFAULT_HFOV_DEG = 70.0
DEFAULT_CAMERA_HEIGHT = 1.6
MAX_RENDER_RANGE = 120.0
NODE_MARKER_RADIUS = 0.25
NODE_MARKER_HEIGHT = 4.0

CLASS_SKY = 0
CLASS_GROUND = 1
CLASS_DRIVABLE = 2
CLASS_BUILDING = 3
CLASS_NODE = 4

#: RGB encoding of the semantic classes, documented part of the format.
PALETTE = np.array([
    [135, 206, 235],  # sky
    [90, 90, 90],     # ground
    [40, 40, 40],     # drivable
    [180, 100, 60],   # building
    [240, 220, 40],   # node marker
], dtype=np.uint8)


@dataclass(frozen=True)
class Camera:
    yaw: float                    # radians about ego z; 0 = forward
    position: tuple[float, float, float] = (0.0, 0.0, DEFAULT_CAMERA_HEIGHT)
    fx: float = 0.0
    fy: float = 0.0
    cx: float = (IMAGE_WIDTH - 1) / 2.0
    cy: float = (IMAGE_HEIGHT - 1) / 2.0
    width: int = IMAGE_WIDTH
    height: int = IMAGE_HEIGHT

    def rotation_ego_from_cam(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x_cam = np.array([s, -c, 0.0])   # image right
        y_cam = np.array([0.0, 0.0, -1.0])  # image down
        z_cam = np.array([c, s, 0.0])    # optical axis
        return np.stack([x_cam, y_cam, z_cam], axis=1)


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        if not self.cameras:
            raise ValueError("rig needs at least one camera")
        sizes = {(c.width, c.height) for c in self.cameras}
        if len(sizes) != 1:
            raise ValueError("all cameras must share one image size")

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def image_size(self) -> tuple[int, int]:
        cam = self.cameras[0]
        return cam.height, cam.width

    def to_json_dict(self) -> dict:
        return {"cameras": [{
            "yaw": c.yaw, "position": list(c.position),
            "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "width": c.width, "height": c.height,
        } for c in self.cameras]}

    @staticmethod
    def from_json_dict(d: dict) -> "CameraRig":
        return CameraRig(tuple(
            Camera(c["yaw"], tuple(c["position"]), c["fx"], c["fy"],
                   c["cx"], c["cy"], c["width"], c["height"])
            for c in d["cameras"]))


def default_rig(num_cameras: int = 6, hfov_deg: float = DEFAULT_HFOV_DEG,
                height: float = DEFAULT_CAMERA_HEIGHT) -> CameraRig:
    """Surround rig at yaws {0, +-60, +-120, 180} deg; 1 camera = front only."""
    if num_cameras == 6:
        yaws = [0.0, 60.0, 120.0, 180.0, 240.0, 300.0]
    elif num_cameras == 1:
        yaws = [0.0]
    else:
        yaws = [360.0 * k / num_cameras for k in range(num_cameras)]
    fx = (IMAGE_WIDTH / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    cams = tuple(Camera(yaw=math.radians(y), position=(0.0, 0.0, height), fx=fx, fy=fx)
                 for y in yaws)
    return CameraRig(cams)


def _convex_ccw(poly: np.ndarray) -> np.ndarray:
    """CCW convex footprint; non-convex polygons fall back to their hull."""
    pts = poly
    area2 = np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
    if area2 < 0:
        pts = pts[::-1]
    # gift-wrap only if needed
    edges = np.roll(pts, -1, axis=0) - pts
    cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
    if np.all(cross >= -1e-12):
        return pts
    hull = []
    remaining = pts.tolist()
    start = min(remaining)
    cur = start
    while True:
        hull.append(cur)
        cand = remaining[0] if remaining[0] != cur else remaining[-1]
        for p in remaining:
            if p == cur:
                continue
            c = ((cand[0] - cur[0]) * (p[1] - cur[1]) - (cand[1] - cur[1]) * (p[0] - cur[0]))
            if c > 0:
                cand = p
        cur = cand
        if cur == start:
            break
    return np.asarray(hull)


def _ray_prism(origin: np.ndarray, dirs: np.ndarray, poly: np.ndarray, height: float):
    """Entry depth of rays into a convex extruded polygon, inf when missed."""
    t0 = np.full(dirs.shape[0], 1e-6)
    t1 = np.full(dirs.shape[0], np.inf)
    # z slabs [0, height]
    dz = dirs[:, 2]
    oz = origin[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (0.0 - oz) / dz
        tb = (height - oz) / dz
    lo, hi = np.minimum(ta, tb), np.maximum(ta, tb)
    parallel = dz == 0
    inside_z = (0.0 <= oz) & (oz <= height)
    t0 = np.where(parallel, np.where(inside_z, t0, np.inf), np.maximum(t0, lo))
    t1 = np.where(parallel, np.where(inside_z, t1, -np.inf), np.minimum(t1, hi))

    n = len(poly)
    for i in range(n):
        a = poly[i]
        b = poly[(i + 1) % n]
        e = b - a
        nx, ny = -e[1], e[0]  # inward for CCW
        denom = dirs[:, 0] * nx + dirs[:, 1] * ny
        num = (a[0] - origin[0]) * nx + (a[1] - origin[1]) * ny
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        inside = -num <= 0
        t0 = np.where(denom > 0, np.maximum(t0, t), t0)
        t1 = np.where(denom < 0, np.minimum(t1, t), t1)
        t1 = np.where((denom == 0) & ~inside, -np.inf, t1)
    hit = t0 <= t1
    return np.where(hit, t0, np.inf)


def _ray_cylinder(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray,
                  radius: float, height: float):
    ox, oy = origin[0] - center[0], origin[1] - center[1]
    dx, dy = dirs[:, 0], dirs[:, 1]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = np.where(ok, (-b - sq) / (2 * a), np.inf)
    z = origin[2] + t * dirs[:, 2]
    valid = ok & (t > 1e-6) & (z >= 0.0) & (z <= height)
    return np.where(valid, t, np.inf)


def _drivable_mask(points: np.ndarray, vmap: VectorMap, default_width: float) -> np.ndarray:
    mask = np.zeros(points.shape[0], dtype=bool)
    for i, lane in enumerate(vmap.lanes):
        width = vmap.lane_widths[i] if vmap.lane_widths is not None else default_width
        half = width / 2.0
        for a, b in zip(lane[:-1], lane[1:]):
            ab = b - a
            denom = float(ab @ ab)
            rel = points - a
            if denom == 0:
                d2 = (rel ** 2).sum(axis=1)
            else:
                t = np.clip((rel @ ab) / denom, 0.0, 1.0)
                proj = a + t[:, None] * ab
                d2 = ((points - proj) ** 2).sum(axis=1)
            mask |= d2 <= half * half
    return mask


def render_views(vmap: VectorMap, pose: PoseOffset, rig: CameraRig,
                 lane_width: float = 3.0, return_ids: bool = False) -> np.ndarray:
    """Ray-cast semantic views; returns (num_cams, 3, H, W) uint8 RGB.

    With return_ids=True returns the (num_cams, H, W) class-id maps
    instead (classes per the module constants).
    """
    h, w = rig.image_size
    ids = np.zeros((len(rig), h, w), dtype=np.uint8)

    c, s = math.cos(pose.dtheta), math.sin(pose.dtheta)
    r_world_ego = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    near = [b for b in vmap.buildings
            if np.min(np.hypot(b.polygon[:, 0] - pose.dx, b.polygon[:, 1] - pose.dy))
            <= MAX_RENDER_RANGE]
    hulls = [(_convex_ccw(b.polygon), b.height) for b in near]
    near_nodes = [n for n in vmap.nodes
                  if math.hypot(n.x - pose.dx, n.y - pose.dy) <= MAX_RENDER_RANGE]

    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    for k, cam in enumerate(rig.cameras):
        d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy,
                          np.ones_like(u)], axis=-1).reshape(-1, 3)
        d_world = d_cam @ (r_world_ego @ cam.rotation_ego_from_cam()).T
        offset = r_world_ego @ np.array([cam.position[0], cam.position[1], 0.0])
        origin = np.array([pose.dx + offset[0], pose.dy + offset[1], cam.position[2]])

        dz = d_world[:, 2]
        with np.errstate(divide="ignore"):
            t_ground = np.where(dz < 0, -origin[2] / dz, np.inf)
        norms = np.linalg.norm(d_world, axis=1)
        t_ground = np.where(t_ground * norms <= MAX_RENDER_RANGE, t_ground, np.inf)

        t_best = t_ground.copy()
        cls = np.where(np.isfinite(t_ground), CLASS_GROUND, CLASS_SKY).astype(np.uint8)

        ground_pts = origin[None, :2] + t_ground[:, None] * d_world[:, :2]
        finite = np.isfinite(t_ground)
        if finite.any():
            drv = np.zeros_like(finite)
            drv[finite] = _drivable_mask(ground_pts[finite], vmap, lane_width)
            cls = np.where(drv & (cls == CLASS_GROUND), CLASS_DRIVABLE, cls)

        for poly, height in hulls:
            t = _ray_prism(origin, d_world, poly, height)
            t = np.where(t * norms <= MAX_RENDER_RANGE, t, np.inf)
            closer = t < t_best
            cls = np.where(closer, CLASS_BUILDING, cls)
            t_best = np.minimum(t_best, t)
        for node in near_nodes:
            t = _ray_cylinder(origin, d_world, node.xy, NODE_MARKER_RADIUS, NODE_MARKER_HEIGHT)
            closer = t < t_best
            cls = np.where(closer, CLASS_NODE, cls)
            t_best = np.minimum(t_best, t)

        ids[k] = cls.reshape(h, w)

    if return_ids:
        return ids
    rgb = PALETTE[ids]                      # (N, H, W, 3)
    return np.transpose(rgb, (0, 3, 1, 2))  # (N, 3, H, W)

"""Dataset generation, on-disk layout, loading, and exact regeneration.

Layout under a dataset root:

    index.json                      everything needed to regenerate
    samples/<id>/
        oracle_bev.npy              (oracle mode) uint8 planes 3x256x128
        cam_<k>.png                 (camera mode) RGB semantic renderings
        map_patch.png / .json       noisy-frame map raster + sidecar
        labels.png / .json          ego-frame labels at the true pose
        map_labels.png / .json      map-frame labels at the true pose
        meta.json                   poses, offset, seeds, flags

Every sample derives from one integer seed recorded in index.json, so a
dataset regenerates byte-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraRig, default_rig, render_views
from .raster import (
    DEFAULT_LANE_WIDTH,
    DEFAULT_NODE_RADIUS,
    NoiseSpec,
    RasterMap,
    extract_patch,
    perturb_pose,
    segmentation_labels,
)
from .se2 import BEV_SPEC, MAP_SPEC, PoseOffset
from .synthworld import WorldSpec, generate_world, sample_ego_pose
from .vectormap import VectorMap

MODES = ("oracle", "camera")
# total road length required per requested sample before generation refuses
_MIN_ROAD_M_PER_SAMPLE = 0.5


@dataclass(frozen=True)
class DegradationSpec:
    """Seeded corruption of oracle BEV observations."""

    occlusion_sectors: int = 0
    occlusion_deg: float = 0.0
    dropout_p: float = 0.0
    max_range: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")
        if self.occlusion_sectors < 0 or self.occlusion_deg < 0:
            raise ValueError("occlusion must be non-negative")

    def is_noop(self) -> bool:
        return (self.occlusion_sectors == 0 or self.occlusion_deg == 0.0) \
            and self.dropout_p == 0.0 and self.max_range is None

    def to_json_dict(self) -> dict:
        return {"occlusion_sectors": self.occlusion_sectors,
                "occlusion_deg": self.occlusion_deg,
                "dropout_p": self.dropout_p,
                "max_range": self.max_range,
                "rng_seed": self.rng_seed}

    @staticmethod
    def from_json_dict(d: dict) -> "DegradationSpec":
        return DegradationSpec(**d)


def oracle_bev(vmap: VectorMap, pose: PoseOffset,
               degradation: DegradationSpec | None = None,
               lane_width: float = DEFAULT_LANE_WIDTH,
               node_radius: float = DEFAULT_NODE_RADIUS) -> np.ndarray:
    """Ego-frame semantic raster on the BEV grid, optionally degraded.

    Without degradation this equals segmentation_labels at the same pose.
    """
    planes = segmentation_labels(vmap, pose, BEV_SPEC, lane_width, node_radius).copy()
    if degradation is None or degradation.is_noop():
        return planes

    rng = np.random.default_rng(degradation.rng_seed)
    x, y = BEV_SPEC.pixel_center_coords()
    if degradation.occlusion_sectors > 0 and degradation.occlusion_deg > 0:
        angle = np.arctan2(y, x)
        width = math.radians(degradation.occlusion_deg)
        for _ in range(degradation.occlusion_sectors):
            start = rng.uniform(-np.pi, np.pi)
            rel = np.mod(angle - start, 2 * np.pi)
            planes[:, rel < width] = 0
    if degradation.max_range is not None:
        planes[:, x * x + y * y > degradation.max_range ** 2] = 0
    if degradation.dropout_p > 0:
        keep = rng.uniform(size=planes.shape) >= degradation.dropout_p
        planes &= keep.astype(np.uint8)
    return planes


def _sample_seeds(master_seed: int, count: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count)]


def _sub_seeds(sample_seed: int) -> tuple[int, int, int]:
    pose_seed, noise_seed, degr_seed = np.random.SeedSequence(sample_seed).generate_state(3)
    return int(pose_seed), int(noise_seed), int(degr_seed)


@dataclass
class Sample:
    """One training/eval record."""

    oracle_bev: np.ndarray | None
    images: np.ndarray | None
    map_patch: RasterMap
    gt_offset: PoseOffset
    seg_labels: np.ndarray
    map_labels: np.ndarray
    meta: dict

    def __post_init__(self):
        if (self.oracle_bev is None) == (self.images is None):
            raise ValueError("exactly one of oracle_bev / images must be present")


def generate_sample(vmap: VectorMap, sample_seed: int, noise: NoiseSpec, mode: str,
                    rig: CameraRig | None = None,
                    degradation: DegradationSpec | None = None,
                    lane_width: float = DEFAULT_LANE_WIDTH,
                    node_radius: float = DEFAULT_NODE_RADIUS) -> Sample:
    """Pure function of (world, seed, specs); the unit of regeneration."""
    pose_seed, noise_seed, degr_seed = _sub_seeds(sample_seed)
    gt_pose = sample_ego_pose(vmap, np.random.default_rng(pose_seed))
    noisy_pose, xi1 = perturb_pose(
        gt_pose, NoiseSpec(noise.max_translation, noise.max_rotation, noise_seed))

    patch = extract_patch(vmap, noisy_pose, lane_width, node_radius)
    map_labels = segmentation_labels(vmap, gt_pose, MAP_SPEC, lane_width, node_radius)
    seg_labels = map_labels[:, :, 64:192]  # BEV grid is the central width crop

    obs = images = None
    if mode == "oracle":
        degr = None
        if degradation is not None:
            degr = DegradationSpec(degradation.occlusion_sectors, degradation.occlusion_deg,
                                   degradation.dropout_p, degradation.max_range, degr_seed)
        obs = oracle_bev(vmap, gt_pose, degr, lane_width, node_radius)
    elif mode == "camera":
        images = render_views(vmap, gt_pose, rig, lane_width)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    meta = {
        "seed": sample_seed,
        "mode": mode,
        "gt_pose": gt_pose.to_json_dict(),
        "noisy_pose": noisy_pose.to_json_dict(),
        "gt_offset": xi1.to_json_dict(),
        "inside_building": bool(vmap.building_at(gt_pose.dx, gt_pose.dy)),
    }
    return Sample(obs, images, patch, xi1, seg_labels, map_labels, meta)


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")


def _write_sample(sample_dir: Path, sample: Sample):
    sample_dir.mkdir(parents=True, exist_ok=True)
    if sample.oracle_bev is not None:
        np.save(sample_dir / "oracle_bev.npy", sample.oracle_bev)
    else:
        for k in range(sample.images.shape[0]):
            img = np.transpose(sample.images[k], (1, 2, 0))
            Image.fromarray(img, mode="RGB").save(sample_dir / f"cam_{k}.png", optimize=False)
    sample.map_patch.save(sample_dir / "map_patch")
    RasterMap(sample.seg_labels, BEV_SPEC,
              PoseOffset.from_json_dict(sample.meta["gt_pose"])).save(sample_dir / "labels")
    RasterMap(sample.map_labels, MAP_SPEC,
              PoseOffset.from_json_dict(sample.meta["gt_pose"])).save(sample_dir / "map_labels")
    _write_json(sample_dir / "meta.json", sample.meta)


def build_dataset(world: WorldSpec, noise: NoiseSpec, count: int, mode: str,
                  out_dir, rig: CameraRig | None = None,
                  degradation: DegradationSpec | None = None,
                  lane_width: float = DEFAULT_LANE_WIDTH,
                  node_radius: float = DEFAULT_NODE_RADIUS) -> Path:
    """Generate `count` samples with on-road ego poses; returns the root."""
    if count <= 0:
        raise ValueError("count must be positive")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "camera" and rig is None:
        rig = default_rig()

    vmap = generate_world(world)
    total_road = sum(float(np.linalg.norm(np.diff(l, axis=0), axis=1).sum())
                     for l in vmap.lanes)
    if total_road < _MIN_ROAD_M_PER_SAMPLE * count:
        raise ValueError(
            f"insufficient road length ({total_road:.1f} m) for {count} samples; "
            f"need at least {_MIN_ROAD_M_PER_SAMPLE * count:.1f} m")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _sample_seeds(noise.rng_seed, count)
    index = {
        "version": 1,
        "mode": mode,
        "count": count,
        "world": world.to_json_dict(),
        "noise": noise.to_json_dict(),
        "degradation": None if degradation is None else degradation.to_json_dict(),
        "rig": None if rig is None else rig.to_json_dict(),
        "render": {"lane_width": lane_width, "node_radius": node_radius},
        "sample_seeds": seeds,
    }
    _write_json(out / "index.json", index)

    for i, seed in enumerate(seeds):
        sample = generate_sample(vmap, seed, noise, mode, rig, degradation,
                                 lane_width, node_radius)
        _write_sample(out / "samples" / f"{i:05d}", sample)
    return out


def regenerate_dataset(index_path, out_dir) -> Path:
    """Rebuild a dataset byte-identically from its index file."""
    index = json.loads(Path(index_path).read_text())
    world = WorldSpec.from_json_dict(index["world"])
    noise = NoiseSpec.from_json_dict(index["noise"])
    degradation = (None if index["degradation"] is None
                   else DegradationSpec.from_json_dict(index["degradation"]))
    rig = None if index["rig"] is None else CameraRig.from_json_dict(index["rig"])
    vmap = generate_world(world)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "index.json", index)
    for i, seed in enumerate(index["sample_seeds"]):
        sample = generate_sample(vmap, seed, noise, index["mode"], rig, degradation,
                                 index["render"]["lane_width"], index["render"]["node_radius"])
        _write_sample(out / "samples" / f"{i:05d}", sample)
    return out


def load_index(root) -> dict:
    return json.loads((Path(root) / "index.json").read_text())


def sample_dirs(root) -> list[Path]:
    return sorted((Path(root) / "samples").iterdir())


def load_sample(sample_dir) -> Sample:
    sample_dir = Path(sample_dir)
    meta = json.loads((sample_dir / "meta.json").read_text())
    obs = images = None
    if (sample_dir / "oracle_bev.npy").exists():
        obs = np.load(sample_dir / "oracle_bev.npy")
    else:
        cams = sorted(sample_dir.glob("cam_*.png"))
        images = np.stack([np.transpose(np.asarray(Image.open(p)), (2, 0, 1)) for p in cams])
    return Sample(
        oracle_bev=obs,
        images=images,
        map_patch=RasterMap.load(sample_dir / "map_patch"),
        gt_offset=PoseOffset.from_json_dict(meta["gt_offset"]),
        seg_labels=RasterMap.load(sample_dir / "labels").channels,
        map_labels=RasterMap.load(sample_dir / "map_labels").channels,
        meta=meta,
    )

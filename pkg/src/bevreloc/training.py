"""Losses, augmentation, and the training loop.

The objective is a weighted sum of four terms: smooth-L1 on the coarse
offset against the simulated error, smooth-L1 on the fine offset against
the residual left by the (detached) coarse prediction, and binary
cross-entropy on both auxiliary segmentation outputs.  Pose residuals
are normalized by the head's output scale so translation and rotation
are commensurate; the angle residual is wrapped before normalization.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .dataset import load_index, load_sample, sample_dirs
from .models.localizer import LocalizationModel, save_checkpoint
from .models.pose_ops import residual_target_t, wrap_angle_t

DEVICE_ENV_VAR = "BEVRELOC_DEVICE"


def default_device() -> str:
    return os.environ.get(DEVICE_ENV_VAR, "cpu")


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_f: float = 1.0
    lambda_bev: float = 1.0
    lambda_map: float = 1.0

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_f, self.lambda_bev, self.lambda_map) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-7
    seed: int = 0
    smooth_l1_beta: float = 1.0
    aug_flip: bool = True          # camera mode: mirror sample across ego x-axis
    aug_crop_resize: bool = True   # camera mode: per-batch zoom crop, intrinsics adjusted
    aug_camera_drop_p: float = 0.25  # camera mode: zero one random camera per sample
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.epochs <= 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, lr and batch_size must be positive")


def pose_loss(pred: torch.Tensor, target: torch.Tensor,
              output_scale=(30.0, 30.0, math.radians(30.0)),
              beta: float = 1.0) -> torch.Tensor:
    """Smooth-L1 over scale-normalized components, mean over components."""
    scale = torch.as_tensor(output_scale, dtype=pred.dtype, device=pred.device)
    resid = pred - target
    resid = torch.cat([resid[..., :2], wrap_angle_t(resid[..., 2:3])], dim=-1)
    return F.smooth_l1_loss(resid / scale, torch.zeros_like(resid), beta=beta)


def seg_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel per-channel binary cross-entropy on logits."""
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    return F.binary_cross_entropy_with_logits(logits, labels)


def total_loss(outputs: dict, batch: dict, weights: LossWeights,
               output_scale=(30.0, 30.0, math.radians(30.0)),
               beta: float = 1.0) -> tuple[torch.Tensor, dict]:
    """Weighted sum of the four loss terms plus a per-term breakdown.

    The fine target is the residual left by the coarse prediction, which
    enters as data (detached): letting gradients move the target would
    let the first stage cheat.
    """
    xi1 = batch["xi1"]
    loss_c = pose_loss(outputs["xi_c"], xi1, output_scale, beta)
    xi2 = residual_target_t(xi1, outputs["xi_c"].detach())
    loss_f = pose_loss(outputs["xi_f"], xi2, output_scale, beta)
    loss_bev = seg_loss(outputs["bev_seg"], batch["bev_labels"])
    loss_map = seg_loss(outputs["map_seg"], batch["map_labels"])
    total = (weights.lambda_c * loss_c + weights.lambda_f * loss_f
             + weights.lambda_bev * loss_bev + weights.lambda_map * loss_map)
    breakdown = {"loss": float(total.detach()), "loss_c": float(loss_c.detach()),
                 "loss_f": float(loss_f.detach()), "loss_bev": float(loss_bev.detach()),
                 "loss_map": float(loss_map.detach())}
    return total, breakdown


def _pack(planes: np.ndarray) -> tuple[np.ndarray, tuple]:
    return np.packbits(planes), planes.shape


def _unpack(packed: np.ndarray, shape: tuple) -> np.ndarray:
    return np.unpackbits(packed, count=int(np.prod(shape))).reshape(shape)


class ArrayDataset:
    """Binary rasters held packed in memory; batches come out as float32."""

    def __init__(self, records: list[dict], mode: str):
        self.records = records
        self.mode = mode

    @classmethod
    def from_directory(cls, root) -> "ArrayDataset":
        index = load_index(root)
        mode = index["mode"]
        records = []
        for d in sample_dirs(root):
            s = load_sample(d)
            rec = {
                "map_patch": _pack(s.map_patch.channels),
                "bev_labels": _pack(s.seg_labels),
                "map_labels": _pack(s.map_labels),
                "xi1": s.gt_offset.as_array().astype(np.float32),
            }
            if mode == "oracle":
                rec["oracle_bev"] = _pack(s.oracle_bev)
            else:
                rec["images"] = s.images  # uint8 RGB
            records.append(rec)
        return cls(records, mode)

    def __len__(self) -> int:
        return len(self.records)

    def get_batch(self, indices, device="cpu") -> dict:
        recs = [self.records[i] for i in indices]

        def stack_planes(key):
            arr = np.stack([_unpack(*r[key]) for r in recs]).astype(np.float32)
            return torch.from_numpy(arr).to(device)

        batch = {
            "map_patch": stack_planes("map_patch"),
            "bev_labels": stack_planes("bev_labels"),
            "map_labels": stack_planes("map_labels"),
            "xi1": torch.from_numpy(np.stack([r["xi1"] for r in recs])).to(device),
        }
        if self.mode == "oracle":
            batch["oracle_bev"] = stack_planes("oracle_bev")
        else:
            imgs = np.stack([r["images"] for r in recs]).astype(np.float32) / 255.0
            batch["images"] = torch.from_numpy(imgs).to(device)
        return batch


def _mirror_batch_entry(batch: dict, i: int, yaw_pairs: list[tuple[int, int]]):
    """Reflect one sample across the ego x-axis (a symmetric-rig flip aug)."""
    for key in ("map_patch", "bev_labels", "map_labels", "oracle_bev"):
        if key in batch:
            batch[key][i] = batch[key][i].flip(-1)
    if "images" in batch:
        flipped = batch["images"][i].flip(-1)
        batch["images"][i] = flipped[[b for _, b in yaw_pairs]]
    batch["xi1"][i, 1] = -batch["xi1"][i, 1]
    batch["xi1"][i, 2] = -batch["xi1"][i, 2]


def _yaw_mirror_pairs(rig) -> list[tuple[int, int]]:
    pairs = []
    yaws = [c.yaw for c in rig.cameras]
    for a, ya in enumerate(yaws):
        target = -ya
        b = min(range(len(yaws)),
                key=lambda k: abs(math.remainder(yaws[k] - target, 2 * math.pi)))
        pairs.append((a, b))
    return pairs


def apply_camera_augmentations(batch: dict, model: LocalizationModel,
                               config: TrainConfig, rng: np.random.Generator):
    """In-place flip / camera-drop augmentation for camera-mode batches."""
    if "images" not in batch:
        return
    n = batch["images"].shape[0]
    pairs = _yaw_mirror_pairs(model.rig)
    for i in range(n):
        if config.aug_flip and rng.uniform() < 0.5:
            _mirror_batch_entry(batch, i, pairs)
        if rng.uniform() < config.aug_camera_drop_p:
            cam = int(rng.integers(0, batch["images"].shape[1]))
            batch["images"][i, cam] = 0.0


def crop_resize_batch(images: torch.Tensor, rig, rng: np.random.Generator,
                      max_zoom: float = 1.15):
    """Per-batch zoom crop with intrinsics adjusted to keep geometry exact.

    Returns (resized images, adjusted rig).
    """
    from .camera import Camera, CameraRig

    b, n, c, h, w = images.shape
    s = float(rng.uniform(1.0, max_zoom))
    ch, cw = int(round(h / s)), int(round(w / s))
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    crop = images[:, :, :, oy:oy + ch, ox:ox + cw].reshape(b * n, c, ch, cw)
    resized = F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False)
    sx, sy = w / cw, h / ch
    cams = tuple(Camera(cam.yaw, cam.position, cam.fx * sx, cam.fy * sy,
                        (cam.cx - ox) * sx, (cam.cy - oy) * sy, cam.width, cam.height)
                 for cam in rig.cameras)
    return resized.reshape(b, n, c, h, w), CameraRig(cams)


def train(config: TrainConfig, dataset: ArrayDataset, model: LocalizationModel,
          weights: LossWeights | None = None, out_dir="runs/train",
          device: str | None = None) -> Path:
    """Optimize the model; writes per-step JSONL metrics and epoch checkpoints."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    weights = LossWeights() if weights is None else weights
    device = default_device() if device is None else device
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(config.seed)
    model.to(device).train()
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr,
                            weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps, eta_min=0.0)
    scale = model.localizer.stage_coarse.head.scale.tolist()

    log_path = out / "train_log.jsonl"
    step = 0
    with log_path.open("w") as log:
        for epoch in range(config.epochs):
            order = torch.randperm(
                len(dataset), generator=torch.Generator().manual_seed(config.seed + epoch))
            aug_rng = np.random.default_rng((config.seed, epoch))
            for start in range(0, len(dataset), config.batch_size):
                idx = order[start:start + config.batch_size].tolist()
                batch = dataset.get_batch(idx, device)
                if dataset.mode == "camera":
                    apply_camera_augmentations(batch, model, config, aug_rng)
                    rig = model.rig
                    if config.aug_crop_resize:
                        batch["images"], rig = crop_resize_batch(
                            batch["images"], model.rig, aug_rng)
                    feats, depths = model.image_encoder(batch["images"])
                    from .models.bev import lift_splat
                    raw = lift_splat(feats, depths, rig, model.config.bev_spec,
                                     model.config.depth_bins)
                    bev_pyr, bev_seg = model.bev_decoder(raw, model.config.bev_spec)
                    map_pyr, map_seg = model.map_unet(batch["map_patch"],
                                                      model.config.map_spec)
                    outputs = model.localizer.localize(bev_pyr, map_pyr)
                    outputs.update({"bev_seg": bev_seg, "map_seg": map_seg})
                else:
                    outputs = model(batch)

                loss, breakdown = total_loss(outputs, batch, weights, scale,
                                             config.smooth_l1_beta)
                if not torch.isfinite(loss):
                    dump = out / "nan_dump.pt"
                    torch.save({"batch": {k: v.cpu() for k, v in batch.items()},
                                "breakdown": breakdown, "step": step}, dump)
                    raise RuntimeError(
                        f"non-finite loss at step {step}; offending batch "
                        f"dumped to {dump}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()

                breakdown.update({"step": step, "epoch": epoch,
                                  "lr": sched.get_last_lr()[0],
                                  "time": time.time()})
                log.write(json.dumps(breakdown, sort_keys=True) + "\n")
                step += 1

            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                save_checkpoint(model, out / f"ckpt_epoch_{epoch:03d}.pt",
                                extra={"epoch": epoch, "step": step,
                                       "train_config": asdict(config),
                                       "loss_weights": asdict(weights)})

    last = save_checkpoint(model, out / "last.pt",
                           extra={"epoch": config.epochs - 1, "step": step,
                                  "train_config": asdict(config),
                                  "loss_weights": asdict(weights)})
    return last

"""Full localization model: observation branch + map branch + registration.

In camera mode the observation branch is the image encoder followed by
the depth-weighted splat; in oracle mode a 1x1 stem lifts the 3-plane
semantic BEV into the decoder's input width.  Checkpoints are single
archives holding the named parameters plus a JSON config echo under a
versioned schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from ..camera import CameraRig, default_rig
from ..se2 import BEV_SPEC, MAP_SPEC, GridSpec
from .bev import BevDecoder, DepthBins, ImageEncoder, lift_splat
from .mapnet import MapUNet
from .registration import NeuralLocalizer, RegistrationConfig

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "oracle"
    bev_spec: GridSpec = field(default=BEV_SPEC)
    map_spec: GridSpec = field(default=MAP_SPEC)
    d_coarse: int = 64
    d_fine: int = 16
    bev_width: int = 16
    map_width: int = 16
    raw_channels: int = 32
    d_img: int = 64
    img_width: int = 16
    n_cameras: int = 6
    n_classes: int = 3
    depth_bins: DepthBins = field(default=DepthBins())

    def __post_init__(self):
        if self.mode not in ("oracle", "camera"):
            raise ValueError("mode must be 'oracle' or 'camera'")
        if self.d_coarse <= self.d_fine:
            raise ValueError("d_coarse must exceed d_fine")

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "bev_spec": self.bev_spec.to_json_dict(),
            "map_spec": self.map_spec.to_json_dict(),
            "d_coarse": self.d_coarse,
            "d_fine": self.d_fine,
            "bev_width": self.bev_width,
            "map_width": self.map_width,
            "raw_channels": self.raw_channels,
            "d_img": self.d_img,
            "img_width": self.img_width,
            "n_cameras": self.n_cameras,
            "n_classes": self.n_classes,
            "depth_bins": {"d_min": self.depth_bins.d_min,
                           "d_max": self.depth_bins.d_max,
                           "step": self.depth_bins.step},
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["bev_spec"] = GridSpec.from_json_dict(d["bev_spec"])
        d["map_spec"] = GridSpec.from_json_dict(d["map_spec"])
        d["depth_bins"] = DepthBins(**d["depth_bins"])
        return ModelConfig(**d)


class LocalizationModel(nn.Module):
    def __init__(self, config: ModelConfig, reg: RegistrationConfig,
                 rig: CameraRig | None = None):
        super().__init__()
        self.config = config
        self.reg_config = reg

        if config.mode == "camera":
            self.rig = rig if rig is not None else default_rig(config.n_cameras)
            self.image_encoder = ImageEncoder(self.rig, config.depth_bins,
                                              config.d_img, config.img_width)
            decoder_in = config.d_img
            self.oracle_stem = None
        else:
            self.rig = None
            self.image_encoder = None
            self.oracle_stem = nn.Conv2d(config.n_classes, config.raw_channels, 1)
            decoder_in = config.raw_channels

        self.bev_decoder = BevDecoder(decoder_in, config.d_coarse, config.d_fine,
                                      config.bev_width, config.n_classes)
        self.map_unet = MapUNet(config.n_classes, config.d_coarse, config.d_fine,
                                config.map_width, config.n_classes)
        self.localizer = NeuralLocalizer(reg, config.d_coarse, config.d_fine,
                                         config.bev_spec)

    def encode_observation(self, batch: dict) -> torch.Tensor:
        """Raw BEV grid from either camera images or the oracle BEV."""
        if self.config.mode == "camera":
            feats, depths = self.image_encoder(batch["images"])
            return lift_splat(feats, depths, self.rig, self.config.bev_spec,
                              self.config.depth_bins)
        return self.oracle_stem(batch["oracle_bev"])

    def forward(self, batch: dict) -> dict:
        raw = self.encode_observation(batch)
        bev_pyr, bev_seg = self.bev_decoder(raw, self.config.bev_spec)
        map_pyr, map_seg = self.map_unet(batch["map_patch"], self.config.map_spec)
        out = self.localizer.localize(bev_pyr, map_pyr)
        out.update({"bev_seg": bev_seg, "map_seg": map_seg,
                    "bev_pyramid": bev_pyr, "map_pyramid": map_pyr})
        return out

    def parameter_groups(self) -> dict[str, list]:
        """Named top-level groups, used by gradient-connectivity checks."""
        groups = {
            "observation": list((self.image_encoder or self.oracle_stem).parameters()),
            "bev_decoder": list(self.bev_decoder.parameters()),
            "map_unet": list(self.map_unet.parameters()),
            "stage_coarse": list(self.localizer.stage_coarse.parameters()),
        }
        if self.localizer.stage_fine is not None:
            groups["stage_fine"] = list(self.localizer.stage_fine.parameters())
        return groups


def save_checkpoint(model: LocalizationModel, path, extra: dict | None = None) -> Path:
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_config": json.dumps(model.config.to_json_dict(), sort_keys=True),
        "registration_config": json.dumps(model.reg_config.to_json_dict(), sort_keys=True),
        "rig": None if model.rig is None else json.dumps(model.rig.to_json_dict(),
                                                         sort_keys=True),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[LocalizationModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema_version')!r}")
    config = ModelConfig.from_json_dict(json.loads(payload["model_config"]))
    reg = RegistrationConfig.from_json_dict(json.loads(payload["registration_config"]))
    rig = None if payload["rig"] is None else CameraRig.from_json_dict(json.loads(payload["rig"]))
    model = LocalizationModel(config, reg, rig)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload

"""Flat key=value run configuration.

One `key = value` assignment per line, `#` comments.  Documented keys:

    data.root, data.val_root, data.mode
    model.d_coarse, model.d_fine, model.bev_width, model.map_width,
    model.raw_channels, model.d_img, model.img_width, model.n_cameras
    registration.variant, registration.n_layers, registration.n_heads,
    registration.token_dim, registration.downsample_factor,
    registration.head_hidden, registration.output_scale   (m, m, degrees)
    train.epochs, train.batch_size, train.lr, train.weight_decay,
    train.seed, train.smooth_l1_beta, train.aug_flip,
    train.aug_crop_resize, train.aug_camera_drop_p, train.checkpoint_every
    loss.lambda_c, loss.lambda_f, loss.lambda_bev, loss.lambda_map

Unknown keys are rejected so typos fail loudly (a usage error, exit 2).
"""

from __future__ import annotations

import math
from pathlib import Path

from .models.localizer import ModelConfig
from .models.registration import RegistrationConfig
from .training import LossWeights, TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration input; maps to exit code 2."""


_KNOWN_KEYS = {
    "data.root", "data.val_root", "data.mode",
    "model.d_coarse", "model.d_fine", "model.bev_width", "model.map_width",
    "model.raw_channels", "model.d_img", "model.img_width", "model.n_cameras",
    "registration.variant", "registration.n_layers", "registration.n_heads",
    "registration.token_dim", "registration.downsample_factor",
    "registration.head_hidden", "registration.output_scale",
    "train.epochs", "train.batch_size", "train.lr", "train.weight_decay",
    "train.seed", "train.smooth_l1_beta", "train.aug_flip",
    "train.aug_crop_resize", "train.aug_camera_drop_p", "train.checkpoint_every",
    "loss.lambda_c", "loss.lambda_f", "loss.lambda_bev", "loss.lambda_map",
}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def _get(cfg: dict, key: str, default, cast):
    if key not in cfg:
        return default
    raw = cfg[key]
    try:
        if cast is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return cast(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def _int_tuple(raw: str) -> tuple:
    return tuple(int(v.strip()) for v in raw.split(","))


def model_config_from(cfg: dict[str, str], mode: str) -> ModelConfig:
    return ModelConfig(
        mode=mode,
        d_coarse=_get(cfg, "model.d_coarse", 64, int),
        d_fine=_get(cfg, "model.d_fine", 16, int),
        bev_width=_get(cfg, "model.bev_width", 16, int),
        map_width=_get(cfg, "model.map_width", 16, int),
        raw_channels=_get(cfg, "model.raw_channels", 32, int),
        d_img=_get(cfg, "model.d_img", 64, int),
        img_width=_get(cfg, "model.img_width", 16, int),
        n_cameras=_get(cfg, "model.n_cameras", 6, int),
    )


def registration_config_from(cfg: dict[str, str]) -> RegistrationConfig:
    scale_raw = cfg.get("registration.output_scale")
    if scale_raw is None:
        scale = (30.0, 30.0, math.radians(30.0))
    else:
        parts = [float(v) for v in scale_raw.split(",")]
        if len(parts) != 3:
            raise ConfigError("registration.output_scale needs 'dx_m,dy_m,dtheta_deg'")
        scale = (parts[0], parts[1], math.radians(parts[2]))
    return RegistrationConfig(
        n_layers=_get(cfg, "registration.n_layers", 3, int),
        n_heads=_get(cfg, "registration.n_heads", 4, int),
        token_dim=_get(cfg, "registration.token_dim", 64, int),
        downsample_factor=_get(cfg, "registration.downsample_factor", 4, int),
        head_hidden_dims=_get(cfg, "registration.head_hidden", (128, 64), _int_tuple),
        variant=_get(cfg, "registration.variant", "coarse_to_fine", str),
        output_scale=scale,
    )


def train_config_from(cfg: dict[str, str]) -> TrainConfig:
    return TrainConfig(
        epochs=_get(cfg, "train.epochs", 30, int),
        batch_size=_get(cfg, "train.batch_size", 8, int),
        lr=_get(cfg, "train.lr", 1e-4, float),
        weight_decay=_get(cfg, "train.weight_decay", 1e-7, float),
        seed=_get(cfg, "train.seed", 0, int),
        smooth_l1_beta=_get(cfg, "train.smooth_l1_beta", 1.0, float),
        aug_flip=_get(cfg, "train.aug_flip", True, bool),
        aug_crop_resize=_get(cfg, "train.aug_crop_resize", True, bool),
        aug_camera_drop_p=_get(cfg, "train.aug_camera_drop_p", 0.25, float),
        checkpoint_every=_get(cfg, "train.checkpoint_every", 1, int),
    )


def loss_weights_from(cfg: dict[str, str]) -> LossWeights:
    return LossWeights(
        lambda_c=_get(cfg, "loss.lambda_c", 1.0, float),
        lambda_f=_get(cfg, "loss.lambda_f", 1.0, float),
        lambda_bev=_get(cfg, "loss.lambda_bev", 1.0, float),
        lambda_map=_get(cfg, "loss.lambda_map", 1.0, float),
    )

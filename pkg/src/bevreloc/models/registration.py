"""Neural localization: fuse BEV/map features, register coarse-to-fine.

Both stages share one architecture (never parameters): zero-pad the BEV
features to the map width, concatenate channels, reduce spatially by the
configured factor with stride-2 convolutions, fuse with a 7x7 kernel,
flatten row-major into tokens, add sinusoidal positional encodings whose
coordinate origin sits at the feature-map center, run the self-attention
read-out, and decode a bounded 3-DoF offset with a 3-layer MLP.  The
coarse estimate spatially warps the fine BEV features before the second
stage; stage outputs compose into the final prediction.

Variants: `one_stage` skips fine registration; `detr` decodes a single
learned pose query against the fused tokens; `cross_attention` uses BEV
tokens as queries against map tokens as keys/values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from ..se2 import GridSpec
from .pose_ops import compose_t
from .warp import warp_features

VARIANTS = ("coarse_to_fine", "one_stage", "detr", "cross_attention")


@dataclass(frozen=True)
class RegistrationConfig:
    n_layers: int = 3
    n_heads: int = 4
    token_dim: int = 64
    downsample_factor: int = 4
    head_hidden_dims: tuple[int, int] = (128, 64)
    variant: str = "coarse_to_fine"
    output_scale: tuple[float, float, float] = (30.0, 30.0, math.radians(30.0))

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ValueError("downsample_factor must be a power of two >= 2")
        if self.token_dim % 4 != 0:
            raise ValueError("token_dim must be divisible by 4")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if len(self.head_hidden_dims) != 2:
            raise ValueError("head is a 3-layer MLP: give its two hidden widths")

    def to_json_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "token_dim": self.token_dim,
            "downsample_factor": self.downsample_factor,
            "head_hidden_dims": list(self.head_hidden_dims),
            "variant": self.variant,
            "output_scale": list(self.output_scale),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "RegistrationConfig":
        d = dict(d)
        d["head_hidden_dims"] = tuple(d["head_hidden_dims"])
        d["output_scale"] = tuple(d["output_scale"])
        return RegistrationConfig(**d)


def center_origin_encoding(h: int, w: int, dim: int, device=None,
                           dtype=torch.float32) -> torch.Tensor:
    """(h*w, dim) sinusoidal encoding with coordinate origin at (h//2, w//2).

    Half the channels encode the row offset, half the column offset, each
    as interleaved sin/cos over a geometric frequency ladder.
    """
    half = dim // 2
    pos_r = torch.arange(h, device=device, dtype=dtype) - h // 2
    pos_c = torch.arange(w, device=device, dtype=dtype) - w // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, half, 2, device=device,
                                                       dtype=dtype) / half)

    def axis(pos):
        ang = pos[:, None] * freq[None, :]
        out = torch.zeros(len(pos), half, device=device, dtype=dtype)
        out[:, 0::2] = torch.sin(ang)
        out[:, 1::2] = torch.cos(ang)
        return out

    enc_r = axis(pos_r)[:, None, :].expand(h, w, half)
    enc_c = axis(pos_c)[None, :, :].expand(h, w, half)
    return torch.cat([enc_r, enc_c], dim=-1).reshape(h * w, dim)


class TokenReducer(nn.Module):
    """Channel squeeze, stride-2 reduction chain, 7x7 fusion, tokens + PE.

    The squeeze and reduction chain run at a small working width (a
    quarter of the token dim) so the heavy 7x7 fusion kernel, which maps
    into the token dim, only sees the reduced grid.
    """

    def __init__(self, c_in: int, token_dim: int, factor: int):
        super().__init__()
        self.factor = factor
        steps = int(math.log2(factor))
        w = max(8, token_dim // 4)

        def block(ci, co):
            return nn.Sequential(
                nn.Conv2d(ci, co, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(co),
                nn.GELU(),
            )

        self.reduce = nn.Sequential(
            block(c_in, w), *[block(w, w) for _ in range(steps - 1)])
        self.fuse = nn.Conv2d(w, token_dim, 7, padding=3)
        self._pe_cache: dict = {}

    def positional_encoding(self, h, w, device, dtype):
        key = (h, w, device, dtype)
        if key not in self._pe_cache:
            dim = self.fuse.out_channels
            self._pe_cache[key] = center_origin_encoding(h, w, dim, device, dtype)
        return self._pe_cache[key]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % self.factor or x.shape[-1] % self.factor:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible "
                             f"by factor {self.factor}")
        x = self.fuse(self.reduce(x))
        b, d, h, w = x.shape
        tokens = x.reshape(b, d, h * w).transpose(1, 2)  # row-major
        return tokens + self.positional_encoding(h, w, x.device, x.dtype)


def pad_bev_to_map_width(bev: torch.Tensor, map_w: int) -> torch.Tensor:
    pad = map_w - bev.shape[-1]
    return F.pad(bev, (pad // 2, pad - pad // 2))


class EncoderReadout(nn.Module):
    def __init__(self, cfg: RegistrationConfig):
        super().__init__()
        layer = nn.TransformerEncoderLayer(
            cfg.token_dim, cfg.n_heads, 4 * cfg.token_dim, activation="gelu",
            batch_first=True, norm_first=True, dropout=0.0)
        self.encoder = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.encoder(tokens).mean(dim=1)


class DetrReadout(nn.Module):
    """Single learned pose query decoded against the fused tokens."""

    def __init__(self, cfg: RegistrationConfig):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(1, 1, cfg.token_dim))
        nn.init.normal_(self.query, std=0.02)
        layer = nn.TransformerDecoderLayer(
            cfg.token_dim, cfg.n_heads, 4 * cfg.token_dim, activation="gelu",
            batch_first=True, norm_first=True, dropout=0.0)
        self.decoder = nn.TransformerDecoder(layer, cfg.n_layers)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        q = self.query.expand(tokens.shape[0], 1, -1)
        return self.decoder(q, tokens)[:, 0]


class CrossAttnReadout(nn.Module):
    """BEV tokens attend to map tokens; pre-norm attention + feed-forward."""

    def __init__(self, cfg: RegistrationConfig):
        super().__init__()
        d = cfg.token_dim
        self.blocks = nn.ModuleList()
        for _ in range(cfg.n_layers):
            self.blocks.append(nn.ModuleDict({
                "norm_q": nn.LayerNorm(d),
                "norm_kv": nn.LayerNorm(d),
                "attn": nn.MultiheadAttention(d, cfg.n_heads, batch_first=True, dropout=0.0),
                "norm_ff": nn.LayerNorm(d),
                "ff": nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(),
                                    nn.Linear(4 * d, d)),
            }))

    def forward(self, queries: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        x = queries
        for blk in self.blocks:
            att, _ = blk["attn"](blk["norm_q"](x), blk["norm_kv"](memory),
                                 blk["norm_kv"](memory), need_weights=False)
            x = x + att
            x = x + blk["ff"](blk["norm_ff"](x))
        return x.mean(dim=1)


class PoseHead(nn.Module):
    """3-layer MLP with a zero-initialized final layer and bounded output.

    tanh keeps raw outputs in (-1, 1); multiplying by output_scale maps
    them to metric units so predictions cannot exceed the simulated noise
    range, and zero init makes an untrained stage a no-op.
    """

    def __init__(self, cfg: RegistrationConfig):
        super().__init__()
        h1, h2 = cfg.head_hidden_dims
        self.mlp = nn.Sequential(
            nn.Linear(cfg.token_dim, h1), nn.GELU(),
            nn.Linear(h1, h2), nn.GELU(),
            nn.Linear(h2, 3),
        )
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)
        self.register_buffer("scale", torch.tensor(cfg.output_scale, dtype=torch.float32))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.mlp(x)) * self.scale


class RegistrationStage(nn.Module):
    """One registration pass: feature pair in, metric pose offset out."""

    def __init__(self, channels: int, cfg: RegistrationConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.variant == "cross_attention":
            self.bev_tokens = TokenReducer(channels, cfg.token_dim, cfg.downsample_factor)
            self.map_tokens = TokenReducer(channels, cfg.token_dim, cfg.downsample_factor)
            self.readout = CrossAttnReadout(cfg)
        else:
            self.fuser = TokenReducer(2 * channels, cfg.token_dim, cfg.downsample_factor)
            self.readout = DetrReadout(cfg) if cfg.variant == "detr" else EncoderReadout(cfg)
        self.head = PoseHead(cfg)

    def fuse(self, bev: torch.Tensor, map_: torch.Tensor) -> torch.Tensor:
        """Fused token sequence (the non-cross-attention path)."""
        self._check(bev, map_)
        return self.fuser(torch.cat([pad_bev_to_map_width(bev, map_.shape[-1]), map_], dim=1))

    @staticmethod
    def _check(bev: torch.Tensor, map_: torch.Tensor):
        ok = (bev.shape[-1] * 2 == map_.shape[-1]
              and bev.shape[-2] == map_.shape[-2]
              and bev.shape[1] == map_.shape[1])
        if not ok:
            raise ValueError(
                f"bev {tuple(bev.shape)} and map {tuple(map_.shape)} must share "
                "height and channels with map twice the bev width")

    def forward(self, bev: torch.Tensor, map_: torch.Tensor) -> torch.Tensor:
        if self.cfg.variant == "cross_attention":
            self._check(bev, map_)
            q = self.bev_tokens(pad_bev_to_map_width(bev, map_.shape[-1]))
            kv = self.map_tokens(map_)
            pooled = self.readout(q, kv)
        else:
            pooled = self.readout(self.fuse(bev, map_))
        return self.head(pooled)


class NeuralLocalizer(nn.Module):
    """Coarse stage, fine-feature warp, fine stage, cumulative output."""

    def __init__(self, cfg: RegistrationConfig, d_coarse: int, d_fine: int,
                 bev_spec: GridSpec):
        super().__init__()
        self.cfg = cfg
        self.bev_spec = bev_spec
        self.stage_coarse = RegistrationStage(d_coarse, cfg)
        self.stage_fine = None if cfg.variant == "one_stage" \
            else RegistrationStage(d_fine, cfg)

    def localize(self, bev_pyr, map_pyr) -> dict:
        xi_c = self.stage_coarse(bev_pyr.coarse, map_pyr.coarse)
        if self.stage_fine is None:
            xi_f = torch.zeros_like(xi_c)
            xi_total = xi_c
        else:
            warped = warp_features(bev_pyr.fine, xi_c, self.bev_spec)
            xi_f = self.stage_fine(warped, map_pyr.fine)
            xi_total = compose_t(xi_f, xi_c)
        return {"xi_c": xi_c, "xi_f": xi_f, "xi_total": xi_total}

    forward = localize

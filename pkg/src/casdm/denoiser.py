"""Noise-prediction U-Nets.

The image denoiser runs a condition-free encoder over the noisy image and
injects the one-hot segmentation map into every decoder block through
spatially-adaptive normalization. The map-generator denoiser shares the
layout but adds a projected text embedding to the timestep embedding of the
middle and decoder blocks instead.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from casdm.errors import ConfigError, ShapeError

COND_MODES = ("semantic_map", "text_embedding")


@dataclass
class DenoiserConfig:
    in_channels: int = 3
    base_width: int = 32
    num_levels: int = 3
    num_classes: int = 5
    time_embed_dim: int = 128
    cond_mode: str = "semantic_map"
    channel_mults: tuple[int, ...] | None = None
    text_dim: int = 0
    spade_hidden: int = 16
    groups: int = 8

    def __post_init__(self):
        if self.channel_mults is None:
            self.channel_mults = tuple(1 if k < 2 else 2 for k in range(self.num_levels))
        self.channel_mults = tuple(self.channel_mults)
        if self.cond_mode not in COND_MODES:
            raise ConfigError(f"cond_mode must be one of {COND_MODES}, got {self.cond_mode!r}")
        if self.num_levels < 2:
            raise ConfigError("num_levels must be >= 2")
        if self.base_width < 8:
            raise ConfigError("base_width must be >= 8")
        if len(self.channel_mults) != self.num_levels:
            raise ConfigError(f"need {self.num_levels} channel_mults, got {len(self.channel_mults)}")
        if self.cond_mode == "text_embedding" and self.text_dim <= 0:
            raise ConfigError("text_embedding mode needs text_dim > 0")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mults]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int, groups: int) -> int:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g


class SPADE(nn.Module):
    """Parameter-free group normalization modulated per pixel by the label map.

    The scale/shift convolutions start at zero, so a fresh layer is plain
    normalization.
    """

    def __init__(self, channels: int, label_channels: int, hidden: int = 32, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        self.groups = _groups(channels, groups)
        self.eps = eps
        self.shared = nn.Sequential(nn.Conv2d(label_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)
        for conv in (self.gamma, self.beta):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def modulation(self, segmap: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
        segmap = F.interpolate(segmap, size=size, mode="nearest")
        actv = self.shared(segmap)
        return self.gamma(actv), self.beta(actv)

    def forward(self, x: torch.Tensor, segmap: torch.Tensor) -> torch.Tensor:
        normalized = F.group_norm(x, self.groups, eps=self.eps)
        gamma, beta = self.modulation(segmap, x.shape[2:])
        return normalized * (1 + gamma) + beta


def spatially_adaptive_norm(layer: SPADE, features: torch.Tensor, one_hot_map: torch.Tensor) -> torch.Tensor:
    return layer(features, one_hot_map)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, label_channels: int = 0, hidden: int = 32, groups: int = 8):
        super().__init__()
        self.spade = label_channels > 0
        if self.spade:
            self.norm1 = SPADE(in_ch, label_channels, hidden, groups)
            self.norm2 = SPADE(out_ch, label_channels, hidden, groups)
        else:
            self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
            self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def _norm(self, norm, h, segmap):
        return norm(h, segmap) if self.spade else norm(h)

    def forward(self, x, emb, segmap=None):
        h = self.conv1(F.silu(self._norm(self.norm1, x, segmap)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self._norm(self.norm2, h, segmap)))
        return h + self.skip(x)


class UNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config
        widths = c.widths
        label_ch = c.num_classes if c.cond_mode == "semantic_map" else 0
        e = c.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.text_proj = nn.Linear(c.text_dim, e) if c.cond_mode == "text_embedding" else None

        self.conv_in = nn.Conv2d(c.in_channels, widths[0], 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = widths[0]
        for k, w in enumerate(widths):
            self.enc.append(ResBlock(prev, w, e, 0, c.spade_hidden, c.groups))
            prev = w
            if k < c.num_levels - 1:
                self.down.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid = ResBlock(prev, prev, e, label_ch, c.spade_hidden, c.groups)
        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for k in reversed(range(c.num_levels)):
            w = widths[k]
            self.dec.append(ResBlock(prev + w, w, e, label_ch, c.spade_hidden, c.groups))
            prev = w
            if k > 0:
                self.up.append(nn.Conv2d(w, w, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(prev, c.groups), prev)
        self.conv_out = nn.Conv2d(prev, c.in_channels, 3, padding=1)

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        f = 2 ** (self.config.num_levels - 1)
        if x.shape[2] % f or x.shape[3] % f:
            raise ShapeError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {f}")

    @staticmethod
    def _timesteps(t, x):
        t = torch.as_tensor(t)
        return t.expand(x.shape[0]) if t.ndim == 0 else t

    def _condition(self, condition, x):
        c = self.config
        if c.cond_mode == "semantic_map":
            if condition.ndim == 3 and not condition.is_floating_point():
                condition = F.one_hot(condition.long(), c.num_classes).permute(0, 3, 1, 2)
            if condition.ndim != 4 or condition.shape[1] != c.num_classes or condition.shape[2:] != x.shape[2:]:
                raise ConfigError(
                    f"semantic denoiser needs a (B, {c.num_classes}, H, W) one-hot map, got {tuple(condition.shape)}"
                )
            return condition.to(x.dtype)
        if condition.ndim != 2 or condition.shape[1] != c.text_dim:
            raise ConfigError(f"text denoiser needs a (B, {c.text_dim}) embedding, got {tuple(condition.shape)}")
        return condition.to(x.dtype)

    def _encode(self, x, temb):
        h = self.conv_in(x)
        skips = []
        for k, block in enumerate(self.enc):
            h = block(h, temb)
            skips.append(h)
            if k < len(self.down):
                h = self.down[k](h)
        return h, skips

    def encode_features(self, x_t: torch.Tensor, t) -> list[torch.Tensor]:
        """Outputs of every encoder level; level k has spatial size H / 2**k."""
        self._check_input(x_t)
        temb = self.time_mlp(timestep_embedding(self._timesteps(t, x_t), self.config.time_embed_dim).to(x_t.dtype))
        return self._encode(x_t, temb)[1]

    def forward(self, x_t: torch.Tensor, t, condition: torch.Tensor) -> torch.Tensor:
        self._check_input(x_t)
        cond = self._condition(condition, x_t)
        temb = self.time_mlp(timestep_embedding(self._timesteps(t, x_t), self.config.time_embed_dim).to(x_t.dtype))
        segmap = None
        emb = temb
        if self.text_proj is not None:
            emb = temb + self.text_proj(cond)
        else:
            segmap = cond
        _, skips = self._encode(x_t, temb)
        h = self.mid(skips[-1], emb, segmap)
        for i, block in enumerate(self.dec):
            h = block(torch.cat([h, skips[-1 - i]], dim=1), emb, segmap)
            if i < len(self.up):
                h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def predict_noise(params: UNet, x_t: torch.Tensor, t, condition: torch.Tensor) -> torch.Tensor:
    return params(x_t, t, condition)


def encode_features(params: UNet, x_t: torch.Tensor, t) -> list[torch.Tensor]:
    return params.encode_features(x_t, t)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)

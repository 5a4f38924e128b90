"""Classification heads and the assembled PAD networks.

Three variants share the truncated DenseNet trunk:

* ``baseline``: global average pool of the high tap, then a linear layer.
* ``pbs``: 1x1 conv on the high tap to a one-channel pixel map, then a
  linear layer over the flattened map.
* ``apbs``: spatial attention on all three taps (kernels 7/5/3), refined
  taps pooled to the high-tap size, concatenated, projected by a 1x1 conv
  to the pixel map, then the same linear layer.

Attention branches are side taps: the trunk itself is never modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LEVELS, BackboneConfig, build_backbone
from .errors import ConfigError, ShapeError

VARIANTS = ("baseline", "pbs", "apbs")
ATTENTION_KERNELS = {"low": 7, "mid": 5, "high": 3}


@dataclass
class ModelOutput:
    """Batched network output.

    ``pixel_map`` holds logits of shape (N, 1, h, w) and is ``None`` for the
    baseline. ``attention`` maps level tag to (N, 1, H, W) maps (apbs only).
    """

    binary_logit: torch.Tensor
    pa_score: torch.Tensor
    pixel_map: torch.Tensor | None = None
    attention: dict[str, torch.Tensor] | None = None

    def __len__(self):
        return self.binary_logit.shape[0]


class SpatialAttention(nn.Module):
    """Channel avg/max descriptors -> k x k conv -> sigmoid."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"attention kernel_size must be a positive odd integer, got {kernel_size}")
        self.kernel_size = kernel_size
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=True)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        avg = feature.mean(dim=1, keepdim=True)
        mx = feature.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


def spatial_attention(feature: torch.Tensor, kernel_size: int, module: SpatialAttention | None = None) -> torch.Tensor:
    """Attention map for ``feature`` (N, C, H, W) -> (N, 1, H, W) in (0, 1)."""
    module = module or SpatialAttention(kernel_size)
    if module.kernel_size != kernel_size:
        raise ConfigError(f"module kernel {module.kernel_size} != requested {kernel_size}")
    return module(feature)


def refine(feature: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Multiply every channel plane of ``feature`` by the attention map."""
    if attention.dim() == feature.dim() - 1:
        attention = attention.unsqueeze(-3)
    if attention.shape[-2:] != feature.shape[-2:]:
        raise ShapeError(
            f"attention spatial size {tuple(attention.shape[-2:])} != feature size {tuple(feature.shape[-2:])}"
        )
    if attention.shape[-3] != 1:
        raise ShapeError(f"attention must have a single channel, got {attention.shape[-3]}")
    return feature * attention


def pbs_map(high: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
    """One-channel logit map from the high tap via a 1x1 convolution."""
    if conv.kernel_size != (1, 1) or conv.out_channels != 1:
        raise ShapeError("pixel map projection must be a 1x1 conv with one output channel")
    if high.shape[-3] != conv.in_channels:
        raise ShapeError(f"high tap has {high.shape[-3]} channels, projection expects {conv.in_channels}")
    return conv(high)


class FuseProject(nn.Module):
    """Pool low/mid taps to the high-tap grid, concatenate, 1x1 conv to one channel."""

    def __init__(self, in_channels: tuple[int, int, int]):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.proj = nn.Conv2d(sum(in_channels), 1, kernel_size=1)

    def forward(self, low: torch.Tensor, mid: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
        size = high.shape[-2:]
        parts = []
        for f in (low, mid):
            if f.shape[-2] % size[0] or f.shape[-1] % size[1]:
                raise ShapeError(f"tap of size {tuple(f.shape[-2:])} is not a multiple of {tuple(size)}")
            k = (f.shape[-2] // size[0], f.shape[-1] // size[1])
            parts.append(F.avg_pool2d(f, kernel_size=k, stride=k) if k != (1, 1) else f)
        parts.append(high)
        return self.proj(torch.cat(parts, dim=1))


class MapClassifier(nn.Module):
    """Flatten a one-channel map and apply a single linear unit.

    The unit starts out as the map mean (weights 1/n, bias 0) so the binary
    and pixel-wise objectives push the map in the same direction from the
    first step.
    """

    def __init__(self, map_size: int):
        super().__init__()
        self.map_size = map_size
        self.fc = nn.Linear(map_size * map_size, 1)
        nn.init.constant_(self.fc.weight, 1.0 / (map_size * map_size))
        nn.init.zeros_(self.fc.bias)

    def forward(self, pixel_map: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if pixel_map.shape[-3:] != (1, self.map_size, self.map_size):
            raise ShapeError(
                f"expected map of shape (N, 1, {self.map_size}, {self.map_size}), got {tuple(pixel_map.shape)}"
            )
        logit = self.fc(pixel_map.flatten(1)).squeeze(1)
        return logit, torch.sigmoid(logit)


class PADNet(nn.Module):
    def __init__(self, variant: str = "apbs", backbone_config: BackboneConfig | None = None):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.backbone = build_backbone(backbone_config)
        cfg = self.backbone.config
        channels = self.backbone.tap_channels
        self.map_size = cfg.input_resolution // 16

        if variant == "baseline":
            self.fc = nn.Linear(channels[2], 1)
        elif variant == "pbs":
            self.map_conv = nn.Conv2d(channels[2], 1, kernel_size=1)
            self.classifier = MapClassifier(self.map_size)
        else:
            self.attention = nn.ModuleDict({lvl: SpatialAttention(ATTENTION_KERNELS[lvl]) for lvl in LEVELS})
            self.fuse = FuseProject(channels)
            self.classifier = MapClassifier(self.map_size)

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def forward(self, x: torch.Tensor) -> ModelOutput:
        low, mid, high = self.backbone(x)
        if self.variant == "baseline":
            logit = self.fc(F.adaptive_avg_pool2d(high, 1).flatten(1)).squeeze(1)
            return ModelOutput(binary_logit=logit, pa_score=torch.sigmoid(logit))
        if self.variant == "pbs":
            pixel_map = pbs_map(high, self.map_conv)
            logit, score = self.classifier(pixel_map)
            return ModelOutput(binary_logit=logit, pa_score=score, pixel_map=pixel_map)
        taps = {"low": low, "mid": mid, "high": high}
        attn = {lvl: self.attention[lvl](taps[lvl]) for lvl in LEVELS}
        refined = [refine(taps[lvl], attn[lvl]) for lvl in LEVELS]
        pixel_map = self.fuse(*refined)
        logit, score = self.classifier(pixel_map)
        return ModelOutput(binary_logit=logit, pa_score=score, pixel_map=pixel_map, attention=attn)

    def feature_taps(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        return dict(zip(LEVELS, self.backbone(x)))


def build_model(variant: str = "apbs", backbone_config: BackboneConfig | None = None) -> PADNet:
    return PADNet(variant, backbone_config)


def forward(model: PADNet, batch: torch.Tensor, variant: str | None = None) -> ModelOutput:
    """Run ``model`` on ``batch``; ``variant`` if given must match the model's."""
    if variant is not None:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if variant != model.variant:
            raise ConfigError(f"model was built as {model.variant!r}, not {variant!r}")
    return model(batch)

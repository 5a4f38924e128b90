"""Truncated DenseNet feature extractor with three feature taps.

The trunk keeps the stem (conv, norm, relu, max-pool) plus the first two
dense blocks and their transition layers. Features are tapped after the
stem max-pool (low), after transition 1 (mid) and after transition 2
(high), giving strides 4, 8 and 16.
"""

from __future__ import annotations

import re
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
from torchvision.models import DenseNet

from .errors import ConfigError, InitializationError, ShapeError

LEVELS = ("low", "mid", "high")
LEVEL_STRIDES = {"low": 4, "mid": 8, "high": 16}

# (growth_rate, num_init_features, bn_size) for the supported layouts
ARCH_PRESETS = {
    "densenet121": (32, 64, 4),
    "densenet161": (48, 96, 4),
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_RETAINED = ("conv0", "norm0", "relu0", "pool0", "denseblock1", "transition1", "denseblock2", "transition2")
_LEGACY_KEY = re.compile(
    r"^(.*denselayer\d+\.(?:norm|relu|conv))\.((?:[12])\.(?:weight|bias|running_mean|running_var))$"
)


@dataclass
class BackboneConfig:
    """Construction parameters for :class:`Backbone`.

    ``pretrained_source`` is ``"random"``, ``"imagenet"`` (torchvision
    registry weights for ``arch``) or a path to a ``.pth`` state dict of a
    full DenseNet.
    """

    input_resolution: int = 224
    arch: str = "densenet121"
    growth_rate: int | None = None
    block_layout: tuple[int, ...] = (6, 12)
    num_init_features: int | None = None
    bn_size: int | None = None
    pretrained_source: str = "random"
    in_channels: int = 3
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD
    tap_channels: tuple[int, int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.block_layout = tuple(int(b) for b in self.block_layout)
        if self.arch not in ARCH_PRESETS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {sorted(ARCH_PRESETS)}")
        growth, init, bn = ARCH_PRESETS[self.arch]
        self.growth_rate = growth if self.growth_rate is None else int(self.growth_rate)
        self.num_init_features = init if self.num_init_features is None else int(self.num_init_features)
        self.bn_size = bn if self.bn_size is None else int(self.bn_size)
        self.validate()

    def validate(self) -> None:
        r = self.input_resolution
        if not isinstance(r, int) or r <= 0 or r % 16:
            raise ConfigError(f"input_resolution must be a positive multiple of 16, got {r!r}")
        if len(self.block_layout) != 2 or min(self.block_layout) < 1:
            raise ConfigError(
                f"block_layout must list layer counts for exactly two dense blocks, got {self.block_layout}"
            )
        if self.growth_rate < 1 or self.num_init_features < 1 or self.bn_size < 1:
            raise ConfigError("growth_rate, num_init_features and bn_size must be positive")
        if len(self.mean) != self.in_channels or len(self.std) != self.in_channels:
            raise ConfigError("mean/std must have one entry per input channel")

    def tap_sizes(self) -> tuple[int, int, int]:
        return tuple(self.input_resolution // LEVEL_STRIDES[lvl] for lvl in LEVELS)


class Backbone(nn.Module):
    """Stem + two dense/transition blocks; ``forward`` returns (low, mid, high)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        # a trailing 1-layer block forces torchvision to emit transition2; it is discarded
        full = DenseNet(
            growth_rate=config.growth_rate,
            block_config=(*config.block_layout, 1),
            num_init_features=config.num_init_features,
            bn_size=config.bn_size,
        )
        if config.in_channels != 3:
            old = full.features.conv0
            full.features.conv0 = nn.Conv2d(
                config.in_channels, old.out_channels, kernel_size=7, stride=2, padding=3, bias=False
            )
            nn.init.kaiming_normal_(full.features.conv0.weight)
        feats = OrderedDict((name, getattr(full.features, name)) for name in _RETAINED)
        self.stem = nn.Sequential(OrderedDict((k, feats[k]) for k in _RETAINED[:4]))
        self.block1 = nn.Sequential(OrderedDict((k, feats[k]) for k in _RETAINED[4:6]))
        self.block2 = nn.Sequential(OrderedDict((k, feats[k]) for k in _RETAINED[6:]))
        self.tap_channels = self._discover_channels()
        config.tap_channels = self.tap_channels

    def _discover_channels(self) -> tuple[int, int, int]:
        low = self.config.num_init_features
        mid = self.block1.transition1.conv.out_channels
        high = self.block2.transition2.conv.out_channels
        return (low, mid, high)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        r = self.config.input_resolution
        if x.dim() != 4 or x.shape[1] != self.config.in_channels or x.shape[-2:] != (r, r):
            raise ShapeError(
                f"expected input of shape (N, {self.config.in_channels}, {r}, {r}), got {tuple(x.shape)}"
            )
        low = self.stem(x)
        mid = self.block1(low)
        high = self.block2(mid)
        return low, mid, high


def _module_prefix(key: str) -> str:
    """Map a torchvision ``features.<name>...`` key to this module's layout."""
    name = key.split(".", 1)[0]
    idx = _RETAINED.index(name)
    parent = "stem" if idx < 4 else "block1" if idx < 6 else "block2"
    return f"{parent}.{key}"


def _load_pretrained(backbone: Backbone, source: str) -> None:
    cfg = backbone.config
    if source == "imagenet":
        from torchvision import models

        weights = models.get_model_weights(cfg.arch).DEFAULT
        try:
            state = weights.get_state_dict(progress=False, check_hash=True)
        except Exception as exc:  # network/cache failure
            raise InitializationError(f"could not fetch {cfg.arch} imagenet weights: {exc}") from exc
    else:
        path = Path(source)
        if not path.is_file():
            raise InitializationError(f"weight file not found: {source}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise InitializationError(f"could not read weight file {source}: {exc}") from exc
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if not isinstance(state, dict):
            raise InitializationError(f"weight file {source} does not hold a state dict")

    remapped = {}
    for key, value in state.items():
        m = _LEGACY_KEY.match(key)
        if m:
            key = m.group(1) + m.group(2)
        if key.startswith("features."):
            key = key[len("features."):]
        if key.split(".", 1)[0] in _RETAINED:
            remapped[_module_prefix(key)] = value

    own = backbone.state_dict()
    # older torchvision checkpoints predate num_batches_tracked
    missing = [k for k in own if k not in remapped and not k.endswith("num_batches_tracked")]
    if missing:
        raise ConfigError(
            f"weights from {source} do not match the configured layout; {len(missing)} tensors missing "
            f"(first: {missing[0]})"
        )
    for key, value in remapped.items():
        if own[key].shape != value.shape:
            raise ConfigError(
                f"weights from {source} do not match the configured layout: {key} has shape "
                f"{tuple(value.shape)}, expected {tuple(own[key].shape)}"
            )
    for key in own:
        remapped.setdefault(key, own[key])
    backbone.load_state_dict(remapped, strict=True)


def build_backbone(config: BackboneConfig | None = None) -> Backbone:
    """Construct the truncated trunk and initialize it from ``config.pretrained_source``.

    With ``"random"`` the torchvision default initialization is used, driven
    by the global torch RNG (seed it beforehand for reproducibility).
    """
    config = config or BackboneConfig()
    backbone = Backbone(config)
    if config.pretrained_source != "random":
        _load_pretrained(backbone, config.pretrained_source)
    return backbone


def extract_multilevel(backbone: Backbone, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    return backbone(batch)

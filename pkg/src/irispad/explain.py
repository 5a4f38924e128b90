"""Score-CAM heatmaps over one of the backbone taps.

Each activation channel of the chosen tap is upsampled to the input size,
min-max normalized and used to mask the input; the attack score of the
masked input becomes that channel's weight (softmax over channels). The
heatmap is the ReLU of the weighted channel sum, upsampled and min-max
normalized to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .backbone import LEVELS
from .errors import ConfigError, ShapeError

DEFAULT_CMAP = "inferno_r"  # darker = higher attention


@dataclass
class Heatmap:
    values: np.ndarray
    target_layer: str
    sample_ref: str = ""

    def to_csv(self, path) -> Path:
        path = Path(path)
        np.savetxt(path, self.values, delimiter=",", fmt="%.6f")
        return path


def _minmax(x: torch.Tensor) -> torch.Tensor:
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return torch.zeros_like(x)
    return (x - lo) / (hi - lo)


def channel_masks(activations: torch.Tensor, size: int) -> torch.Tensor:
    """(C, h, w) activations -> (C, 1, size, size) masks in [0, 1].

    Constant channels give all-zero masks.
    """
    up = F.interpolate(activations[:, None], size=(size, size), mode="bilinear", align_corners=False)
    flat = up.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    return torch.where(span > 0, (up - lo) / span.clamp_min(torch.finfo(up.dtype).tiny), torch.zeros_like(up))


def combine(activations: torch.Tensor, scores: torch.Tensor, size: int) -> torch.Tensor:
    """Softmax-weighted channel sum -> ReLU -> upsample -> min-max normalize."""
    weights = torch.softmax(scores.double(), dim=0).to(activations.dtype)
    cam = F.relu(torch.einsum("c,chw->hw", weights, activations))
    cam = F.interpolate(cam[None, None], size=(size, size), mode="bilinear", align_corners=False)[0, 0]
    return _minmax(cam)


@torch.no_grad()
def masked_scores(model, image: torch.Tensor, masks: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    """Attack score for ``image * mask`` for every mask."""
    out = []
    for i in range(0, len(masks), batch_size):
        out.append(model(image[None] * masks[i : i + batch_size]).pa_score)
    return torch.cat(out)


@torch.no_grad()
def score_cam(model, image: torch.Tensor, target_layer: str = "high", sample_ref: str = "", batch_size: int = 32) -> Heatmap:
    """Heatmap for one preprocessed image (C, R, R) on a trained model.

    ``model`` is a :class:`~irispad.heads.PADNet` or a checkpoint (built on
    the fly).
    """
    if target_layer not in LEVELS:
        raise ConfigError(f"unknown layer {target_layer!r}; expected one of {LEVELS}")
    if hasattr(model, "build_model"):
        model = model.build_model()
    model.eval()
    image = torch.as_tensor(image, dtype=torch.float32)
    r = model.config.input_resolution
    if image.shape != (model.config.in_channels, r, r):
        raise ShapeError(f"expected image of shape ({model.config.in_channels}, {r}, {r}), got {tuple(image.shape)}")
    acts = model.feature_taps(image[None])[target_layer][0]
    masks = channel_masks(acts, r)
    scores = masked_scores(model, image, masks, batch_size)
    values = combine(acts, scores, r)
    return Heatmap(values.numpy().astype(np.float64), target_layer, sample_ref)


def overlay(heatmap: np.ndarray, base_image, alpha: float = 0.5, cmap: str = DEFAULT_CMAP) -> np.ndarray:
    """Alpha-blend the colormapped heatmap over the base image (uint8 RGB, base size)."""
    if isinstance(base_image, (str, Path)):
        with Image.open(base_image) as im:
            base_image = im.convert("RGB")
    if isinstance(base_image, np.ndarray):
        base_image = Image.fromarray(base_image)
    base = np.asarray(base_image.convert("RGB"), dtype=np.float64) / 255.0
    h, w = base.shape[:2]
    hm = np.asarray(heatmap, dtype=np.float32)
    if hm.shape != (h, w):
        hm = np.asarray(Image.fromarray(hm, mode="F").resize((w, h), Image.BILINEAR))
    colored = colormaps[cmap](np.clip(hm, 0.0, 1.0))[..., :3]
    blended = (1.0 - alpha) * base + alpha * colored
    return np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)


def render_heatmap(heatmap: Heatmap | np.ndarray, base_image, out_path, alpha: float = 0.5, cmap: str = DEFAULT_CMAP) -> Path:
    values = heatmap.values if isinstance(heatmap, Heatmap) else heatmap
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(values, base_image, alpha, cmap), mode="RGB").save(out_path)
    return out_path

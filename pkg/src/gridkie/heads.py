"""Word-level field-type classification head (ROI pooling, late fusion,
two-stage sigmoid classifiers) and the auxiliary pixel segmentation head,
plus their loss terms."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .textgrid import ShapeError

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
ROI_OUTPUT_SIZE = 7
ROI_SAMPLES = 2
MIN_ROI_EXTENT = 1e-6


@dataclass
class WordPrediction:
    """Per-word probabilities: is-any-field o1 and per-field o2."""

    o1: torch.Tensor  # (N,)
    o2: torch.Tensor  # (N, C)


@dataclass
class PixelPrediction:
    """Per-pixel probabilities: 3-way category softmax and per-field sigmoids."""

    class_probs: torch.Tensor  # (3, H, W), softmax over dim 0
    field_probs: torch.Tensor  # (C, H, W), independent sigmoids


# ---------------------------------------------------------------------------
# ROIAlign
# ---------------------------------------------------------------------------

def roi_align(feature_map: torch.Tensor, boxes: torch.Tensor,
              output_size: int = ROI_OUTPUT_SIZE,
              samples: int = ROI_SAMPLES) -> torch.Tensor:
    """Pool each box into an output_size x output_size grid.

    Boxes are [x0, y0, x1, y1] in feature-map coordinates (no rounding).
    Each bin is averaged over ``samples x samples`` bilinear samples taken
    at bin-relative fractions (k + 0.5) / samples; feature values sit at
    integer coordinates and sample points are clamped to the map extent.
    Degenerate boxes are expanded to a minimal extent with a warning.
    """
    if feature_map.ndim != 3:
        raise ShapeError(f"feature map must be (C, H, W), got {tuple(feature_map.shape)}")
    channels, height, width = feature_map.shape
    boxes = boxes.to(feature_map.dtype)
    n = boxes.shape[0]
    if n == 0:
        return feature_map.new_zeros((0, channels, output_size, output_size))

    x0, y0, x1, y1 = boxes.unbind(dim=1)
    if bool((x1 - x0 < MIN_ROI_EXTENT).any() or (y1 - y0 < MIN_ROI_EXTENT).any()):
        logger.warning("degenerate ROI expanded to minimal extent")
        x1 = torch.maximum(x1, x0 + MIN_ROI_EXTENT)
        y1 = torch.maximum(y1, y0 + MIN_ROI_EXTENT)

    fractions = (torch.arange(samples, dtype=feature_map.dtype, device=feature_map.device)
                 + 0.5) / samples
    # Sample coordinates per box, bin and sample: (N, output_size, samples).
    offsets = (torch.arange(output_size, dtype=feature_map.dtype,
                            device=feature_map.device)[:, None] + fractions[None, :])
    xs = x0[:, None, None] + offsets[None] * ((x1 - x0) / output_size)[:, None, None]
    ys = y0[:, None, None] + offsets[None] * ((y1 - y0) / output_size)[:, None, None]

    xs = xs.clamp(0, width - 1)
    ys = ys.clamp(0, height - 1)
    x_lo = xs.floor().clamp(0, max(width - 2, 0))
    y_lo = ys.floor().clamp(0, max(height - 2, 0))
    fx = xs - x_lo
    fy = ys - y_lo
    x_lo = x_lo.long()
    y_lo = y_lo.long()
    x_hi = (x_lo + 1).clamp(max=width - 1)
    y_hi = (y_lo + 1).clamp(max=height - 1)

    # Broadcast to the full (N, ybin, ysample, xbin, xsample) lattice.
    yl = y_lo[:, :, :, None, None]
    yh = y_hi[:, :, :, None, None]
    fy = fy[:, :, :, None, None]
    xl = x_lo[:, None, None, :, :]
    xh = x_hi[:, None, None, :, :]
    fx = fx[:, None, None, :, :]

    flat = feature_map.reshape(channels, -1)

    def grab(yy, xx):
        idx = (yy * width + xx).reshape(-1)
        return flat[:, idx].reshape((channels, n, output_size, samples, output_size, samples))

    value = (grab(yl, xl) * ((1 - fy) * (1 - fx))
             + grab(yl, xh) * ((1 - fy) * fx)
             + grab(yh, xl) * (fy * (1 - fx))
             + grab(yh, xh) * (fy * fx))
    pooled = value.mean(dim=(3, 5))  # average the sample lattice within each bin
    return pooled.permute(1, 0, 2, 3)


def quads_to_rois(quads, stride: float) -> torch.Tensor:
    """Axis-aligned bounding rectangles of quads, scaled into map coordinates."""
    out = np.empty((len(quads), 4), dtype=np.float64)
    for i, quad in enumerate(quads):
        out[i] = (quad[:, 0].min(), quad[:, 1].min(), quad[:, 0].max(), quad[:, 1].max())
    return torch.from_numpy(out / stride)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

class WordHead(nn.Module):
    """Two convs + FC over the pooled ROI, optional late fusion with the
    word embedding, then the two sigmoid classifier stages."""

    def __init__(self, in_channels: int, embed_dim: int, num_fields: int,
                 late_fusion: bool = True, feature_dim: int = 1024):
        super().__init__()
        self.late_fusion = late_fusion
        self.conv1 = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.fc = nn.Linear(in_channels * ROI_OUTPUT_SIZE ** 2, feature_dim)
        fuse_in = feature_dim + (embed_dim if late_fusion else 0)
        self.fuse_fc = nn.Linear(fuse_in, feature_dim)
        self.classifier1 = nn.Linear(feature_dim, 1)
        self.classifier2 = nn.Linear(feature_dim, num_fields)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.normal_(module.weight, mean=0.0, std=0.01)
                nn.init.zeros_(module.bias)

    def forward(self, pooled: torch.Tensor,
                embeddings: torch.Tensor | None = None) -> WordPrediction:
        x = F.relu(self.conv1(pooled))
        x = F.relu(self.conv2(x))
        x = F.relu(self.fc(x.flatten(1)))
        if self.late_fusion:
            if embeddings is None:
                raise ShapeError("late fusion enabled but no word embeddings given")
            x = torch.cat([x, embeddings.to(x.dtype)], dim=1)
        x = F.relu(self.fuse_fc(x))
        o1 = torch.sigmoid(self.classifier1(x)).squeeze(-1)
        o2 = torch.sigmoid(self.classifier2(x))
        return WordPrediction(o1=o1, o2=o2)


class AuxHead(nn.Module):
    """Two 3x3 convs on the fused map, x4 upsampling to page resolution and
    parallel 1x1 classifiers (3-way softmax and per-field sigmoids)."""

    def __init__(self, in_channels: int, num_fields: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.category_conv = nn.Conv2d(in_channels, 3, 1)
        self.field_conv = nn.Conv2d(in_channels, num_fields, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.normal_(module.weight, mean=0.0, std=0.01)
                nn.init.zeros_(module.bias)

    def forward(self, p_fuse: torch.Tensor, out_hw: tuple[int, int]) -> PixelPrediction:
        if p_fuse.ndim != 4 or p_fuse.shape[0] != 1:
            raise ShapeError(f"expected (1, C, h, w) fused map, got {tuple(p_fuse.shape)}")
        x = F.relu(self.conv1(p_fuse))
        x = F.relu(self.conv2(x))
        x = F.interpolate(x, scale_factor=4, mode="bilinear", align_corners=False)
        h, w = out_hw
        x = x[:, :, :h, :w]
        class_probs = torch.softmax(self.category_conv(x), dim=1)[0]
        field_probs = torch.sigmoid(self.field_conv(x))[0]
        return PixelPrediction(class_probs=class_probs, field_probs=field_probs)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def clamp_probs(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def binary_ce(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross-entropy on clamped probabilities."""
    p = clamp_probs(probs)
    t = targets.to(p.dtype)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))


def _zero(ref: torch.Tensor, what: str) -> torch.Tensor:
    logger.warning("empty %s batch, loss term set to 0", what)
    return ref.new_zeros(())


def loss_word(pred: WordPrediction, y1: torch.Tensor, y2: torch.Tensor,
              batch1: torch.Tensor, batch2: torch.Tensor,
              per_field_mean: bool = True) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """First-stage loss over batch1, second-stage loss over batch2, and sum.

    ``y1`` (N,) and ``y2`` (N, C) hold targets for every word; the batches
    index into them. The second-stage term averages over words and fields;
    ``per_field_mean=False`` instead sums the per-field terms and divides
    by the word count only.
    """
    if len(batch1) == 0:
        l1 = _zero(pred.o1, "first-stage word")
    else:
        l1 = binary_ce(pred.o1[batch1], y1[batch1]).mean()
    if len(batch2) == 0:
        l2 = _zero(pred.o2, "second-stage word")
    else:
        per_elem = binary_ce(pred.o2[batch2], y2[batch2])
        l2 = per_elem.mean() if per_field_mean else per_elem.sum() / len(batch2)
    return l1, l2, l1 + l2


def loss_aux(pred: PixelPrediction,
             coords1: torch.Tensor, y1: torch.Tensor,
             coords2: torch.Tensor, y2: torch.Tensor,
             per_field_mean: bool = True) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pixel losses: 3-way cross-entropy over S1 and per-field BCE over S2.

    ``coords*`` are (N, 2) integer (y, x) pixel positions; ``y1`` holds
    category class indices (0..2) and ``y2`` per-field binary targets.
    """
    if len(coords1) == 0:
        laux1 = _zero(pred.class_probs, "category pixel")
    else:
        probs = pred.class_probs[:, coords1[:, 0], coords1[:, 1]]  # (3, N1)
        picked = probs.gather(0, y1.view(1, -1).long())
        laux1 = -torch.log(clamp_probs(picked)).mean()
    if len(coords2) == 0:
        laux2 = _zero(pred.field_probs, "field pixel")
    else:
        probs = pred.field_probs[:, coords2[:, 0], coords2[:, 1]].transpose(0, 1)  # (N2, C)
        per_elem = binary_ce(probs, y2)
        laux2 = per_elem.mean() if per_field_mean else per_elem.sum() / len(coords2)
    return laux1, laux2, laux1 + laux2


def total_loss(lc: torch.Tensor, laux: torch.Tensor, lam: float) -> torch.Tensor:
    """Joint objective: word-head loss plus weighted auxiliary loss."""
    if lam < 0:
        raise ValueError("loss weight must be non-negative")
    return lc + lam * laux


def per_word_stage2_loss(pred: WordPrediction, y2: torch.Tensor) -> torch.Tensor:
    """Mean-over-fields BCE per word; ranking signal for hard mining."""
    return binary_ce(pred.o2, y2).mean(dim=1)


def per_pixel_stage2_loss(field_probs: torch.Tensor, field_masks: torch.Tensor) -> torch.Tensor:
    """Mean-over-fields BCE per pixel; ranking signal for hard mining."""
    return binary_ce(field_probs, field_masks.to(field_probs.dtype)).mean(dim=0)

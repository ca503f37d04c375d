"""ResNet18-D style backbone with FPN, early fusion of the word-embedding
grid at a configurable stage, and the fused stride-4 feature map."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .encoder import NumericError
from .textgrid import ShapeError

FUSION_STRIDES = {"C2": 4, "C3": 8, "C4": 16}
BASE_WIDTHS = (64, 64, 128, 256, 512)  # stem, C2, C3, C4, C5
FPN_BASE_CHANNELS = 256


@dataclass
class BackboneConfig:
    width_multiplier: float = 0.25
    fusion_stage: str = "C3"  # C2 | C3 | C4 | none
    use_visual: bool = True
    use_textual: bool = True
    grid_channels: int = 256

    def __post_init__(self):
        if not (self.use_visual or self.use_textual):
            raise ValueError("at least one of use_visual/use_textual must be set")
        if self.fusion_stage not in (*FUSION_STRIDES, "none"):
            raise ValueError(f"unknown fusion stage {self.fusion_stage!r}")
        if (self.fusion_stage == "none") != (not self.use_textual):
            raise ValueError("fusion_stage must be 'none' exactly when use_textual is off")

    @property
    def grid_stride(self) -> int:
        if self.fusion_stage == "none":
            raise ValueError("no grid stride without a fusion stage")
        return FUSION_STRIDES[self.fusion_stage]

    @property
    def fpn_channels(self) -> int:
        return max(1, round(FPN_BASE_CHANNELS * self.width_multiplier))


@dataclass
class FeatureSet:
    """FPN pyramid at strides 4/8/16/32 plus the fused stride-4 map."""

    p2: torch.Tensor
    p3: torch.Tensor
    p4: torch.Tensor
    p5: torch.Tensor
    p_fuse: torch.Tensor


def padded_size(height: int, width: int, multiple: int = 32) -> tuple[int, int]:
    """Bottom/right zero-padding target: the next multiples of ``multiple``."""
    pad = lambda v: ((v + multiple - 1) // multiple) * multiple
    return pad(height), pad(width)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


class BasicBlock(nn.Module):
    """Two 3x3 convs with BN; downsampling shortcuts use avgpool + 1x1 conv."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            shortcut = []
            if stride != 1:
                shortcut.append(nn.AvgPool2d(stride, stride))
            shortcut += [nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout)]
            self.shortcut = nn.Sequential(*shortcut)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetFPNBackbone(nn.Module):
    """Deep-stem ResNet18 variant with FPN and optional grid early fusion."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width_multiplier
        scaled = [max(1, round(c * w)) for c in BASE_WIDTHS]
        stem_ch, c2, c3, c4, c5 = scaled
        mid = max(1, stem_ch // 2)
        self.stem = nn.Sequential(
            conv3x3(3, mid, stride=2), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            conv3x3(mid, mid), nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            conv3x3(mid, stem_ch), nn.BatchNorm2d(stem_ch), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stage_channels = {"C2": c2, "C3": c3, "C4": c4, "C5": c5}
        self.stages = nn.ModuleDict({
            "C2": nn.ModuleList([BasicBlock(stem_ch, c2), BasicBlock(c2, c2)]),
            "C3": nn.ModuleList([BasicBlock(c2, c3, 2), BasicBlock(c3, c3)]),
            "C4": nn.ModuleList([BasicBlock(c3, c4, 2), BasicBlock(c4, c4)]),
            "C5": nn.ModuleList([BasicBlock(c4, c5, 2), BasicBlock(c5, c5)]),
        })
        if cfg.use_textual:
            fused_ch = self.stage_channels[cfg.fusion_stage]
            self.fusion_conv = nn.Conv2d(fused_ch + cfg.grid_channels, fused_ch, 1)
        else:
            self.fusion_conv = None

        fpn = cfg.fpn_channels
        self.lateral = nn.ModuleDict(
            {k: nn.Conv2d(self.stage_channels[k], fpn, 1) for k in self.stages})
        self.smooth = nn.ModuleDict(
            {k: nn.Conv2d(fpn, fpn, 3, padding=1) for k in self.stages})
        self.pyramid_fuse_conv = nn.Conv2d(4 * fpn, fpn, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.normal_(module.weight, mean=0.0, std=0.01)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def early_fuse(self, stage_features: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
        """Concatenate the grid onto a stage and reduce channels back with 1x1."""
        if not self.cfg.use_textual:
            return stage_features
        if stage_features.shape[-2:] != grid.shape[-2:]:
            raise ShapeError(
                f"stage features {tuple(stage_features.shape)} and grid "
                f"{tuple(grid.shape)} disagree spatially")
        return self.fusion_conv(torch.cat([stage_features, grid], dim=1))

    def forward(self, image: torch.Tensor, grid: torch.Tensor | None) -> FeatureSet:
        """Run stem, stages (with early fusion), FPN, and pyramid fusion.

        ``image`` is (B, 3, H, W); it is zero-padded bottom/right to the
        next multiple of 32. ``grid`` must already match the fusion stage's
        padded resolution.
        """
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"non-finite backbone parameter {name}")
        h, w = image.shape[-2:]
        ph, pw = padded_size(h, w)
        if (ph, pw) != (h, w):
            image = F.pad(image, (0, pw - w, 0, ph - h))
        if not self.cfg.use_visual:
            image = torch.zeros_like(image)

        x = self.stem(image)
        stage_out = {}
        for name in ("C2", "C3", "C4", "C5"):
            first, second = self.stages[name]
            x = first(x)
            if self.cfg.use_textual and name == self.cfg.fusion_stage:
                if grid is None:
                    raise ShapeError("textual fusion enabled but no grid given")
                x = self.early_fuse(x, grid)
            x = second(x)
            stage_out[name] = x

        laterals = {k: self.lateral[k](stage_out[k]) for k in stage_out}
        merged = {"C5": laterals["C5"]}
        for upper, lower in (("C5", "C4"), ("C4", "C3"), ("C3", "C2")):
            merged[lower] = laterals[lower] + F.interpolate(
                merged[upper], size=laterals[lower].shape[-2:], mode="nearest")
        p2, p3, p4, p5 = (self.smooth[k](merged[k]) for k in ("C2", "C3", "C4", "C5"))
        p_fuse = self.fuse_pyramid(p2, p3, p4, p5)
        return FeatureSet(p2=p2, p3=p3, p4=p4, p5=p5, p_fuse=p_fuse)

    def fuse_pyramid(self, p2, p3, p4, p5) -> torch.Tensor:
        """Resize P3-P5 to P2's size, concatenate, reduce with a 1x1 conv."""
        size = p2.shape[-2:]
        resized = [p2] + [
            F.interpolate(p, size=size, mode="bilinear", align_corners=True)
            for p in (p3, p4, p5)
        ]
        return self.pyramid_fuse_conv(torch.cat(resized, dim=1))

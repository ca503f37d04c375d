import numpy as np
import pytest
import torch

from gridkie.backbone import (BackboneConfig, ResNetFPNBackbone, padded_size)
from gridkie.textgrid import ShapeError

from conftest import tiny_backbone_config


def make_backbone(**overrides):
    torch.manual_seed(0)
    return ResNetFPNBackbone(tiny_backbone_config(**overrides))


class TestConfig:
    def test_modality_invariant(self):
        with pytest.raises(ValueError):
            BackboneConfig(use_visual=False, use_textual=False, fusion_stage="none")

    def test_fusion_stage_coupled_to_textual(self):
        with pytest.raises(ValueError):
            BackboneConfig(use_textual=False, fusion_stage="C3")
        with pytest.raises(ValueError):
            BackboneConfig(use_textual=True, fusion_stage="none")

    def test_grid_stride(self):
        assert BackboneConfig(fusion_stage="C2").grid_stride == 4
        assert BackboneConfig(fusion_stage="C3").grid_stride == 8
        assert BackboneConfig(fusion_stage="C4").grid_stride == 16


class TestEarlyFuse:
    def test_zero_grid_identity_conv_passes_features_through(self):
        net = make_backbone()
        stage_ch = net.stage_channels["C3"]
        with torch.no_grad():
            net.fusion_conv.weight.zero_()
            net.fusion_conv.bias.zero_()
            for c in range(stage_ch):
                net.fusion_conv.weight[c, c, 0, 0] = 1.0
        features = torch.randn(1, stage_ch, 8, 8)
        grid = torch.zeros(1, net.cfg.grid_channels, 8, 8)
        torch.testing.assert_close(net.early_fuse(features, grid), features)

    def test_channel_reduction_shape(self):
        net = make_backbone(width_multiplier=0.5, grid_channels=256)
        stage_ch = net.stage_channels["C3"]  # 64 at half width
        assert stage_ch == 64
        out = net.early_fuse(torch.randn(1, 64, 16, 16), torch.randn(1, 256, 16, 16))
        assert out.shape == (1, 64, 16, 16)

    def test_bypass_when_textual_off(self):
        net = make_backbone(use_textual=False, fusion_stage="none")
        features = torch.randn(1, 8, 8, 8)
        assert net.early_fuse(features, torch.randn(1, 16, 8, 8)) is features

    def test_spatial_mismatch_raises(self):
        net = make_backbone()
        with pytest.raises(ShapeError, match="disagree"):
            net.early_fuse(torch.randn(1, net.stage_channels["C3"], 8, 8),
                           torch.randn(1, net.cfg.grid_channels, 4, 4))


class TestForwardShapes:
    def test_pyramid_shapes_512(self):
        net = make_backbone()
        grid = torch.zeros(1, net.cfg.grid_channels, 64, 64)  # stride 8
        fs = net(torch.randn(1, 3, 512, 512), grid)
        assert fs.p2.shape[-2:] == (128, 128)
        assert fs.p3.shape[-2:] == (64, 64)
        assert fs.p4.shape[-2:] == (32, 32)
        assert fs.p5.shape[-2:] == (16, 16)
        assert fs.p_fuse.shape == (1, net.cfg.fpn_channels, 128, 128)

    def test_non_multiple_input_padded(self):
        net = make_backbone()
        grid = torch.zeros(1, net.cfg.grid_channels, 64, 64)  # 500 pads to 512
        fs = net(torch.randn(1, 3, 500, 500), grid)
        assert fs.p2.shape[-2:] == (128, 128)

    def test_padded_size(self):
        assert padded_size(500, 512) == (512, 512)
        assert padded_size(32, 33) == (32, 64)

    @pytest.mark.parametrize("h,w", [(64, 96), (160, 224)])
    def test_shape_law(self, h, w):
        net = make_backbone()
        ph, pw = padded_size(h, w)
        grid = torch.zeros(1, net.cfg.grid_channels, ph // 8, pw // 8)
        fs = net(torch.randn(1, 3, h, w), grid)
        for level, stride in ((fs.p2, 4), (fs.p3, 8), (fs.p4, 16), (fs.p5, 32)):
            assert level.shape[-2:] == (ph // stride, pw // stride)


class TestModalityKnockout:
    def test_visual_off_ignores_image(self):
        net = make_backbone(use_visual=False)
        net.eval()
        grid = torch.randn(1, net.cfg.grid_channels, 8, 8)
        a = net(torch.rand(1, 3, 64, 64), grid).p_fuse
        b = net(torch.rand(1, 3, 64, 64) * 5, grid).p_fuse
        torch.testing.assert_close(a, b)
        # The grid still matters.
        c = net(torch.rand(1, 3, 64, 64), grid * 2).p_fuse
        assert (a - c).abs().max() > 0

    def test_textual_off_uses_image_only(self):
        net = make_backbone(use_textual=False, fusion_stage="none")
        net.eval()
        image = torch.rand(1, 3, 64, 64)
        a = net(image, None).p_fuse
        b = net(image, torch.randn(1, 16, 8, 8)).p_fuse  # grid ignored entirely
        torch.testing.assert_close(a, b)


class TestFusePyramid:
    def test_constant_maps_with_averaging_kernel(self):
        net = make_backbone()
        f = net.cfg.fpn_channels
        with torch.no_grad():
            net.pyramid_fuse_conv.weight.fill_(0.0)
            net.pyramid_fuse_conv.bias.zero_()
            for c in range(f):
                for k in range(4):
                    net.pyramid_fuse_conv.weight[c, c + k * f, 0, 0] = 0.25
        c_value = 3.5
        maps = [torch.full((1, f, size, size), c_value) for size in (32, 16, 8, 4)]
        out = net.fuse_pyramid(*maps)
        torch.testing.assert_close(out, torch.full((1, f, 32, 32), c_value))

    def test_output_shape(self):
        net = make_backbone()
        f = net.cfg.fpn_channels
        maps = [torch.randn(1, f, size, size) for size in (128, 64, 32, 16)]
        assert net.fuse_pyramid(*maps).shape == (1, f, 128, 128)

    def test_corner_aligned_bilinear_preserves_linear_ramp(self):
        # Resizing a linear ramp with corner alignment keeps it linear with
        # the same endpoints; verify against the closed form.
        ramp = torch.linspace(0, 1, 16)[None, None, None, :].expand(1, 1, 16, 16)
        resized = torch.nn.functional.interpolate(
            ramp, size=(128, 128), mode="bilinear", align_corners=True)
        expected = torch.linspace(0, 1, 128)
        torch.testing.assert_close(resized[0, 0, 0], expected)
        torch.testing.assert_close(resized[0, 0, 77], expected)


class TestGridGradients:
    def test_gradient_flows_to_covered_cells_and_matches_fd(self):
        torch.manual_seed(1)
        net = ResNetFPNBackbone(tiny_backbone_config()).double()
        # Train mode: batch-stat BatchNorm standardizes activations to O(1),
        # away from the ReLU kinks that dominate finite differences at the
        # tiny-sigma init.
        net.train()
        image = torch.rand(1, 3, 64, 64, dtype=torch.float64)
        grid = torch.zeros(1, 16, 8, 8, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(net.cfg.fpn_channels, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(5))

        def objective(g):
            fs = net(image, g)
            return (fs.p_fuse[0] * probe[:, None, None]).sum()

        loss = objective(grid)
        loss.backward()
        analytic = grid.grad[0, 3, 4, 4].item()
        assert grid.grad.abs().max() > 0

        h = 1e-5
        with torch.no_grad():
            plus = grid.clone()
            plus[0, 3, 4, 4] += h
            minus = grid.clone()
            minus[0, 3, 4, 4] -= h
        numeric = (objective(plus).item() - objective(minus).item()) / (2 * h)
        scale = max(abs(numeric), abs(analytic), 1e-8)
        assert abs(numeric - analytic) / scale <= 1e-3

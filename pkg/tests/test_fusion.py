import itertools

import numpy as np
import pytest
import torch

from grounder.encoders import GridFeatures, PyramidFeatures, PYRAMID_SCALES
from grounder.fusion import FusedPyramid, ResoBlend, ResoBlendConfig
from grounder.gradcheck import finite_difference_report
from grounder.layers import init_parameters

torch.set_num_threads(1)

SIZE = 32
WIDTHS = (16, 24, 32, 40)
VIS = 32
FUSED = 24


def make_inputs(seed=0):
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.randn(16, VIS, generator=gen, dtype=torch.float64)
    grid = GridFeatures(tokens, (4, 4), 8)
    levels = {
        s: torch.randn(WIDTHS[s - 2], SIZE >> s, SIZE >> s, generator=gen, dtype=torch.float64)
        for s in PYRAMID_SCALES
    }
    return grid, PyramidFeatures(levels)


def make_fusion(seed=0, **kwargs) -> ResoBlend:
    cfg = ResoBlendConfig(**kwargs)
    fusion = ResoBlend(VIS, dict(zip(PYRAMID_SCALES, WIDTHS)), FUSED, cfg).double()
    init_parameters(fusion, seed)
    return fusion


class TestSelfAttend:
    def test_shape_preserved(self):
        fusion = make_fusion()
        grid, _ = make_inputs()
        out = fusion.self_attend(grid)
        assert out.tokens.shape == grid.tokens.shape

    def test_residual_identity_when_zeroed(self):
        fusion = make_fusion()
        grid, _ = make_inputs()
        with torch.no_grad():
            fusion.self_block.attn.out_proj.weight.zero_()
            fusion.self_block.attn.out_proj.bias.zero_()
            fusion.self_block.ffn.fc2.weight.zero_()
            fusion.self_block.ffn.fc2.bias.zero_()
        out = fusion.self_attend(grid)
        assert torch.equal(out.tokens, grid.tokens)


class TestFuseScale:
    def test_single_token_softmax_weight_is_one(self):
        fusion = make_fusion()
        gen = torch.Generator().manual_seed(4)
        grid = GridFeatures(torch.randn(1, VIS, generator=gen, dtype=torch.float64), (1, 1), 8)
        level = torch.randn(WIDTHS[0], 1, 1, generator=gen, dtype=torch.float64)
        _, weights = fusion.fuse_scale(grid, level, grid, 2, return_weights=True)
        assert torch.allclose(weights, torch.ones_like(weights))

    def test_attention_rows_sum_to_one(self):
        fusion = make_fusion()
        grid, pyr = make_inputs()
        for s in PYRAMID_SCALES:
            _, weights = fusion.fuse_scale(grid, pyr.levels[s], grid, s, return_weights=True)
            sums = weights.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_zeroed_value_and_ffn_leave_residual(self):
        fusion = make_fusion()
        grid, pyr = make_inputs()
        with torch.no_grad():
            att = fusion.xatt["2"]
            att.v_proj.weight.zero_()
            att.v_proj.bias.zero_()
            att.out_proj.bias.zero_()
            for lin in (fusion.ffn["2"].fc1, fusion.ffn["2"].fc2):
                lin.weight.zero_()
                lin.bias.zero_()
        out = fusion.fuse_scale(fusion.self_attend(grid), pyr.levels[2], grid, 2)
        expected = fusion.res_adapter["2"](grid.tokens)
        assert torch.allclose(out, expected)


class TestUpsampleScale:
    def _identity_conv(self, fusion, s):
        with torch.no_grad():
            conv = fusion.conv[str(s)]
            conv.weight.zero_()
            for c in range(FUSED):
                conv.weight[c, c, 1, 1] = 1.0
            conv.bias.zero_()

    def test_identity_kernel_same_size_is_noop(self):
        fusion = make_fusion()
        self._identity_conv(fusion, 2)
        tokens = torch.randn(16, FUSED, dtype=torch.float64)
        out = fusion.upsample_scale(tokens, (4, 4), (4, 4), 2)
        assert torch.allclose(out, tokens.T.reshape(FUSED, 4, 4))

    def test_constant_preserved(self):
        fusion = make_fusion()
        self._identity_conv(fusion, 3)
        tokens = torch.full((16, FUSED), 2.5, dtype=torch.float64)
        out = fusion.upsample_scale(tokens, (4, 4), (16, 16), 3)
        assert torch.allclose(out, torch.full_like(out, 2.5))

    def test_matches_reference_bilinear(self):
        # 8x8 -> 16x16 on a linear ramp against an independent
        # half-pixel-center bilinear implementation.
        fusion = make_fusion()
        self._identity_conv(fusion, 2)
        ramp = torch.arange(64, dtype=torch.float64).reshape(8, 8)
        field = ramp.unsqueeze(-1).expand(8, 8, FUSED).reshape(64, FUSED)
        out = fusion.upsample_scale(field, (8, 8), (16, 16), 2)

        def ref_bilinear(img, oh, ow):
            ih, iw = img.shape
            res = np.zeros((oh, ow))
            for oy, ox in itertools.product(range(oh), range(ow)):
                sy = (oy + 0.5) * ih / oh - 0.5
                sx = (ox + 0.5) * iw / ow - 0.5
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                wy, wx = sy - y0, sx - x0
                total = 0.0
                for dy, dx, w in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                                  (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
                    yy = min(max(y0 + dy, 0), ih - 1)
                    xx = min(max(x0 + dx, 0), iw - 1)
                    total += w * img[yy, xx]
                res[oy, ox] = total
            return res

        expected = ref_bilinear(ramp.numpy(), 16, 16)
        assert np.abs(out[0].detach().numpy() - expected).max() < 1e-6


class TestFuse:
    def test_output_levels_match_input_shapes(self):
        fusion = make_fusion()
        grid, pyr = make_inputs()
        fused = fusion(grid, pyr)
        for s in PYRAMID_SCALES:
            assert fused.levels[s].shape == (FUSED,) + pyr.levels[s].shape[-2:]

    @pytest.mark.parametrize("toggle", ["sa", "ca", "ff", "res", "conv"])
    def test_each_toggle_off_is_well_formed(self, toggle):
        fusion = make_fusion(**{toggle: False})
        grid, pyr = make_inputs()
        fused = fusion(grid, pyr)
        assert isinstance(fused, FusedPyramid)
        for s in PYRAMID_SCALES:
            assert fused.levels[s].shape[-2:] == pyr.levels[s].shape[-2:]

    def test_all_toggles_off_is_well_formed(self):
        fusion = make_fusion(sa=False, ca=False, ff=False, res=False, conv=False)
        grid, pyr = make_inputs()
        assert isinstance(fusion(grid, pyr), FusedPyramid)

    def test_level_residual_mode(self):
        fusion = make_fusion(residual_source="level")
        grid, pyr = make_inputs()
        fused = fusion(grid, pyr)
        for s in PYRAMID_SCALES:
            assert fused.levels[s].shape == (FUSED,) + pyr.levels[s].shape[-2:]

    def test_bad_residual_source_rejected(self):
        with pytest.raises(ValueError):
            make_fusion(residual_source="both")

    @pytest.mark.parametrize("res_src", ["image", "level"])
    def test_gradients_match_finite_differences(self, res_src):
        fusion = make_fusion(seed=9, residual_source=res_src)
        grid, pyr = make_inputs(seed=9)
        gen = torch.Generator().manual_seed(1)
        probes = {
            s: torch.randn(FUSED, SIZE >> s, SIZE >> s, generator=gen, dtype=torch.float64)
            for s in PYRAMID_SCALES
        }

        def loss():
            fused = fusion(grid, pyr)
            return sum((fused.levels[s] * probes[s]).sum() for s in PYRAMID_SCALES)

        report = finite_difference_report("fusion", loss, list(fusion.named_parameters()), n_coords=1)
        assert report.passed, f"max rel err {report.max_rel_err}"

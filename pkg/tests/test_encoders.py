import pytest
import torch

from grounder.encoders import (
    ColormapEncoder,
    GridFeatures,
    ImageEncoder,
    PYRAMID_SCALES,
    VisualProjector,
    project_visual,
)
from grounder.gradcheck import finite_difference_report
from grounder.layers import init_parameters

torch.set_num_threads(1)


@pytest.fixture(scope="module")
def cm_encoder():
    enc = ColormapEncoder((16, 24, 32, 40)).double()
    init_parameters(enc, 3)
    return enc


class TestColormapEncoder:
    def test_level_shapes_64(self, cm_encoder):
        pyr = cm_encoder(torch.rand(3, 64, 64, dtype=torch.float64))
        sizes = {s: tuple(pyr.levels[s].shape[-2:]) for s in PYRAMID_SCALES}
        assert sizes == {2: (16, 16), 3: (8, 8), 4: (4, 4), 5: (2, 2)}
        assert pyr.widths() == {2: 16, 3: 24, 4: 32, 5: 40}

    def test_non_divisible_dims_rejected(self, cm_encoder):
        with pytest.raises(ValueError, match="divisible"):
            cm_encoder(torch.rand(3, 48, 48, dtype=torch.float64))

    def test_distinguishes_inputs(self, cm_encoder):
        black = torch.zeros(3, 32, 32, dtype=torch.float64)
        red = torch.zeros(3, 32, 32, dtype=torch.float64)
        red[0] = 1.0
        a = cm_encoder(black).levels[2]
        b = cm_encoder(red).levels[2]
        assert not torch.allclose(a, b)

    def test_deterministic(self, cm_encoder):
        x = torch.rand(3, 32, 32, dtype=torch.float64)
        assert torch.equal(cm_encoder(x).levels[3], cm_encoder(x).levels[3])

    def test_gradient_matches_finite_differences(self, cm_encoder):
        x = torch.rand(3, 32, 32, dtype=torch.float64)
        probe = {s: torch.randn_like(cm_encoder(x).levels[s]) for s in PYRAMID_SCALES}

        def loss():
            pyr = cm_encoder(x)
            return sum((pyr.levels[s] * probe[s]).sum() for s in PYRAMID_SCALES)

        report = finite_difference_report("cm", loss, list(cm_encoder.named_parameters()), n_coords=1)
        assert report.passed, f"max rel err {report.max_rel_err}"


class TestImageEncoder:
    def test_token_count_64px(self):
        enc = ImageEncoder(64, 8, 32, depth=1, heads=4).double()
        init_parameters(enc, 0)
        grid = enc(torch.rand(3, 64, 64, dtype=torch.float64))
        assert grid.tokens.shape == (64, 32)
        assert grid.grid_hw == (8, 8)

    def test_token_count_336px_patch14(self):
        enc = ImageEncoder(336, 14, 16, depth=1, heads=4).double()
        init_parameters(enc, 0)
        grid = enc(torch.rand(3, 336, 336, dtype=torch.float64))
        assert grid.tokens.shape[0] == 576

    def test_wrong_size_rejected(self):
        enc = ImageEncoder(64, 8, 32, depth=1, heads=4)
        with pytest.raises(ValueError, match="64px"):
            enc(torch.rand(3, 32, 32))

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            ImageEncoder(64, 7, 32)

    def test_gradient_matches_finite_differences(self):
        enc = ImageEncoder(32, 8, 16, depth=1, heads=4).double()
        init_parameters(enc, 5)
        x = torch.rand(3, 32, 32, dtype=torch.float64)
        probe = torch.randn(16, 16, dtype=torch.float64)

        def loss():
            return (enc(x).tokens * probe).sum()

        report = finite_difference_report("im", loss, list(enc.named_parameters()), n_coords=1)
        assert report.passed, f"max rel err {report.max_rel_err}"


class TestProjection:
    def test_identity(self):
        grid = GridFeatures(torch.randn(6, 4, dtype=torch.float64), (2, 3), 8)
        out = project_visual(grid, torch.eye(4, dtype=torch.float64))
        assert torch.equal(out, grid.tokens)

    def test_zero(self):
        grid = GridFeatures(torch.randn(6, 4, dtype=torch.float64), (2, 3), 8)
        out = project_visual(grid, torch.zeros(4, 5, dtype=torch.float64))
        assert torch.equal(out, torch.zeros(6, 5, dtype=torch.float64))

    def test_scalar_linearity(self):
        grid = GridFeatures(torch.randn(6, 4, dtype=torch.float64), (2, 3), 8)
        w = torch.randn(4, 5, dtype=torch.float64)
        assert torch.allclose(project_visual(grid, 3.5 * w), 3.5 * project_visual(grid, w))

    def test_dim_mismatch(self):
        grid = GridFeatures(torch.randn(6, 4, dtype=torch.float64), (2, 3), 8)
        with pytest.raises(ValueError):
            project_visual(grid, torch.zeros(3, 5, dtype=torch.float64))

    def test_projector_module_matches_function(self):
        proj = VisualProjector(4, 5).double()
        init_parameters(proj, 2)
        grid = GridFeatures(torch.randn(6, 4, dtype=torch.float64), (2, 3), 8)
        assert torch.allclose(proj(grid), project_visual(grid, proj.proj.weight.T))

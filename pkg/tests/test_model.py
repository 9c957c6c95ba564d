import numpy as np
import pytest
import torch

from grounder.config import ModelConfig, from_dict, to_dict
from grounder.datagen import SceneConfig, generate_dataset
from grounder.model import GroundingModel, load_checkpoint, save_checkpoint

torch.set_num_threads(1)


def small_config():
    cfg = ModelConfig(
        image_size=32, patch_size=8, vision_width=32, vision_depth=1,
        lang_width=32, lang_depth=1, pyramid_widths=(16, 24, 32, 40), fused_width=24,
    )
    cfg.decoder.embed_dim = 24
    cfg.decoder.num_queries = 8
    cfg.decoder.depth = 1
    cfg.decoder.mask_dim = 16
    cfg.association.width = 16
    return cfg


@pytest.fixture(scope="module")
def model():
    m = GroundingModel(small_config())
    m.init_parameters(0)
    return m


@pytest.fixture(scope="module")
def scene():
    cfg = SceneConfig(image_size=32, min_groups=1, max_groups=2, max_entities=3,
                      min_radius=5.0, max_radius=8.0)
    return generate_dataset(3, cfg, 1)[0]


class TestPreparedScene:
    def test_tensor_shapes_and_ranges(self, model, scene):
        prep = model.prepare_scene(scene)
        assert prep.image.shape == (3, 32, 32)
        assert prep.colormap.shape == (3, 32, 32)
        assert 0.0 <= float(prep.image.min()) and float(prep.image.max()) <= 1.0
        n = len(scene.mask_set)
        assert prep.full_masks.shape == (n, 32, 32)
        assert prep.coverage.shape == (n, 8, 8)
        assert prep.assoc.shape == (len(scene.nouns), n)

    def test_prompts_tokenized(self, model, scene):
        prep = model.prepare_scene(scene)
        assert model.vocab.id_of("<IMAGE>") in prep.describe_prompt
        assert model.vocab.id_of("<SEG>") in prep.noun_answer


class TestForwardPaths:
    def test_segmentation_shapes(self, model, scene):
        prep = model.prepare_scene(scene)
        grid = model.encode_image(prep.image)
        decoded, fused = model.forward_segmentation(grid, prep.colormap)
        assert decoded.entity_embeddings.shape == (8, 24)
        assert decoded.entity_logits.shape == (8, 2)
        assert decoded.mask_logits.shape == (8, 8, 8)
        assert fused.width == 24

    def test_deterministic_forward(self, model, scene):
        prep = model.prepare_scene(scene)
        grid = model.encode_image(prep.image)
        a, _ = model.forward_segmentation(grid, prep.colormap)
        b, _ = model.forward_segmentation(grid, prep.colormap)
        assert torch.equal(a.mask_logits, b.mask_logits)


class TestCheckpoint:
    def test_round_trip_parameters(self, model, tmp_path):
        path = tmp_path / "ckpt.npz"
        save_checkpoint(model, path, step=12, epoch=3, extra={"note": "test"})
        loaded, meta = load_checkpoint(path)
        assert meta["step"] == 12 and meta["epoch"] == 3
        assert meta["extra"]["note"] == "test"
        assert loaded.vocab.tokens == model.vocab.tokens
        for (ka, va), (kb, vb) in zip(sorted(model.state_dict().items()),
                                      sorted(loaded.state_dict().items())):
            assert ka == kb and torch.equal(va, vb)

    def test_config_restored(self, model, tmp_path):
        path = tmp_path / "ckpt.npz"
        save_checkpoint(model, path)
        loaded, _ = load_checkpoint(path)
        assert to_dict(loaded.config) == to_dict(model.config)

    def test_optimizer_state_round_trip(self, model, scene, tmp_path):
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        prep = model.prepare_scene(scene)
        grid = model.encode_image(prep.image)
        decoded, _ = model.forward_segmentation(grid, prep.colormap)
        decoded.mask_logits.sum().backward()
        opt.step()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(model, path, optimizer=opt)
        loaded, meta = load_checkpoint(path)
        state = meta["optimizer_state"]
        opt2 = torch.optim.AdamW(loaded.parameters(), lr=1e-3)
        opt2.load_state_dict(state)
        sa, sb = opt.state_dict(), opt2.state_dict()
        assert sa["param_groups"] == sb["param_groups"]
        for pid, entry in sa["state"].items():
            for key, value in entry.items():
                other = sb["state"][pid][key]
                if isinstance(value, torch.Tensor):
                    assert torch.equal(value, other.to(value.dtype))
                else:
                    assert value == other

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.npz")


class TestConfigRoundTrip:
    def test_dict_round_trip(self):
        cfg = small_config()
        restored = from_dict(ModelConfig, to_dict(cfg))
        assert to_dict(restored) == to_dict(cfg)

    def test_unknown_key_rejected(self):
        from grounder.config import ConfigError

        with pytest.raises(ConfigError, match="unknown"):
            from_dict(ModelConfig, {"imagine_size": 64})

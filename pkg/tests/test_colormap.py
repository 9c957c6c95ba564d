import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grounder.colormap import (
    EntityMaskSet,
    MissingColorError,
    Palette,
    PaletteEntry,
    UnknownColorError,
    centroid_palette,
    decode_colormap,
    encode_masks,
    load_colormap,
    load_palette,
    palette_for,
    sample_palette,
    save_colormap,
    save_palette,
)


def random_mask_set(rng, n, h=16, w=16):
    """Disjoint non-empty masks from a random label grid."""
    while True:
        labels = rng.integers(0, n + 1, size=(h, w))
        masks = np.stack([labels == k + 1 for k in range(n)])
        if masks.any(axis=(1, 2)).all():
            return EntityMaskSet(
                masks,
                entity_ids=np.arange(n),
                is_thing=rng.random(n) < 0.5,
                is_plural_member=rng.random(n) < 0.3,
            )


class TestEntityMaskSet:
    def test_rejects_overlap(self):
        masks = np.ones((2, 4, 4), dtype=bool)
        with pytest.raises(ValueError, match="disjoint"):
            EntityMaskSet(masks, [0, 1])

    def test_rejects_empty_mask(self):
        masks = np.zeros((1, 4, 4), dtype=bool)
        with pytest.raises(ValueError, match="non-empty"):
            EntityMaskSet(masks, [0])

    def test_rejects_duplicate_ids(self):
        masks = np.zeros((2, 4, 4), dtype=bool)
        masks[0, 0, 0] = True
        masks[1, 1, 1] = True
        with pytest.raises(ValueError, match="unique"):
            EntityMaskSet(masks, [3, 3])


class TestSamplePalette:
    def test_single_entity(self):
        pal = sample_palette(1, seed=11)
        assert len(pal) == 1
        assert pal.entries[0].color != (0, 0, 0)

    def test_deterministic(self):
        assert sample_palette(3, seed=7) == sample_palette(3, seed=7)

    def test_thousand_distinct(self):
        pal = sample_palette(1000, seed=0)
        colors = [e.color for e in pal.entries]
        assert len(set(colors)) == 1000
        assert all(1 <= v <= 255 for c in colors for v in c)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            sample_palette(0, seed=1)

    def test_injectivity_many_draws(self):
        # 10^4 color draws across many palettes, never a duplicate within one.
        for seed in range(100):
            pal = sample_palette(100, seed=seed)
            colors = [e.color for e in pal.entries]
            assert len(set(colors)) == 100

    def test_accepts_explicit_ids(self):
        pal = sample_palette([5, 9, 2], seed=3)
        assert pal.entity_ids == [5, 9, 2]


class TestCentroidPalette:
    def test_full_frame_center(self):
        ms = EntityMaskSet(np.ones((1, 10, 10), dtype=bool), [0])
        pal = centroid_palette(ms)
        assert pal.entries[0].color == (128, 128, 128)

    def test_corner_mask(self):
        masks = np.zeros((1, 64, 64), dtype=bool)
        masks[0, 0, 0] = True
        pal = centroid_palette(EntityMaskSet(masks, [0]))
        assert pal.entries[0].color == (1, 1, 128)

    def test_identical_centroids_distinct_b(self):
        masks = np.zeros((2, 9, 9), dtype=bool)
        masks[0, 4, 4] = True
        masks[1, 3, 4] = True
        masks[1, 5, 4] = True  # same centroid as mask 0
        pal = centroid_palette(EntityMaskSet(masks, [0, 1]))
        c0, c1 = pal.entries[0].color, pal.entries[1].color
        assert c0[:2] == c1[:2]
        assert c0[2] != c1[2]

    def test_carries_flags(self):
        ms = random_mask_set(np.random.default_rng(0), 3)
        pal = centroid_palette(ms)
        assert [e.is_thing for e in pal.entries] == ms.is_thing.tolist()


class TestEncodeDecode:
    def test_uniform_red(self):
        ms = EntityMaskSet(np.ones((1, 8, 8), dtype=bool), [0])
        cm = encode_masks(ms, Palette([PaletteEntry(0, (255, 0, 0))]))
        assert (cm == np.array([255, 0, 0])).all()

    def test_background_black(self):
        masks = np.zeros((1, 8, 8), dtype=bool)
        masks[0, :2, :2] = True
        cm = encode_masks(EntityMaskSet(masks, [7]), Palette([PaletteEntry(7, (10, 20, 30))]))
        assert (cm[2:, 2:] == 0).all()

    def test_round_trip_five_entities(self):
        rng = np.random.default_rng(42)
        ms = random_mask_set(rng, 5)
        pal = palette_for(ms, seed=5)
        assert decode_colormap(encode_masks(ms, pal), pal) == ms

    def test_missing_color(self):
        ms = random_mask_set(np.random.default_rng(1), 2)
        with pytest.raises(MissingColorError):
            encode_masks(ms, Palette([PaletteEntry(0, (4, 4, 4))]))

    def test_all_black_decodes_empty(self):
        cm = np.zeros((8, 8, 3), dtype=np.uint8)
        out = decode_colormap(cm, sample_palette(3, seed=2))
        assert len(out) == 0

    def test_unknown_color_error_lists_colors(self):
        cm = np.zeros((4, 4, 3), dtype=np.uint8)
        cm[0, 0] = (9, 9, 9)
        with pytest.raises(UnknownColorError) as err:
            decode_colormap(cm, Palette([PaletteEntry(0, (1, 1, 1))]))
        assert (9, 9, 9) in err.value.colors

    def test_zero_pixel_entities_dropped(self):
        ms = random_mask_set(np.random.default_rng(3), 2)
        pal = palette_for(ms, seed=0)
        extended = Palette(pal.entries + [PaletteEntry(99, (250, 250, 250))])
        out = decode_colormap(encode_masks(ms, pal), extended)
        assert out == ms

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 8))
    def test_round_trip_property(self, seed, n):
        rng = np.random.default_rng(seed)
        ms = random_mask_set(rng, n)
        pal = palette_for(ms, seed=seed + 1)
        assert decode_colormap(encode_masks(ms, pal), pal) == ms

    def test_round_trip_with_centroid_palette(self):
        ms = random_mask_set(np.random.default_rng(9), 4)
        pal = centroid_palette(ms)
        assert decode_colormap(encode_masks(ms, pal), pal) == ms


class TestDiskFormats:
    def test_colormap_png_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        cm = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        save_colormap(cm, tmp_path / "cm.png")
        assert np.array_equal(load_colormap(tmp_path / "cm.png"), cm)

    def test_palette_json_round_trip(self, tmp_path):
        ms = random_mask_set(np.random.default_rng(4), 3)
        pal = palette_for(ms, seed=8)
        save_palette(pal, tmp_path / "pal.json")
        assert load_palette(tmp_path / "pal.json") == pal

    def test_full_disk_round_trip(self, tmp_path):
        ms = random_mask_set(np.random.default_rng(5), 4)
        pal = palette_for(ms, seed=1)
        save_colormap(encode_masks(ms, pal), tmp_path / "cm.png")
        save_palette(pal, tmp_path / "pal.json")
        out = decode_colormap(load_colormap(tmp_path / "cm.png"), load_palette(tmp_path / "pal.json"))
        assert out == ms

"""Entity mask sets and their colormap encoding.

A scene's entities are n pairwise-disjoint binary masks. They are encoded
into a single RGB image by assigning each entity a distinct color; pixels
covered by no entity get the reserved background color (0, 0, 0). The
encoding is exactly invertible given the palette, which is what makes the
colormap a lossless carrier of the mask set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

BACKGROUND_COLOR = (0, 0, 0)

# Channel values for entity colors live in [1, 255]; (0,0,0) is reserved.
_CHANNEL_LO = 1
_CHANNEL_HI = 255
MAX_ENTITIES = 254 ** 3 - 1

SCHEMA_VERSION = 1


class MissingColorError(ValueError):
    """An entity id has no color in the palette."""


class UnknownColorError(ValueError):
    """A colormap contains colors absent from the palette."""

    def __init__(self, colors: Sequence[tuple[int, int, int]]):
        self.colors = [tuple(int(v) for v in c) for c in colors]
        super().__init__(f"colormap contains {len(self.colors)} unknown color(s): {self.colors}")


class EntityMaskSet:
    """n disjoint, non-empty binary masks plus per-entity flags.

    masks: (n, h, w) bool array. entity_ids: (n,) unique non-negative ints.
    is_thing / is_plural_member: (n,) bool flags carried through encode/decode.
    """

    def __init__(self, masks, entity_ids, is_thing=None, is_plural_member=None):
        masks = np.asarray(masks)
        if masks.ndim != 3:
            raise ValueError(f"masks must be (n, h, w), got shape {masks.shape}")
        if masks.dtype != bool:
            if not np.isin(masks, (0, 1)).all():
                raise ValueError("masks must be binary")
            masks = masks.astype(bool)
        n = masks.shape[0]
        entity_ids = np.asarray(entity_ids, dtype=np.int64)
        if entity_ids.shape != (n,):
            raise ValueError(f"entity_ids must have shape ({n},), got {entity_ids.shape}")
        if (entity_ids < 0).any():
            raise ValueError("entity_ids must be non-negative")
        if len(np.unique(entity_ids)) != n:
            raise ValueError("entity_ids must be unique")
        if n and not masks.any(axis=(1, 2)).all():
            empty = entity_ids[~masks.any(axis=(1, 2))]
            raise ValueError(f"every mask must be non-empty; empty ids: {empty.tolist()}")
        if n and (masks.sum(axis=0) > 1).any():
            raise ValueError("masks must be pairwise disjoint")

        def _flags(x, default):
            if x is None:
                return np.full(n, default, dtype=bool)
            x = np.asarray(x, dtype=bool)
            if x.shape != (n,):
                raise ValueError(f"flag array must have shape ({n},)")
            return x

        self.masks = masks
        self.entity_ids = entity_ids
        self.is_thing = _flags(is_thing, True)
        self.is_plural_member = _flags(is_plural_member, False)

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]

    def mask_for(self, entity_id: int) -> np.ndarray:
        idx = np.flatnonzero(self.entity_ids == entity_id)
        if idx.size == 0:
            raise KeyError(f"no entity with id {entity_id}")
        return self.masks[idx[0]]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EntityMaskSet):
            return NotImplemented
        return (
            self.masks.shape == other.masks.shape
            and np.array_equal(self.masks, other.masks)
            and np.array_equal(self.entity_ids, other.entity_ids)
            and np.array_equal(self.is_thing, other.is_thing)
            and np.array_equal(self.is_plural_member, other.is_plural_member)
        )

    def __repr__(self) -> str:
        return f"EntityMaskSet(n={len(self)}, hw={self.height}x{self.width}, ids={self.entity_ids.tolist()})"


@dataclass(frozen=True)
class PaletteEntry:
    entity_id: int
    color: tuple[int, int, int]
    is_thing: bool = True
    is_plural_member: bool = False


@dataclass
class Palette:
    """Injective entity_id -> RGB map; no entity may use the background color.

    Entries also carry the entity flags so that a colormap plus its palette
    file reconstructs the full EntityMaskSet.
    """

    entries: list[PaletteEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.entity_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("palette entity_ids must be unique")
        colors = [tuple(e.color) for e in self.entries]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colors must be injective")
        for c in colors:
            if c == BACKGROUND_COLOR:
                raise ValueError("background color (0,0,0) may not be assigned to an entity")
            if not all(0 <= v <= 255 for v in c):
                raise ValueError(f"color out of range: {c}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def entity_ids(self) -> list[int]:
        return [e.entity_id for e in self.entries]

    def color_of(self, entity_id: int) -> tuple[int, int, int]:
        for e in self.entries:
            if e.entity_id == entity_id:
                return tuple(e.color)
        raise MissingColorError(f"entity id {entity_id} has no palette color")

    def covers(self, entity_ids: Iterable[int]) -> bool:
        have = set(self.entity_ids)
        return all(i in have for i in entity_ids)


def sample_palette(n_or_ids, seed: int) -> Palette:
    """Assign a uniformly random distinct non-background color to each entity.

    Accepts either an entity count (ids become 0..n-1) or an explicit id list.
    Deterministic given the seed; duplicates are rejected and redrawn.
    """
    if isinstance(n_or_ids, (int, np.integer)):
        if n_or_ids < 1:
            raise ValueError(f"need at least one entity, got {n_or_ids}")
        ids = list(range(int(n_or_ids)))
    else:
        ids = [int(i) for i in n_or_ids]
        if len(ids) < 1:
            raise ValueError("need at least one entity")
    if len(ids) > MAX_ENTITIES:
        raise ValueError(f"at most {MAX_ENTITIES} entities supported, got {len(ids)}")

    rng = np.random.default_rng(seed)
    seen: set[tuple[int, int, int]] = set()
    colors: list[tuple[int, int, int]] = []
    while len(colors) < len(ids):
        draw = rng.integers(_CHANNEL_LO, _CHANNEL_HI + 1, size=3)
        color = (int(draw[0]), int(draw[1]), int(draw[2]))
        if color in seen:
            continue
        seen.add(color)
        colors.append(color)
    return Palette([PaletteEntry(i, c) for i, c in zip(ids, colors)])


def palette_for(mask_set: EntityMaskSet, seed: int) -> Palette:
    """Random palette for a mask set, carrying over its entity flags."""
    base = sample_palette(mask_set.entity_ids, seed)
    return Palette(
        [
            PaletteEntry(e.entity_id, e.color, bool(t), bool(p))
            for e, t, p in zip(base.entries, mask_set.is_thing, mask_set.is_plural_member)
        ]
    )


def centroid_palette(mask_set: EntityMaskSet) -> Palette:
    """Deterministic location-aware palette from each mask's gravity centroid.

    R/G encode the centroid position normalized to [0,1] (by width-1 and
    height-1), B is fixed at 128. Color collisions (identical or nearly
    identical centroids) are resolved by bumping B in entity order.
    """
    h, w = mask_set.height, mask_set.width
    entries = []
    used: set[tuple[int, int, int]] = set()
    for mask, entity_id, thing, plural in zip(
        mask_set.masks, mask_set.entity_ids, mask_set.is_thing, mask_set.is_plural_member
    ):
        ys, xs = np.nonzero(mask)
        cx = 0.5 if w == 1 else float(xs.mean()) / (w - 1)
        cy = 0.5 if h == 1 else float(ys.mean()) / (h - 1)
        r = int(round(254 * cx)) + 1
        g = int(round(254 * cy)) + 1
        color = (r, g, 128)
        for k in range(255):
            candidate = (r, g, (128 - _CHANNEL_LO + k) % 255 + _CHANNEL_LO)
            if candidate not in used:
                color = candidate
                break
        else:
            raise ValueError("exhausted B channel resolving centroid color collisions")
        used.add(color)
        entries.append(PaletteEntry(int(entity_id), color, bool(thing), bool(plural)))
    return Palette(entries)


def encode_masks(mask_set: EntityMaskSet, palette: Palette) -> np.ndarray:
    """Render the mask set as an (h, w, 3) uint8 colormap.

    Covered pixels take their entity's palette color; uncovered pixels are
    (0, 0, 0). Raises MissingColorError if the palette misses an entity.
    """
    if not palette.covers(mask_set.entity_ids):
        missing = sorted(set(int(i) for i in mask_set.entity_ids) - set(palette.entity_ids))
        raise MissingColorError(f"palette misses entity ids {missing}")
    cm = np.zeros((mask_set.height, mask_set.width, 3), dtype=np.uint8)
    for mask, entity_id in zip(mask_set.masks, mask_set.entity_ids):
        cm[mask] = palette.color_of(int(entity_id))
    return cm


def _packed(colors: np.ndarray) -> np.ndarray:
    colors = colors.astype(np.int64)
    return colors[..., 0] * 65536 + colors[..., 1] * 256 + colors[..., 2]


def decode_colormap(colormap: np.ndarray, palette: Palette) -> EntityMaskSet:
    """Exact inverse of encode_masks; entities with zero pixels are dropped.

    Raises UnknownColorError listing every non-background color that does
    not appear in the palette.
    """
    colormap = np.asarray(colormap)
    if colormap.ndim != 3 or colormap.shape[2] != 3:
        raise ValueError(f"colormap must be (h, w, 3), got {colormap.shape}")
    packed = _packed(colormap)
    known = {_packed(np.array(BACKGROUND_COLOR))} | {
        int(_packed(np.array(e.color))) for e in palette.entries
    }
    present = np.unique(packed)
    unknown = [p for p in present.tolist() if p not in known]
    if unknown:
        raise UnknownColorError([(p >> 16, (p >> 8) & 255, p & 255) for p in unknown])

    masks, ids, things, plurals = [], [], [], []
    for e in palette.entries:
        mask = packed == int(_packed(np.array(e.color)))
        if not mask.any():
            continue
        masks.append(mask)
        ids.append(e.entity_id)
        things.append(e.is_thing)
        plurals.append(e.is_plural_member)
    if not masks:
        masks = np.zeros((0,) + colormap.shape[:2], dtype=bool)
    return EntityMaskSet(np.asarray(masks), ids, things, plurals)


def save_colormap(colormap: np.ndarray, path) -> None:
    PILImage.fromarray(np.asarray(colormap, dtype=np.uint8), mode="RGB").save(Path(path), format="PNG")


def load_colormap(path) -> np.ndarray:
    with PILImage.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"))


def save_palette(palette: Palette, path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "background": list(BACKGROUND_COLOR),
        "entries": [
            {
                "entity_id": e.entity_id,
                "color": list(e.color),
                "is_thing": e.is_thing,
                "is_plural_member": e.is_plural_member,
            }
            for e in palette.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_palette(path) -> Palette:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"cannot parse palette file {path}: {err}") from err
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"palette file {path}: unsupported schema_version {doc.get('schema_version')}")
    return Palette(
        [
            PaletteEntry(
                int(e["entity_id"]),
                tuple(int(v) for v in e["color"]),
                bool(e.get("is_thing", True)),
                bool(e.get("is_plural_member", False)),
            )
            for e in doc["entries"]
        ]
    )

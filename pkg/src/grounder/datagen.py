"""Synthetic scene generator and on-disk dataset formats.

Scenes are colored geometric shapes on a gray background. Every scene ships
with disjoint entity masks, a templated caption whose noun phrases carry
character spans, per-noun entity groups (plural nouns own several masks),
and the binary noun-to-entity association matrix.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .colormap import (
    EntityMaskSet,
    Palette,
    centroid_palette,
    decode_colormap,
    encode_masks,
    load_colormap,
    load_palette,
    palette_for,
    save_colormap,
    save_palette,
)

SCHEMA_VERSION = 1

SHAPES = ("circle", "square", "triangle")

# Display colors used to draw shapes in the image; the background is gray.
COLOR_TABLE: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "blue": (40, 70, 220),
    "green": (40, 170, 60),
    "yellow": (235, 220, 50),
    "purple": (150, 60, 200),
    "orange": (240, 140, 30),
    "pink": (240, 130, 180),
    "brown": (140, 90, 40),
}
BACKGROUND_NAME = "gray"
BACKGROUND_RGB = (128, 128, 128)

NUMBER_WORDS = (
    "one two three four five six seven eight nine ten "
    "eleven twelve thirteen fourteen fifteen sixteen seventeen eighteen nineteen twenty".split()
)


def number_word(n: int) -> str:
    """English number word for 1..25 ('twenty one' style above twenty)."""
    if not 1 <= n <= 25:
        raise ValueError(f"no number word for {n}")
    if n <= 20:
        return NUMBER_WORDS[n - 1]
    return "twenty " + NUMBER_WORDS[n - 21]


class GenerationError(RuntimeError):
    """Shape placement failed even after shrinking; re-seed and retry."""


@dataclass
class SceneConfig:
    image_size: int = 64
    min_groups: int = 2
    max_groups: int = 3
    max_entities: int = 6
    plural_prob: float = 0.35
    min_radius: float = 9.0
    max_radius: float = 15.0
    background: bool = True
    palette_mode: str = "random"  # "random" | "centroid"
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLOR_TABLE)

    def validate(self) -> None:
        if self.image_size < 16:
            raise ValueError("image_size too small")
        if not 1 <= self.min_groups <= self.max_groups:
            raise ValueError("need 1 <= min_groups <= max_groups")
        if self.max_entities < self.max_groups:
            raise ValueError("max_entities must allow one entity per group")
        if not 0.0 <= self.plural_prob <= 1.0:
            raise ValueError("plural_prob must be in [0, 1]")
        if not 2.0 <= self.min_radius <= self.max_radius:
            raise ValueError("need 2 <= min_radius <= max_radius")
        if self.palette_mode not in ("random", "centroid"):
            raise ValueError(f"unknown palette_mode {self.palette_mode!r}")
        if not set(self.shapes) <= set(SHAPES):
            raise ValueError(f"shapes must be a subset of {SHAPES}")
        if not set(self.colors) <= set(COLOR_TABLE):
            raise ValueError(f"colors must be a subset of {tuple(COLOR_TABLE)}")
        if len(self.shapes) * len(self.colors) < self.max_groups:
            raise ValueError("not enough shape/color combinations for max_groups")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        unknown = set(d) - set(cls().__dict__)
        if unknown:
            raise ValueError(f"unknown SceneConfig keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("shapes", "colors"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Noun:
    text: str
    span: tuple[int, int]
    entity_ids: tuple[int, ...]
    is_thing: bool
    is_plural: bool


@dataclass
class Scene:
    image: np.ndarray  # (h, w, 3) uint8
    mask_set: EntityMaskSet
    palette: Palette
    caption: str
    nouns: list[Noun]
    seed: int

    @property
    def assoc_matrix(self) -> np.ndarray:
        """Binary (m nouns x n entities) ground-truth association."""
        ids = list(self.mask_set.entity_ids)
        g = np.zeros((len(self.nouns), len(ids)), dtype=np.int64)
        for i, noun in enumerate(self.nouns):
            for eid in noun.entity_ids:
                g[i, ids.index(eid)] = 1
        return g

    def colormap(self) -> np.ndarray:
        return encode_masks(self.mask_set, self.palette)

    def validate(self) -> None:
        ids = set(int(i) for i in self.mask_set.entity_ids)
        for noun in self.nouns:
            if not noun.entity_ids:
                raise ValueError(f"noun {noun.text!r} has no entities")
            if not set(noun.entity_ids) <= ids:
                raise ValueError(f"noun {noun.text!r} references unknown entity ids")
            s, e = noun.span
            if self.caption[s:e] != noun.text:
                raise ValueError(f"span {noun.span} does not cover {noun.text!r}")
        g = self.assoc_matrix
        if len(self.nouns) and (g.sum(axis=1) < 1).any():
            raise ValueError("association rows must have at least one positive")
        if (g.sum(axis=0) > 1).any():
            raise ValueError("an entity may belong to at most one noun")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and self.mask_set == other.mask_set
            and self.palette == other.palette
            and self.caption == other.caption
            and self.nouns == other.nouns
            and self.seed == other.seed
        )


def _shape_mask(kind: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == "square":
        return (np.abs(xx - cx) <= r * 0.9) & (np.abs(yy - cy) <= r * 0.9)
    if kind == "triangle":
        # Upward isoceles triangle: apex (cx, cy-r), base corners (cx +- 1.05r, cy + 0.85r).
        top = cy - r
        base = cy + 0.85 * r
        half = 1.05 * r
        inside = (yy >= top) & (yy <= base)
        frac = np.clip((yy - top) / (base - top + 1e-12), 0.0, 1.0)
        return inside & (np.abs(xx - cx) <= half * frac)
    raise ValueError(f"unknown shape kind {kind!r}")


def _article(color: str) -> str:
    return "an" if color[0] in "aeiou" else "a"


def generate_scene(rng: np.random.Generator, config: SceneConfig, seed: int = 0) -> Scene:
    """Generate one scene from the supplied generator; deterministic per rng state."""
    config.validate()
    size = config.image_size

    n_groups = int(rng.integers(config.min_groups, config.max_groups + 1))
    combos = [(c, s) for c in config.colors for s in config.shapes]
    picks = rng.choice(len(combos), size=n_groups, replace=False)
    group_specs = [combos[int(i)] for i in picks]
    sizes = []
    for _ in range(n_groups):
        plural = rng.random() < config.plural_prob
        sizes.append(int(rng.integers(2, 4)) if plural else 1)
    while sum(sizes) > config.max_entities:
        sizes[int(np.argmax(sizes))] -= 1

    occupied = np.zeros((size, size), dtype=bool)
    masks, colors = [], []
    lo, hi = config.min_radius, config.max_radius
    for (color, shape), count in zip(group_specs, sizes):
        for _ in range(count):
            placed = False
            cur_lo, cur_hi = lo, hi
            while not placed:
                for _ in range(100):
                    r = float(rng.uniform(cur_lo, cur_hi))
                    margin = 1.1 * r + 2
                    if size - 2 * margin <= 1:
                        break
                    cx = float(rng.uniform(margin, size - margin))
                    cy = float(rng.uniform(margin, size - margin))
                    mask = _shape_mask(shape, cx, cy, r, size)
                    if mask.any() and not (mask & occupied).any():
                        occupied |= mask
                        masks.append(mask)
                        colors.append(color)
                        placed = True
                        break
                if not placed:
                    cur_lo, cur_hi = cur_lo * 0.85, cur_hi * 0.85
                    if cur_hi < 3.0:
                        raise GenerationError(
                            f"could not place a {color} {shape} after shrinking; re-seed"
                        )

    entity_ids = list(range(len(masks)))
    is_thing = [True] * len(masks)
    is_plural = []
    for count in sizes:
        is_plural.extend([count >= 2] * count)

    if config.background:
        bg_mask = ~occupied
        if not bg_mask.any():
            raise GenerationError("shapes covered the full frame; no background left")
        masks.append(bg_mask)
        entity_ids.append(len(entity_ids))
        is_thing.append(False)
        is_plural.append(False)

    mask_set = EntityMaskSet(np.asarray(masks), entity_ids, is_thing, is_plural)

    # Caption and noun spans.
    phrases, noun_records = [], []
    idx = 0
    for gi, ((color, shape), count) in enumerate(zip(group_specs, sizes)):
        noun_text = f"{color} {shape}" if count == 1 else f"{color} {shape}s"
        det = _article(color) if count == 1 else number_word(count)
        phrases.append((f"{det} {noun_text}", noun_text, tuple(range(idx, idx + count)), count >= 2))
        idx += count
    caption = ""
    for i, (phrase, noun_text, eids, plural) in enumerate(phrases):
        if i == 0:
            prefix = ""
        elif i == len(phrases) - 1:
            prefix = " and "
        else:
            prefix = ", "
        caption += prefix + phrase
        start = len(caption) - len(noun_text)
        noun_records.append(Noun(noun_text, (start, start + len(noun_text)), eids, True, plural))
    if config.background:
        bg_noun = f"{BACKGROUND_NAME} background"
        caption += f" on a {bg_noun}"
        start = len(caption) - len(bg_noun)
        noun_records.append(Noun(bg_noun, (start, start + len(bg_noun)), (entity_ids[-1],), False, False))
    caption += "."

    image = np.full((size, size, 3), BACKGROUND_RGB, dtype=np.uint8)
    for mask, color in zip(masks[: len(colors)], colors):
        image[mask] = COLOR_TABLE[color]

    if config.palette_mode == "centroid":
        palette = centroid_palette(mask_set)
    else:
        palette = palette_for(mask_set, int(rng.integers(0, 2**31)))

    scene = Scene(image, mask_set, palette, caption, noun_records, seed)
    scene.validate()
    return scene


def generate_dataset(seed: int, config: SceneConfig, count: int) -> list[Scene]:
    """count scenes with per-scene derived seeds (seed xor index)."""
    scenes = []
    for index in range(count):
        scene_seed = seed ^ index
        rng = np.random.default_rng(scene_seed)
        scenes.append(generate_scene(rng, config, seed=scene_seed))
    return scenes


# ---------------------------------------------------------------------------
# Instruction and answer templates


class TaskKind:
    """The three sampled training tasks."""

    IMG_DES = "IMG_DES"
    NOUN_EXT = "NOUN_EXT"
    ENT_GRO = "ENT_GRO"
    ALL = (IMG_DES, NOUN_EXT, ENT_GRO)


DESCRIBE_INSTRUCTION = "<IMAGE> Please help me describe the image."
EXTRACT_INSTRUCTION = "<IMAGE> Please help me extract semantic nouns of this sentence:"


def build_instruction(task: str, caption: str | None = None) -> str:
    if task == TaskKind.IMG_DES:
        return DESCRIBE_INSTRUCTION
    if task in (TaskKind.NOUN_EXT, TaskKind.ENT_GRO):
        if not caption:
            raise ValueError(f"{task} requires a caption")
        return f"{EXTRACT_INSTRUCTION} {caption}"
    raise ValueError(f"unknown task {task!r}")


def build_target_text(scene: Scene) -> str:
    """Answer string enumerating the scene's nouns, each followed by <SEG>."""
    nouns = [n.text for n in scene.nouns]
    return render_noun_answer(nouns)


def render_noun_answer(nouns: list[str]) -> str:
    m = len(nouns)
    if m == 0:
        return "There are no semantic nouns."
    tagged = [f"{n} <SEG>" for n in nouns]
    if m == 1:
        listing = tagged[0]
    else:
        listing = ", ".join(tagged[:-1]) + " and " + tagged[-1]
    return f"There are {number_word(m)} semantic nouns, including {listing}."


def parse_noun_answer(text: str) -> list[str]:
    """Recover the noun list from a rendered answer; inverse of render_noun_answer."""
    if text == "There are no semantic nouns.":
        return []
    head, _, rest = text.partition(", including ")
    if not rest or not head.startswith("There are "):
        raise ValueError(f"not a noun answer: {text!r}")
    if not rest.endswith("."):
        raise ValueError("answer must end with a period")
    rest = rest[:-1]
    parts = []
    for chunk in rest.split(", "):
        parts.extend(chunk.split(" and ") if " and " in chunk else [chunk])
    nouns = []
    for part in parts:
        if not part.endswith(" <SEG>"):
            raise ValueError(f"noun item without <SEG>: {part!r}")
        nouns.append(part[: -len(" <SEG>")])
    return nouns


# ---------------------------------------------------------------------------
# Disk format


@dataclass
class SceneRecord:
    scene_id: str
    image: str
    colormap: str
    palette: str
    annotation: str


@dataclass
class DatasetManifest:
    split: str
    seed: int
    config: SceneConfig
    records: list[SceneRecord] = field(default_factory=list)


def save_dataset(scenes: list[Scene], out_dir, split: str = "train", seed: int = 0,
                 config: SceneConfig | None = None) -> DatasetManifest:
    """Write scenes plus a manifest; the layout round-trips bit-exactly."""
    from PIL import Image as PILImage

    out = Path(out_dir)
    for sub in ("images", "colormaps", "palettes", "annotations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, scene in enumerate(scenes):
        sid = f"{i:05d}"
        rec = SceneRecord(
            scene_id=sid,
            image=f"images/{sid}.png",
            colormap=f"colormaps/{sid}.png",
            palette=f"palettes/{sid}.json",
            annotation=f"annotations/{sid}.json",
        )
        PILImage.fromarray(scene.image, mode="RGB").save(out / rec.image, format="PNG")
        save_colormap(scene.colormap(), out / rec.colormap)
        save_palette(scene.palette, out / rec.palette)
        annotation = {
            "schema_version": SCHEMA_VERSION,
            "caption": scene.caption,
            "seed": scene.seed,
            "nouns": [
                {
                    "text": n.text,
                    "span": list(n.span),
                    "entity_ids": list(n.entity_ids),
                    "is_thing": n.is_thing,
                    "is_plural": n.is_plural,
                }
                for n in scene.nouns
            ],
            "image": rec.image,
            "colormap": rec.colormap,
            "palette": rec.palette,
        }
        (out / rec.annotation).write_text(json.dumps(annotation, indent=2))
        records.append(rec)
    config = config if config is not None else SceneConfig()
    manifest = DatasetManifest(split=split, seed=seed, config=config, records=records)
    (out / "manifest.json").write_text(
        json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "split": manifest.split,
                "seed": manifest.seed,
                "config": config.to_dict(),
                "scenes": [rec.__dict__ for rec in records],
            },
            indent=2,
        )
    )
    return manifest


def load_dataset(data_dir) -> tuple[list[Scene], DatasetManifest]:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    doc = _read_json(manifest_path)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{manifest_path}: unsupported schema_version {doc.get('schema_version')}")
    config = SceneConfig.from_dict(doc["config"])
    records = [SceneRecord(**r) for r in doc["scenes"]]
    scenes = []
    for rec in records:
        ann = _read_json(root / rec.annotation)
        if ann.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"{rec.annotation}: unsupported schema_version")
        from PIL import Image as PILImage

        img_path = root / rec.image
        if not img_path.exists():
            raise FileNotFoundError(f"missing image file {img_path}")
        with PILImage.open(img_path) as im:
            image = np.asarray(im.convert("RGB"))
        palette = load_palette(root / rec.palette)
        cm = load_colormap(root / rec.colormap)
        mask_set = decode_colormap(cm, palette)
        nouns = [
            Noun(
                n["text"],
                tuple(n["span"]),
                tuple(n["entity_ids"]),
                bool(n["is_thing"]),
                bool(n["is_plural"]),
            )
            for n in ann["nouns"]
        ]
        scene = Scene(image, mask_set, palette, ann["caption"], nouns, int(ann.get("seed", 0)))
        scene.validate()
        scenes.append(scene)
    manifest = DatasetManifest(split=doc["split"], seed=int(doc["seed"]), config=config, records=records)
    return scenes, manifest


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"cannot parse {path}: {err}") from err

"""
File: synth_moinst.py
Purpose: Procedural multi-object scenes with salient-only captions and per-object instruction triplets
Version: 1.0.0
Last Updated: 2026-10-16
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from tqdm import tqdm

from src.config import (BACKGROUND_RANGE, CAPTION_TEMPLATES, COLOR_RGB, COLORS, IMAGE_SIZE, PROMPT_TEMPLATE,
                        SHAPES, SIZE_WORDS)
from src.encoders import Vocabulary
from src.exceptions import ConfigurationError, ContractError, GenerationError

logger = logging.getLogger(__name__)

SALIENT_SIZE = (18, 26)
SALIENT_CENTER = (26, 38)
OTHER_SIZE = (6, 10)
OTHER_COUNT_WEIGHTS = (0.6, 0.3, 0.1)  # 1, 2 or 3 non-salient objects
# Chebyshev distance from the canvas centre a non-salient object must keep
PERIPHERY = 18
MAX_PLACEMENT_ATTEMPTS = 1000
SPLITS = ("train", "val", "test")

PRETRAIN_MANIFEST = "manifest_pretrain.jsonl"
TRIPLET_MANIFEST = "manifest_triplets.jsonl"
VOCAB_FILE = "vocab.txt"
IMAGE_DIR = "images"


@dataclass(frozen=True)
class ObjectClass:
    id: int
    color: str
    shape: str

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"

    @property
    def rgb(self) -> Tuple[int, int, int]:
        return COLOR_RGB[self.color]


OBJECT_CLASSES: Tuple[ObjectClass, ...] = tuple(
    ObjectClass(i, color, shape) for i, (color, shape) in enumerate(product(COLORS, SHAPES)))
CLASS_BY_NAME: Dict[str, ObjectClass] = {c.name: c for c in OBJECT_CLASSES}
CLASS_NAMES: Tuple[str, ...] = tuple(c.name for c in OBJECT_CLASSES)


@dataclass(frozen=True)
class PlacedObject:
    cls: ObjectClass
    cx: int
    cy: int
    size: int

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        """(x0, y0, x1, y1), half-open."""
        x0 = self.cx - self.size // 2
        y0 = self.cy - self.size // 2
        return x0, y0, x0 + self.size, y0 + self.size

    @property
    def area(self) -> int:
        return self.size * self.size

    def overlaps(self, other: "PlacedObject", gap: int = 1) -> bool:
        ax0, ay0, ax1, ay1 = self.bbox
        bx0, by0, bx1, by1 = other.bbox
        return ax0 < bx1 + gap and bx0 < ax1 + gap and ay0 < by1 + gap and by0 < ay1 + gap


@dataclass(frozen=True)
class SceneSpec:
    salient: PlacedObject
    others: Tuple[PlacedObject, ...]
    noise_seed: int

    @property
    def objects(self) -> Tuple[PlacedObject, ...]:
        return (self.salient,) + self.others

    @property
    def object_names(self) -> List[str]:
        return [o.cls.name for o in self.objects]

    def find(self, name: str) -> Optional[PlacedObject]:
        for obj in self.objects:
            if obj.cls.name == name:
                return obj
        return None


@dataclass
class ManifestRecord:
    id: int
    image: str
    caption: str
    object: str
    objects_present: List[str]
    is_salient: bool
    split: str

    @property
    def scene_id(self) -> int:
        return int(Path(self.image).stem)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        return cls(**json.loads(line))


@dataclass
class DatasetConfig:
    """Scene counts per split, master seed and renderer worker count."""
    n_train: int = 2000
    n_val: int = 250
    n_test: int = 500
    seed: int = 17
    workers: int = 0

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigurationError(f"every split needs at least one scene: {self}")

    @property
    def n_scenes(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def split_of(self, scene_id: int) -> str:
        if scene_id < self.n_train:
            return "train"
        if scene_id < self.n_train + self.n_val:
            return "val"
        return "test"


def gen_scene(rng: np.random.Generator) -> SceneSpec:
    """Sample one salient centre object and 1-3 small peripheral ones, all classes distinct."""
    order = rng.permutation(len(OBJECT_CLASSES))
    salient = PlacedObject(
        cls=OBJECT_CLASSES[order[0]],
        cx=int(rng.integers(SALIENT_CENTER[0], SALIENT_CENTER[1] + 1)),
        cy=int(rng.integers(SALIENT_CENTER[0], SALIENT_CENTER[1] + 1)),
        size=int(rng.integers(SALIENT_SIZE[0], SALIENT_SIZE[1] + 1)),
    )
    n_other = int(rng.choice(len(OTHER_COUNT_WEIGHTS), p=OTHER_COUNT_WEIGHTS)) + 1
    centre = IMAGE_SIZE // 2

    placed = [salient]
    attempts = 0
    for cls_index in order[1:1 + n_other]:
        size = int(rng.integers(OTHER_SIZE[0], OTHER_SIZE[1] + 1))
        while True:
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise GenerationError(f"could not place {n_other} objects in {MAX_PLACEMENT_ATTEMPTS} attempts")
            half = size // 2
            cx = int(rng.integers(half, IMAGE_SIZE - size + half + 1))
            cy = int(rng.integers(half, IMAGE_SIZE - size + half + 1))
            if max(abs(cx - centre), abs(cy - centre)) < PERIPHERY:
                continue
            candidate = PlacedObject(OBJECT_CLASSES[cls_index], cx, cy, size)
            if any(candidate.overlaps(p) for p in placed):
                continue
            placed.append(candidate)
            break

    return SceneSpec(salient=salient, others=tuple(placed[1:]), noise_seed=int(rng.integers(2 ** 31)))


def _draw_object(draw: ImageDraw.ImageDraw, obj: PlacedObject) -> None:
    x0, y0, x1, y1 = obj.bbox
    fill = obj.cls.rgb
    # Pillow boxes are inclusive of the last pixel
    right, bottom = x1 - 1, y1 - 1
    if obj.cls.shape == "circle":
        draw.ellipse([x0, y0, right, bottom], fill=fill)
    elif obj.cls.shape == "square":
        draw.rectangle([x0, y0, right, bottom], fill=fill)
    elif obj.cls.shape == "triangle":
        draw.polygon([(x0, bottom), (right, bottom), (obj.cx, y0)], fill=fill)
    elif obj.cls.shape == "cross":
        bar = max(2, obj.size // 3)
        lo = obj.size // 2 - bar // 2
        draw.rectangle([x0 + lo, y0, x0 + lo + bar - 1, bottom], fill=fill)
        draw.rectangle([x0, y0 + lo, right, y0 + lo + bar - 1], fill=fill)
    else:
        raise ContractError(f"unknown shape {obj.cls.shape!r}")


def render(spec: SceneSpec) -> np.ndarray:
    """Rasterize a scene to a [64, 64, 3] uint8 array over grey seeded noise."""
    noise_rng = np.random.default_rng(spec.noise_seed)
    grey = noise_rng.integers(BACKGROUND_RANGE[0], BACKGROUND_RANGE[1] + 1, size=(IMAGE_SIZE, IMAGE_SIZE))
    canvas = Image.fromarray(np.repeat(grey[:, :, None], 3, axis=2).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for obj in spec.objects:
        _draw_object(draw, obj)
    return np.asarray(canvas, dtype=np.uint8).copy()


def position_word(obj: PlacedObject) -> str:
    dx = obj.cx - IMAGE_SIZE // 2
    dy = obj.cy - IMAGE_SIZE // 2
    if max(abs(dx), abs(dy)) < PERIPHERY // 2:
        return "middle"
    if abs(dy) >= abs(dx):
        return "top" if dy < 0 else "bottom"
    return "left" if dx < 0 else "right"


def caption_for(spec: SceneSpec, object_name: str, rng: np.random.Generator,
                template: Optional[int] = None) -> str:
    """Templated caption naming only ``object_name``, its size word and position."""
    obj = spec.find(object_name)
    if obj is None:
        raise ContractError(f"object {object_name!r} is not in the scene ({spec.object_names})")
    index = int(rng.integers(len(CAPTION_TEMPLATES))) if template is None else template
    size = SIZE_WORDS["salient"] if obj is spec.salient else SIZE_WORDS["other"]
    return CAPTION_TEMPLATES[index].format(size=size, color=obj.cls.color, shape=obj.cls.shape,
                                           position=position_word(obj))


def prompt(object_name: str) -> str:
    return PROMPT_TEMPLATE.format(object=object_name)


def scene_rng(master_seed: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, scene_id]))


def save_ppm(image: np.ndarray, path: Union[str, Path]) -> None:
    Image.fromarray(image).save(path, format="PPM")


def load_ppm(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


@dataclass
class SceneBundle:
    """One generated scene with the caption of every object, salient first."""
    scene_id: int
    spec: SceneSpec
    image: np.ndarray
    captions: List[Tuple[str, str]] = field(default_factory=list)


def generate_scene_bundle(master_seed: int, scene_id: int) -> SceneBundle:
    rng = scene_rng(master_seed, scene_id)
    spec = gen_scene(rng)
    captions = [(name, caption_for(spec, name, rng)) for name in spec.object_names]
    return SceneBundle(scene_id=scene_id, spec=spec, image=render(spec), captions=captions)


def mentions(caption: str, name: str) -> bool:
    """Whether ``name`` occurs in ``caption`` as a run of whole words."""
    words, target = caption.split(), name.split()
    n = len(target)
    return any(words[i:i + n] == target for i in range(len(words) - n + 1))


def audit_pretrain_captions(records: Iterable[ManifestRecord]) -> None:
    """Pretraining captions may name their salient object only."""
    for record in records:
        for name in record.objects_present:
            if name != record.object and mentions(record.caption, name):
                raise ContractError(f"pretraining caption {record.caption!r} mentions non-salient {name!r}")


@dataclass
class DatasetSummary:
    out_dir: Path
    n_scenes: int
    n_pretrain_records: int
    n_triplet_records: int
    records_per_split: Dict[str, int]


def build_dataset(out_dir: Union[str, Path], config: Optional[DatasetConfig] = None,
                  show_progress: bool = False) -> DatasetSummary:
    """Render every scene and write both manifests plus the vocabulary.

    Output is a pure function of ``config``: scene k uses a generator seeded
    from (seed, k) and records are assembled in scene order.
    """
    config = config or DatasetConfig()
    out_dir = Path(out_dir)
    image_dir = out_dir / IMAGE_DIR
    image_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"🎨 Generating {config.n_scenes} scenes into {out_dir} (seed {config.seed})")

    def _make(scene_id: int) -> SceneBundle:
        bundle = generate_scene_bundle(config.seed, scene_id)
        save_ppm(bundle.image, image_dir / f"{scene_id:05d}.ppm")
        return bundle

    scene_ids = range(config.n_scenes)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            bundles = list(tqdm(pool.map(_make, scene_ids), total=config.n_scenes,
                                desc="scenes", disable=not show_progress))
    else:
        bundles = [_make(i) for i in tqdm(scene_ids, desc="scenes", disable=not show_progress)]

    pretrain: List[ManifestRecord] = []
    triplets: List[ManifestRecord] = []
    for bundle in bundles:
        split = config.split_of(bundle.scene_id)
        image = f"{IMAGE_DIR}/{bundle.scene_id:05d}.ppm"
        present = bundle.spec.object_names
        for name, caption in bundle.captions:
            is_salient = name == bundle.spec.salient.cls.name
            triplets.append(ManifestRecord(len(triplets), image, caption, name, list(present), is_salient, split))
            if is_salient:
                pretrain.append(ManifestRecord(len(pretrain), image, caption, name, list(present), True, split))

    audit_pretrain_captions(pretrain)
    write_manifest(out_dir / PRETRAIN_MANIFEST, pretrain)
    write_manifest(out_dir / TRIPLET_MANIFEST, triplets)
    Vocabulary.default().save(out_dir / VOCAB_FILE)

    per_split = {s: sum(1 for r in triplets if r.split == s) for s in SPLITS}
    logger.info(f"📁 Wrote {len(pretrain)} pretraining and {len(triplets)} triplet records {per_split}")
    return DatasetSummary(out_dir, config.n_scenes, len(pretrain), len(triplets), per_split)


def write_manifest(path: Union[str, Path], records: Sequence[ManifestRecord]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for record in records:
                f.write(record.to_json() + "\n")
    except OSError as e:
        raise OSError(f"Failed to write manifest {path}: {e}") from e


def load_manifest(path: Union[str, Path]) -> List[ManifestRecord]:
    with open(path, "r", encoding="utf-8") as f:
        return [ManifestRecord.from_json(line) for line in f if line.strip()]


class SynthDataset:
    """Read access to a generated data directory with an in-memory image cache."""

    def __init__(self, data_dir: Union[str, Path]):
        self.data_dir = Path(data_dir)
        if not (self.data_dir / TRIPLET_MANIFEST).exists():
            raise FileNotFoundError(f"No dataset found in {self.data_dir} (missing {TRIPLET_MANIFEST})")
        self.pretrain_records = load_manifest(self.data_dir / PRETRAIN_MANIFEST)
        self.triplet_records = load_manifest(self.data_dir / TRIPLET_MANIFEST)
        self.vocab = Vocabulary.from_file(self.data_dir / VOCAB_FILE)
        self._images: Dict[str, np.ndarray] = {}

    def pretrain(self, split: str) -> List[ManifestRecord]:
        return [r for r in self.pretrain_records if r.split == split]

    def triplets(self, split: str) -> List[ManifestRecord]:
        return [r for r in self.triplet_records if r.split == split]

    def image(self, record: ManifestRecord) -> np.ndarray:
        if record.image not in self._images:
            self._images[record.image] = load_ppm(self.data_dir / record.image)
        return self._images[record.image]

    def images(self, records: Sequence[ManifestRecord]) -> np.ndarray:
        return np.stack([self.image(r) for r in records])

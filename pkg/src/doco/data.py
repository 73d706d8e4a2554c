"""Synthetic documents, annotation files and batching.

Annotation files are UTF-8 JSON lines, one record per image::

    {"id": "doc-1", "image": "doc-1.pgm", "objects": [{"box": [x1, y1, x2, y2], "text": "AB"}]}

Paths are relative to the annotation file. ``box`` may also be a
quadrilateral, given as 8 numbers or 4 ``[x, y]`` pairs; it is reduced to
its axis-aligned bounding rectangle.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .encoders import DocObject, tokenize
from .errors import ConfigurationError, IngestionError, MissingAssetError
from .font import CHARSET, GLYPH_HEIGHT, render_text
from .geometry import BBox

log = logging.getLogger(__name__)

INK_THRESHOLD = 0.5
MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass
class AnnotatedImage:
    image: np.ndarray  # (H, W, C) in [0, 1]
    objects: list[DocObject]
    id: str

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def texts(self) -> list[str]:
        return [o.text for o in self.objects]


@dataclass
class SynthConfig:
    seed: int = 0
    image_size: int = 64
    n_objects_range: tuple[int, int] = (2, 6)
    glyph_size: int = 7
    charset: str = CHARSET
    text_length_range: tuple[int, int] = (2, 3)
    noise: float = 0.1
    max_tokens: int = 32

    def __post_init__(self):
        lo, hi = self.n_objects_range
        if not 0 <= lo <= hi:
            raise ConfigurationError(f"invalid n_objects_range {self.n_objects_range}")
        if self.glyph_size < GLYPH_HEIGHT or self.glyph_size > self.image_size // 4:
            raise ConfigurationError(
                f"glyph_size must lie in [{GLYPH_HEIGHT}, image_size/4], got {self.glyph_size}"
            )
        self.n_objects_range = (int(lo), int(hi))
        self.text_length_range = tuple(self.text_length_range)


def _ink_box(ink: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(ink)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _intersects(a: tuple, b: tuple, margin: int = 1) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def generate_synthetic(config: SynthConfig, index: int) -> AnnotatedImage:
    """Deterministic synthetic document for ``(config.seed, index)``.

    Distinct random strings are stamped with the built-in font at
    non-overlapping positions on a noisy light background. Each annotation box
    is the tight extent of that string's ink.
    """
    rng = np.random.default_rng([config.seed, index])
    size = config.image_size
    scale = config.glyph_size // GLYPH_HEIGHT
    lo, hi = config.n_objects_range
    k = int(rng.integers(lo, hi + 1))

    image = 1.0 - config.noise * rng.random((size, size))
    ink_value = config.noise * rng.random((size, size))
    placed: list[tuple[tuple[int, int, int, int], str]] = []
    used: set[str] = set()
    for _ in range(k):
        text = None
        while text is None or text in used:
            n_chars = int(rng.integers(config.text_length_range[0], config.text_length_range[1] + 1))
            text = "".join(rng.choice(list(config.charset), size=n_chars))
        ink = render_text(text, scale)
        bx1, by1, bx2, by2 = _ink_box(ink)
        ink = ink[by1:by2, bx1:bx2]
        h, w = ink.shape
        if w > size or h > size:
            continue
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            x = int(rng.integers(0, size - w + 1))
            y = int(rng.integers(0, size - h + 1))
            box = (x, y, x + w, y + h)
            if not any(_intersects(box, other) for other, _ in placed):
                break
        else:
            warnings.warn(
                f"could only place {len(placed)} of {k} objects in synthetic image {index}",
                RuntimeWarning,
            )
            break
        region = image[y:y + h, x:x + w]
        region[ink] = ink_value[y:y + h, x:x + w][ink]
        placed.append((box, text))
        used.add(text)

    image = np.round(image * 255.0) / 255.0
    objects = [
        DocObject(BBox(*map(float, box)), tokenize(text, config.max_tokens), False, text)
        for box, text in placed
    ]
    return AnnotatedImage(image[:, :, None], objects, f"synth-{config.seed}-{index:06d}")


def generate_dataset(config: SynthConfig, count: int, start: int = 0) -> list[AnnotatedImage]:
    return [generate_synthetic(config, i) for i in range(start, start + count)]


# annotation files ---------------------------------------------------------

@dataclass
class IngestionSummary:
    images: int = 0
    objects: int = 0
    dropped_empty_text: int = 0
    dropped_degenerate_box: int = 0
    clamped: int = 0
    notes: list[str] = field(default_factory=list)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path: Path) -> None:
    arr = _to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def load_image(path: Path) -> np.ndarray:
    if not Path(path).exists():
        raise MissingAssetError(f"image file not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[:, :, None] if arr.ndim == 2 else arr


def export_annotations(images: Sequence[AnnotatedImage], out_dir, name: str = "annotations.jsonl") -> Path:
    """Write images (PGM/PPM) and a JSON-lines annotation file into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with path.open("w", encoding="utf-8") as fh:
        for ann in images:
            suffix = ".pgm" if ann.image.shape[2] == 1 else ".ppm"
            image_name = f"{ann.id}{suffix}"
            save_image(ann.image, out_dir / image_name)
            record = {
                "id": ann.id,
                "image": image_name,
                "objects": [{"box": o.bbox.as_list(), "text": o.text} for o in ann.objects],
            }
            fh.write(json.dumps(record) + "\n")
    return path


def _parse_box(raw) -> tuple[BBox, bool]:
    """Box from 4 numbers, 8 numbers or 4 points; flag says it was a quadrilateral."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.size == 4 and arr.ndim == 1:
        return BBox(*map(float, arr)), False
    if arr.size == 8:
        return BBox.from_points(arr), True
    raise ValueError(f"box must have 4 or 8 numbers, got shape {arr.shape}")


def load_annotations_with_summary(path, max_tokens: int = 32) -> tuple[list[AnnotatedImage], IngestionSummary]:
    path = Path(path)
    if not path.exists():
        raise MissingAssetError(f"annotation file not found: {path}")
    summary = IngestionSummary()
    images: list[AnnotatedImage] = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                rec_id = str(record["id"])
                image_rel = record["image"]
                raw_objects = record["objects"]
                if not isinstance(raw_objects, list):
                    raise TypeError("objects must be a list")
                parsed = []
                for obj in raw_objects:
                    box, _quad = _parse_box(obj["box"])
                    text = obj["text"]
                    if not isinstance(text, str):
                        raise TypeError("text must be a string")
                    parsed.append((box, text))
            except (ValueError, KeyError, TypeError) as exc:
                raise IngestionError(f"{path}:{line_no}: malformed record ({exc})") from exc

            image = load_image(path.parent / image_rel)
            height, width = image.shape[:2]
            objects = []
            for box, text in parsed:
                if not text:
                    summary.dropped_empty_text += 1
                    continue
                if not box.is_valid():
                    summary.dropped_degenerate_box += 1
                    summary.notes.append(f"{rec_id}: dropped box {box.as_list()}")
                    continue
                clamped = box.clamp(width, height)
                if not clamped.is_valid():
                    summary.dropped_degenerate_box += 1
                    summary.notes.append(f"{rec_id}: box {box.as_list()} empty after clamping")
                    continue
                if clamped != box:
                    summary.clamped += 1
                objects.append(DocObject(clamped, tokenize(text, max_tokens), False, text))
            summary.images += 1
            summary.objects += len(objects)
            images.append(AnnotatedImage(image, objects, rec_id))
    return images, summary


def load_annotations(path, max_tokens: int = 32) -> list[AnnotatedImage]:
    """Validated images from a JSON-lines annotation file.

    Entries with empty text or zero-area boxes are dropped and counted in the
    logged ingestion summary.
    """
    images, summary = load_annotations_with_summary(path, max_tokens)
    log.info(
        "loaded %d images / %d objects from %s (dropped: %d empty text, %d degenerate box; clamped %d)",
        summary.images, summary.objects, path, summary.dropped_empty_text,
        summary.dropped_degenerate_box, summary.clamped,
    )
    return images


def find_annotation_file(data) -> Path:
    """Accept either an annotation file or a directory containing ``annotations.jsonl``."""
    p = Path(data)
    return p / "annotations.jsonl" if p.is_dir() else p


# batching -----------------------------------------------------------------

@dataclass
class BatchItem:
    """An image ready for the loss: its objects with the global object appended last."""

    id: str
    image: np.ndarray
    objects: list[DocObject]

    @property
    def global_row(self) -> int:
        return len(self.objects) - 1


def global_object(ann: AnnotatedImage, max_tokens: int = 32) -> DocObject:
    """Whole-image object; its text is the object texts joined in reading order."""
    text = " ".join(o.text for o in ann.objects)
    return DocObject(BBox(0.0, 0.0, float(ann.width), float(ann.height)),
                     tokenize(text, max_tokens), True, text)


def with_global(ann: AnnotatedImage, max_tokens: int = 32) -> BatchItem:
    return BatchItem(ann.id, ann.image, list(ann.objects) + [global_object(ann, max_tokens)])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(data: Sequence[AnnotatedImage], batch_size: int, seed: int, epoch: int = 0,
                 max_tokens: int = 32) -> Iterator[list[BatchItem]]:
    """Shuffled batches for one epoch; the last batch may be short."""
    if batch_size < 1:
        raise ConfigurationError("batch size must be at least 1")
    if not data:
        raise ConfigurationError("cannot batch an empty dataset")
    order = epoch_order(len(data), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield [with_global(data[i], max_tokens) for i in order[start:start + batch_size]]


def replace_objects(ann: AnnotatedImage, objects) -> AnnotatedImage:
    return dataclasses.replace(ann, objects=list(objects))

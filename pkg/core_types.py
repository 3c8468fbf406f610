"""Annotation data model, dataset container and COCO-style JSON I/O.

Boxes are kept in corner form ``[x1, y1, x2, y2]`` internally; COCO's
``[x, y, w, h]`` only exists at the file boundary. Files written by this
module also carry the exact corners under ``bbox_xyxy`` so that a save/load
cycle reproduces every coordinate bit for bit (``x + w`` is not always
``x2`` in floating point).
"""

import json
import logging
import math
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

# Foreground class index in [0, n); n comes from the dataset's categories.
ClassLabel = int


class DatasetError(Exception):
    """Base exception for annotation dataset errors."""

    pass


class DatasetParseError(DatasetError):
    """The annotation file is not valid JSON."""

    pass


class DatasetSchemaError(DatasetError):
    """A required field is missing or has the wrong type."""

    pass


class DatasetInvariantError(DatasetError):
    """A record violates a dataset invariant."""

    def __init__(self, message: str, object_id: int | None = None):
        super().__init__(message)
        self.object_id = object_id


class InvalidBoxError(ValueError):
    """Raised when box coordinates are not finite or not strictly ordered."""

    pass


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle in pixel coordinates, corner form."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"Non-finite box coordinates: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBoxError(f"Degenerate box (need x1 < x2, y1 < y2): {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @classmethod
    def from_sequence(cls, coords) -> "BoundingBox":
        x1, y1, x2, y2 = (float(c) for c in coords)
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    @property
    def half_perimeter(self) -> float:
        """W + H, the size measure used by center matching."""
        return self.width + self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.width, self.height]

    def clamp(self, width: float, height: float) -> "BoundingBox":
        """Clamp to [0, width] x [0, height]; raises if nothing remains."""
        return BoundingBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )


@dataclass(frozen=True)
class ObjectFlags:
    """Provenance markers carried by an annotation."""

    label_corrupted: bool = False
    box_corrupted: bool = False
    judged_noisy: bool = False
    refined: bool = False
    discarded: bool = False

    def to_dict(self) -> dict[str, bool]:
        return {
            "label_corrupted": self.label_corrupted,
            "box_corrupted": self.box_corrupted,
            "judged_noisy": self.judged_noisy,
            "refined": self.refined,
            "discarded": self.discarded,
        }


@dataclass(frozen=True)
class AnnotatedObject:
    """One (box, label) annotation with identity and provenance flags."""

    object_id: int
    image_id: int
    box: BoundingBox
    label: ClassLabel
    flags: ObjectFlags = field(default_factory=ObjectFlags)


@dataclass(frozen=True)
class ImageRecord:
    """Image geometry and its annotations; pixel content is not retained."""

    image_id: int
    width: float
    height: float
    objects: tuple[AnnotatedObject, ...] = ()

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise DatasetInvariantError(
                f"Image {self.image_id} has non-positive size {self.width}x{self.height}"
            )


_FLAG_NAMES = frozenset(ObjectFlags().to_dict())


def default_noise_meta() -> dict[str, Any]:
    return {"seed": None, "corruptions": [], "timestamp": None}


@dataclass(frozen=True)
class Dataset:
    """Class names, images with annotations, and the corruption metadata."""

    class_names: tuple[str, ...]
    images: tuple[ImageRecord, ...]
    category_ids: tuple[int, ...] = ()
    noise_meta: dict[str, Any] = field(default_factory=default_noise_meta)

    def __post_init__(self):
        if not self.category_ids:
            object.__setattr__(
                self, "category_ids", tuple(range(1, len(self.class_names) + 1))
            )
        if len(self.category_ids) != len(self.class_names):
            raise DatasetInvariantError("category_ids and class_names differ in length")
        image_ids = [image.image_id for image in self.images]
        if len(set(image_ids)) != len(image_ids):
            duplicates = sorted({i for i in image_ids if image_ids.count(i) > 1})
            raise DatasetInvariantError(f"Duplicate image ids {duplicates}")
        seen: set[int] = set()
        n = len(self.class_names)
        for image in self.images:
            for obj in image.objects:
                if obj.object_id in seen:
                    raise DatasetInvariantError(
                        f"Duplicate object id {obj.object_id}", obj.object_id
                    )
                seen.add(obj.object_id)
                if not (0 <= obj.label < n):
                    raise DatasetInvariantError(
                        f"Object {obj.object_id}: label {obj.label} out of range [0, {n})",
                        obj.object_id,
                    )
                if obj.image_id != image.image_id:
                    raise DatasetInvariantError(
                        f"Object {obj.object_id} filed under image {image.image_id} "
                        f"but references image {obj.image_id}",
                        obj.object_id,
                    )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def objects(self) -> Iterator[AnnotatedObject]:
        """All annotations in image order, then file order within an image."""
        for image in self.images:
            yield from image.objects

    def object_count(self) -> int:
        return sum(len(image.objects) for image in self.images)

    def object_map(self) -> dict[int, AnnotatedObject]:
        return {obj.object_id: obj for obj in self.objects()}

    def image_map(self) -> dict[int, ImageRecord]:
        return {image.image_id: image for image in self.images}

    def image_of(self) -> dict[int, int]:
        """object_id -> image_id."""
        return {obj.object_id: obj.image_id for obj in self.objects()}

    def map_objects(
        self, fn: Callable[[AnnotatedObject], AnnotatedObject | None]
    ) -> "Dataset":
        """New dataset with fn applied to every object; None drops it."""
        images = []
        for image in self.images:
            kept = tuple(o for o in (fn(obj) for obj in image.objects) if o is not None)
            images.append(replace(image, objects=kept))
        return replace(self, images=tuple(images))

    def replace_objects(self, updates: Mapping[int, AnnotatedObject]) -> "Dataset":
        return self.map_objects(lambda obj: updates.get(obj.object_id, obj))

    def with_corruption(self, entry: Mapping[str, Any], seed: int | None = None) -> "Dataset":
        """Append one corruption/refinement entry to noise_meta."""
        meta = json.loads(json.dumps(self.noise_meta))
        meta.setdefault("corruptions", []).append(dict(entry))
        if seed is not None:
            meta["seed"] = seed
        return replace(self, noise_meta=meta)


def _require(record: Mapping[str, Any], key: str, where: str) -> Any:
    if not isinstance(record, Mapping) or key not in record:
        raise DatasetSchemaError(f"{where}: missing field '{key}'")
    return record[key]


def _require_int(record: Mapping[str, Any], key: str, where: str) -> int:
    value = _require(record, key, where)
    if isinstance(value, bool) or not isinstance(value, int):
        raise DatasetSchemaError(f"{where}: field '{key}' must be an integer")
    return value


def _require_list(record: Mapping[str, Any], key: str, where: str) -> list:
    value = _require(record, key, where)
    if not isinstance(value, list):
        raise DatasetSchemaError(f"{where}: field '{key}' must be a list")
    return value


def _require_number(record: Mapping[str, Any], key: str, where: str) -> float:
    value = _require(record, key, where)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DatasetSchemaError(f"{where}: field '{key}' must be a number")
    if not math.isfinite(value):
        raise DatasetInvariantError(f"{where}: field '{key}' must be finite")
    return value


def dataset_from_dict(data: Mapping[str, Any]) -> Dataset:
    """Build and validate a Dataset from parsed COCO-style JSON."""
    if not isinstance(data, Mapping):
        raise DatasetSchemaError("Top level must be a JSON object")

    categories = _require_list(data, "categories", "file")
    images = _require_list(data, "images", "file")
    annotations = _require_list(data, "annotations", "file")

    category_ids: list[int] = []
    class_names: list[str] = []
    for i, cat in enumerate(categories):
        category_ids.append(_require_int(cat, "id", f"category #{i}"))
        class_names.append(str(_require(cat, "name", f"category #{i}")))
    label_of = {cid: index for index, cid in enumerate(category_ids)}

    geometry: dict[int, tuple[float, float]] = {}
    image_order: list[int] = []
    for i, img in enumerate(images):
        image_id = _require_int(img, "id", f"image #{i}")
        if image_id in geometry:
            raise DatasetInvariantError(f"Duplicate image id {image_id}")
        width = _require_number(img, "width", f"image {image_id}")
        height = _require_number(img, "height", f"image {image_id}")
        if not (width > 0 and height > 0):
            raise DatasetInvariantError(f"Image {image_id} has non-positive size")
        geometry[image_id] = (width, height)
        image_order.append(image_id)

    per_image: dict[int, list[AnnotatedObject]] = {image_id: [] for image_id in image_order}
    for i, ann in enumerate(annotations):
        object_id = _require_int(ann, "id", f"annotation #{i}")
        where = f"annotation {object_id}"
        image_id = _require_int(ann, "image_id", where)
        category_id = _require_int(ann, "category_id", where)
        if image_id not in per_image:
            raise DatasetInvariantError(f"{where}: unknown image_id {image_id}", object_id)
        if category_id not in label_of:
            raise DatasetInvariantError(
                f"{where}: category_id {category_id} is not a declared category", object_id
            )
        try:
            if "bbox_xyxy" in ann:
                box = BoundingBox.from_sequence(ann["bbox_xyxy"])
            else:
                bbox = _require(ann, "bbox", where)
                if len(bbox) != 4:
                    raise DatasetSchemaError(f"{where}: bbox must have 4 numbers")
                box = BoundingBox.from_xywh(*bbox)
        except (InvalidBoxError, TypeError, ValueError) as e:
            if isinstance(e, DatasetError):
                raise
            raise DatasetInvariantError(f"{where}: invalid box: {e}", object_id) from e

        width, height = geometry[image_id]
        if box.x1 < 0.0 or box.y1 < 0.0 or box.x2 > width or box.y2 > height:
            raise DatasetInvariantError(
                f"{where}: box {list(box.as_tuple())} lies outside image {image_id} "
                f"({width} x {height})",
                object_id,
            )

        raw_flags = ann.get("noise_flags") or {}
        if not isinstance(raw_flags, Mapping):
            raise DatasetSchemaError(f"{where}: noise_flags must be an object")
        flags = ObjectFlags(
            **{k: bool(v) for k, v in raw_flags.items() if k in _FLAG_NAMES}
        )
        per_image[image_id].append(
            AnnotatedObject(object_id, image_id, box, label_of[category_id], flags)
        )

    records = tuple(
        ImageRecord(image_id, *geometry[image_id], tuple(per_image[image_id]))
        for image_id in image_order
    )
    noise_meta = data.get("noise_meta") or default_noise_meta()
    if not isinstance(noise_meta, Mapping):
        raise DatasetSchemaError("file: noise_meta must be an object")
    return Dataset(tuple(class_names), records, tuple(category_ids), dict(noise_meta))


def dataset_to_dict(ds: Dataset) -> dict[str, Any]:
    annotations = []
    for obj in ds.objects():
        annotations.append(
            {
                "id": obj.object_id,
                "image_id": obj.image_id,
                "category_id": ds.category_ids[obj.label],
                "bbox": obj.box.to_xywh(),
                "bbox_xyxy": list(obj.box.as_tuple()),
                "noise_flags": obj.flags.to_dict(),
            }
        )
    return {
        "categories": [
            {"id": cid, "name": name} for cid, name in zip(ds.category_ids, ds.class_names)
        ],
        "images": [
            {"id": img.image_id, "width": img.width, "height": img.height}
            for img in ds.images
        ],
        "annotations": annotations,
        "noise_meta": ds.noise_meta,
    }


def load_dataset(path: str | Path) -> Dataset:
    """Load and validate an annotation file."""
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetParseError(f"{path}: malformed JSON: {e}") from e
    except OSError as e:
        raise DatasetError(f"Cannot read {path}: {e}") from e

    ds = dataset_from_dict(data)
    logger.info(f"Loaded {ds.object_count()} objects in {len(ds.images)} images from {path}")
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset; floats use shortest round-trip repr, so loading is exact."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(dataset_to_dict(ds), f, indent=2, allow_nan=False)
            f.write("\n")
    except OSError as e:
        raise DatasetError(f"Cannot write {path}: {e}") from e
    logger.info(f"Saved {ds.object_count()} objects to {path}")

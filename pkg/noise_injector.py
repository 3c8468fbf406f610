"""Seeded corruption of clean annotations: label flips and box perturbations.

Every object draws from its own random stream keyed by (seed, stream, object_id),
so results do not depend on iteration order and reruns are bit-identical.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from core_types import AnnotatedObject, BoundingBox, Dataset, InvalidBoxError
from utils import derive_rng

logger = logging.getLogger(__name__)

LABEL_STREAM = 0
BOX_STREAM = 1

LABEL_NOISE_KINDS = ("symmetric", "pair")
BOX_NOISE_KINDS = ("uniform", "gaussian")

MAX_BOX_ATTEMPTS = 1000


class NoiseSpecError(ValueError):
    """Invalid noise parameters or a spec that does not fit the dataset."""

    pass


class BoxResampleError(RuntimeError):
    """Rejection sampling could not produce a valid perturbed box."""

    pass


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic label corruption matrix; row y is P(noisy label | y)."""

    kind: str
    n: int
    rate: float
    entries: np.ndarray = field(repr=False, compare=False)

    def row(self, label: int) -> np.ndarray:
        return self.entries[label]


def build_transition_matrix(kind: str, n: int, r: float) -> TransitionMatrix:
    """Symmetric: 1-r on the diagonal, r/(n-1) elsewhere. Pair: 1-r, and r on the cyclic successor."""
    if kind not in LABEL_NOISE_KINDS:
        raise NoiseSpecError(f"Unknown label noise kind '{kind}'")
    if n < 2:
        raise NoiseSpecError(f"Need at least 2 classes, got {n}")
    if not (0.0 <= r < 1.0):
        raise NoiseSpecError(f"Noise rate must be in [0, 1), got {r}")

    if kind == "symmetric":
        entries = np.full((n, n), r / (n - 1), dtype=np.float64)
        np.fill_diagonal(entries, 1.0 - r)
    else:
        entries = np.zeros((n, n), dtype=np.float64)
        idx = np.arange(n)
        entries[idx, idx] = 1.0 - r
        entries[idx, (idx + 1) % n] += r

    entries.setflags(write=False)
    return TransitionMatrix(kind, n, float(r), entries)


@dataclass(frozen=True)
class LabelNoiseSpec:
    kind: str
    rate: float

    def __post_init__(self):
        if self.kind not in LABEL_NOISE_KINDS:
            raise NoiseSpecError(f"Unknown label noise kind '{self.kind}'")
        if not (0.0 <= self.rate < 1.0):
            raise NoiseSpecError(f"Label noise rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class BoxNoiseSpec:
    """Uniform: parameter is N_BBox in [0, 0.5). Gaussian: parameter is sigma > 0."""

    kind: str
    parameter: float

    def __post_init__(self):
        if self.kind not in BOX_NOISE_KINDS:
            raise NoiseSpecError(f"Unknown box noise kind '{self.kind}'")
        if self.kind == "uniform" and not (0.0 <= self.parameter < 0.5):
            raise NoiseSpecError(f"Uniform N_BBox must be in [0, 0.5), got {self.parameter}")
        if self.kind == "gaussian" and not self.parameter > 0.0:
            raise NoiseSpecError(f"Gaussian sigma must be > 0, got {self.parameter}")

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(-self.parameter, self.parameter, size=4)
        return rng.normal(0.0, self.parameter, size=4)


def _split_spec(text: str) -> tuple[str, float]:
    kind, sep, value = text.partition(":")
    if not sep:
        raise NoiseSpecError(f"Expected KIND:VALUE, got '{text}'")
    try:
        return kind.strip().lower(), float(value)
    except ValueError:
        raise NoiseSpecError(f"Not a number in noise spec '{text}'")


def parse_label_noise(text: str) -> LabelNoiseSpec:
    """Parse 'symmetric:0.4' or 'pair:0.3'."""
    return LabelNoiseSpec(*_split_spec(text))


def parse_box_noise(text: str) -> BoxNoiseSpec:
    """Parse 'uniform:0.2' or 'gaussian:0.5' (sigma, not variance)."""
    return BoxNoiseSpec(*_split_spec(text))


@dataclass(frozen=True)
class CorruptionEntry:
    original_label: int
    original_box: BoundingBox
    corrupted_label: int | None = None
    corrupted_box: BoundingBox | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "original_label": self.original_label,
            "corrupted_label": self.corrupted_label,
            "original_box": list(self.original_box.as_tuple()),
            "corrupted_box": (
                list(self.corrupted_box.as_tuple()) if self.corrupted_box else None
            ),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CorruptionEntry":
        box = data.get("corrupted_box")
        return cls(
            original_label=int(data["original_label"]),
            original_box=BoundingBox.from_sequence(data["original_box"]),
            corrupted_label=data.get("corrupted_label"),
            corrupted_box=BoundingBox.from_sequence(box) if box else None,
        )


@dataclass(frozen=True)
class CorruptionRecord:
    """Ground truth of what was corrupted, keyed by object_id."""

    entries: dict[int, CorruptionEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, object_id: int) -> bool:
        return object_id in self.entries

    def label_flips(self) -> set[int]:
        return {oid for oid, e in self.entries.items() if e.corrupted_label is not None}

    def box_changes(self) -> set[int]:
        return {oid for oid, e in self.entries.items() if e.corrupted_box is not None}

    def clean_label(self, object_id: int, current: int) -> int:
        entry = self.entries.get(object_id)
        return entry.original_label if entry is not None else current

    def merge(self, later: "CorruptionRecord") -> "CorruptionRecord":
        """Combine with a record of corruptions applied after this one."""
        merged = dict(self.entries)
        for oid, entry in later.entries.items():
            first = merged.get(oid)
            if first is None:
                merged[oid] = entry
                continue
            merged[oid] = CorruptionEntry(
                original_label=first.original_label,
                original_box=first.original_box,
                corrupted_label=(
                    entry.corrupted_label
                    if entry.corrupted_label is not None
                    else first.corrupted_label
                ),
                corrupted_box=(
                    entry.corrupted_box if entry.corrupted_box is not None else first.corrupted_box
                ),
            )
        return CorruptionRecord(dict(sorted(merged.items())))

    def restore_clean(self, noisy: Dataset) -> Dataset:
        """Undo the recorded corruptions on a noisy dataset."""

        def undo(obj: AnnotatedObject) -> AnnotatedObject:
            entry = self.entries.get(obj.object_id)
            if entry is None:
                return obj
            return replace(obj, label=entry.original_label, box=entry.original_box)

        return noisy.map_objects(undo)

    def to_dict(self) -> dict[str, Any]:
        return {str(oid): e.to_dict() for oid, e in sorted(self.entries.items())}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CorruptionRecord":
        return cls({int(k): CorruptionEntry.from_dict(v) for k, v in data.items()})


def save_record(record: CorruptionRecord, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(record.to_dict(), f, indent=2, allow_nan=False)
        f.write("\n")
    logger.info(f"Corruption record with {len(record)} entries saved to {path}")


def load_record(path: str | Path) -> CorruptionRecord:
    with open(path) as f:
        return CorruptionRecord.from_dict(json.load(f))


def corrupt_labels(
    ds: Dataset, q: TransitionMatrix, seed: int
) -> tuple[Dataset, CorruptionRecord]:
    """Resample every label from row q[y] of the transition matrix."""
    if q.n != ds.n_classes:
        raise NoiseSpecError(
            f"Transition matrix is {q.n}x{q.n} but dataset has {ds.n_classes} classes"
        )

    entries: dict[int, CorruptionEntry] = {}

    def flip(obj: AnnotatedObject) -> AnnotatedObject:
        rng = derive_rng(seed, LABEL_STREAM, obj.object_id)
        new_label = int(rng.choice(q.n, p=q.row(obj.label)))
        if new_label == obj.label:
            return obj
        entries[obj.object_id] = CorruptionEntry(obj.label, obj.box, corrupted_label=new_label)
        return replace(
            obj, label=new_label, flags=replace(obj.flags, label_corrupted=True)
        )

    noisy = ds.map_objects(flip).with_corruption(
        {"target": "label", "kind": q.kind, "rate": q.rate, "seed": seed}, seed=seed
    )
    logger.info(
        f"Label noise {q.kind}:{q.rate} flipped {len(entries)}/{ds.object_count()} labels"
    )
    return noisy, CorruptionRecord(dict(sorted(entries.items())))


def perturb_box(
    box: BoundingBox,
    spec: BoxNoiseSpec,
    rng: np.random.Generator,
    image_width: float,
    image_height: float,
) -> BoundingBox:
    """Apply relative corner offsets scaled by width/height, clamp to the image.

    Draws that invert or collapse the box are rejected and all four offsets
    are drawn again.
    """
    w, h = box.width, box.height
    for _ in range(MAX_BOX_ATTEMPTS):
        d1, d2, d3, d4 = spec.draw(rng)
        try:
            candidate = BoundingBox(
                box.x1 + d1 * w, box.y1 + d3 * h, box.x2 + d2 * w, box.y2 + d4 * h
            )
            return candidate.clamp(image_width, image_height)
        except InvalidBoxError:
            continue
    raise BoxResampleError(
        f"No valid perturbation of {box.as_tuple()} after {MAX_BOX_ATTEMPTS} attempts"
    )


def corrupt_boxes(
    ds: Dataset, spec: BoxNoiseSpec, seed: int
) -> tuple[Dataset, CorruptionRecord]:
    """Perturb every box with the spec's offset distribution."""
    entries: dict[int, CorruptionEntry] = {}
    images = ds.image_map()

    def shake(obj: AnnotatedObject) -> AnnotatedObject:
        image = images[obj.image_id]
        rng = derive_rng(seed, BOX_STREAM, obj.object_id)
        new_box = perturb_box(obj.box, spec, rng, image.width, image.height)
        if new_box == obj.box:
            return obj
        entries[obj.object_id] = CorruptionEntry(obj.label, obj.box, corrupted_box=new_box)
        return replace(obj, box=new_box, flags=replace(obj.flags, box_corrupted=True))

    noisy = ds.map_objects(shake).with_corruption(
        {"target": "box", "kind": spec.kind, "parameter": spec.parameter, "seed": seed},
        seed=seed,
    )
    logger.info(
        f"Box noise {spec.kind}:{spec.parameter} moved {len(entries)}/{ds.object_count()} boxes"
    )
    return noisy, CorruptionRecord(dict(sorted(entries.items())))


def compose_corruptions(
    ds: Dataset,
    label_spec: LabelNoiseSpec | None,
    box_spec: BoxNoiseSpec | None,
    seed: int,
) -> tuple[Dataset, CorruptionRecord]:
    """Labels first, then boxes; the two use separate streams of the same seed."""
    record = CorruptionRecord()
    noisy = ds
    if label_spec is not None:
        q = build_transition_matrix(label_spec.kind, ds.n_classes, label_spec.rate)
        noisy, label_record = corrupt_labels(noisy, q, seed)
        record = record.merge(label_record)
    if box_spec is not None:
        noisy, box_record = corrupt_boxes(noisy, box_spec, seed)
        record = record.merge(box_record)
    return noisy, record

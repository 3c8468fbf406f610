"""Evaluation of corrupted and refined annotations against clean ground truth."""

import csv
import io
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from cinj import CLEAN, NOISY
from core_types import BoundingBox, Dataset
from geometry import iou
from noise_injector import CorruptionRecord
from utils import format_percent

logger = logging.getLogger(__name__)

DEFAULT_CORLOC_IOU = 0.7


class EvaluationError(Exception):
    """Custom exception for evaluation errors."""

    pass


@dataclass(frozen=True)
class CorLocReport:
    corloc_noisy: float
    corloc_cm: float
    corloc_final: float
    iou_threshold: float = DEFAULT_CORLOC_IOU
    same_object: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class JudgmentConfusion:
    """TP/FN are fractions of truly noisy labels, TN/FP of truly clean ones."""

    tp: float | None
    tn: float | None
    fp: float | None
    fn: float | None
    residual_noise_rate: float | None
    noisy_total: int = 0
    clean_total: int = 0
    emitted: int = 0
    discarded: int = 0
    residual_excludes_discarded: bool = True

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LossHistogram:
    edges: list[float]
    clean_counts: list[int]
    noisy_counts: list[int]

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bin_low", "bin_high", "clean", "noisy"])
            for i, (c, n) in enumerate(zip(self.clean_counts, self.noisy_counts)):
                writer.writerow([repr(self.edges[i]), repr(self.edges[i + 1]), c, n])


def _clean_boxes_by_image(clean_ds: Dataset) -> dict[int, list[BoundingBox]]:
    return {img.image_id: [o.box for o in img.objects] for img in clean_ds.images}


def corloc(
    stage_boxes: Mapping[int, BoundingBox],
    clean_ds: Dataset,
    threshold: float = DEFAULT_CORLOC_IOU,
) -> float:
    """Fraction of boxes whose IoU with any clean box of the same image exceeds threshold."""
    if not stage_boxes:
        return 0.0
    image_of = clean_ds.image_of()
    clean_by_image = _clean_boxes_by_image(clean_ds)
    correct = 0
    for object_id, box in stage_boxes.items():
        if object_id not in image_of:
            raise EvaluationError(f"Object {object_id} has no counterpart in the clean dataset")
        if any(iou(box, c) > threshold for c in clean_by_image[image_of[object_id]]):
            correct += 1
    return correct / len(stage_boxes)


def corloc_same_object(
    stage_boxes: Mapping[int, BoundingBox],
    clean_ds: Dataset,
    threshold: float = DEFAULT_CORLOC_IOU,
) -> float:
    """Stricter variant: the box must overlap its own clean box."""
    if not stage_boxes:
        return 0.0
    clean = clean_ds.object_map()
    correct = 0
    for object_id, box in stage_boxes.items():
        if object_id not in clean:
            raise EvaluationError(f"Object {object_id} has no counterpart in the clean dataset")
        if iou(box, clean[object_id].box) > threshold:
            correct += 1
    return correct / len(stage_boxes)


def corloc_report(
    noisy_boxes: Mapping[int, BoundingBox],
    cm_boxes: Mapping[int, BoundingBox],
    final_boxes: Mapping[int, BoundingBox],
    clean_ds: Dataset,
    threshold: float = DEFAULT_CORLOC_IOU,
) -> CorLocReport:
    stages = {"noisy": noisy_boxes, "cm": cm_boxes, "final": final_boxes}
    any_box = {k: corloc(v, clean_ds, threshold) for k, v in stages.items()}
    same = {k: corloc_same_object(v, clean_ds, threshold) for k, v in stages.items()}
    return CorLocReport(any_box["noisy"], any_box["cm"], any_box["final"], threshold, same)


def _truth_labels(
    outcomes: Sequence[Any],
    record: CorruptionRecord | None,
    clean_labels: Mapping[int, int] | None,
) -> list[int]:
    if clean_labels is None and record is None:
        raise EvaluationError("Need a corruption record or clean labels to evaluate judgments")
    truth = []
    for o in outcomes:
        if clean_labels is not None:
            if o.object_id not in clean_labels:
                raise EvaluationError(f"No clean label for judged object {o.object_id}")
            truth.append(clean_labels[o.object_id])
        else:
            truth.append(record.clean_label(o.object_id, o.input_label))
    return truth


def _fraction(num: int, den: int) -> float | None:
    return num / den if den else None


def confusion(
    outcomes: Sequence[Any],
    record: CorruptionRecord | None = None,
    clean_labels: Mapping[int, int] | None = None,
) -> JudgmentConfusion:
    """Judgment confusion over non-deferred verdicts plus the residual label-noise rate.

    A label is truly noisy when the label that was judged differs from the clean
    label. The residual rate counts emitted (non-discarded) labels that differ
    from the clean label; discarded objects leave both numerator and denominator.
    """
    truth = _truth_labels(outcomes, record, clean_labels)

    tp = fn = tn = fp = 0
    emitted = wrong = discarded = 0
    for o, clean in zip(outcomes, truth):
        noisy = o.input_label != clean
        if o.verdict == NOISY:
            tp, fp = (tp + 1, fp) if noisy else (tp, fp + 1)
        elif o.verdict == CLEAN:
            fn, tn = (fn + 1, tn) if noisy else (fn, tn + 1)
        if o.discarded:
            discarded += 1
        else:
            emitted += 1
            wrong += o.final_label != clean

    noisy_total, clean_total = tp + fn, tn + fp
    return JudgmentConfusion(
        tp=_fraction(tp, noisy_total),
        tn=_fraction(tn, clean_total),
        fp=_fraction(fp, clean_total),
        fn=_fraction(fn, noisy_total),
        residual_noise_rate=_fraction(wrong, emitted),
        noisy_total=noisy_total,
        clean_total=clean_total,
        emitted=emitted,
        discarded=discarded,
    )


def loss_histogram(
    outcomes: Sequence[Any],
    record: CorruptionRecord | None = None,
    bins: int = 20,
    clean_labels: Mapping[int, int] | None = None,
) -> LossHistogram:
    """Losses split by true label status into shared bins."""
    truth = _truth_labels(outcomes, record, clean_labels)
    losses = np.array([o.loss for o in outcomes], dtype=np.float64)
    noisy_mask = np.array([o.input_label != t for o, t in zip(outcomes, truth)], dtype=bool)

    if losses.size:
        edges = np.histogram_bin_edges(losses, bins=bins)
    else:
        edges = np.linspace(0.0, 1.0, bins + 1)
    clean_counts, _ = np.histogram(losses[~noisy_mask], bins=edges)
    noisy_counts, _ = np.histogram(losses[noisy_mask], bins=edges)
    return LossHistogram(
        [float(e) for e in edges],
        [int(c) for c in clean_counts],
        [int(c) for c in noisy_counts],
    )


@dataclass(frozen=True)
class DatasetEvaluation:
    corloc: float
    corloc_same_object: float
    residual_noise_rate: float | None
    objects: int
    missing: int
    injected_label_noise_rate: float | None = None
    injected_box_noise_rate: float | None = None
    iou_threshold: float = DEFAULT_CORLOC_IOU

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def evaluate_dataset(
    refined: Dataset,
    clean: Dataset,
    record: CorruptionRecord | None = None,
    threshold: float = DEFAULT_CORLOC_IOU,
) -> DatasetEvaluation:
    """Compare a refined (or noisy) annotation file with the clean one."""
    clean_objects = clean.object_map()
    refined_objects = refined.object_map()
    stray = sorted(set(refined_objects) - set(clean_objects))
    if stray:
        raise EvaluationError(
            f"{len(stray)} refined objects have no clean counterpart, first is {stray[0]}"
        )

    boxes = {oid: o.box for oid, o in refined_objects.items()}
    wrong = sum(1 for oid, o in refined_objects.items() if o.label != clean_objects[oid].label)
    total = len(clean_objects)
    return DatasetEvaluation(
        corloc=corloc(boxes, clean, threshold),
        corloc_same_object=corloc_same_object(boxes, clean, threshold),
        residual_noise_rate=_fraction(wrong, len(refined_objects)),
        objects=len(refined_objects),
        missing=total - len(refined_objects),
        injected_label_noise_rate=_fraction(len(record.label_flips()), total) if record else None,
        injected_box_noise_rate=_fraction(len(record.box_changes()), total) if record else None,
        iou_threshold=threshold,
    )


TABLE_ROWS = (
    ("CorLoc_noisy", ("corloc", "corloc_noisy")),
    ("CorLoc_cm", ("corloc", "corloc_cm")),
    ("CorLoc_final", ("corloc", "corloc_final")),
    ("TP", ("judgment", "tp")),
    ("TN", ("judgment", "tn")),
    ("FP", ("judgment", "fp")),
    ("FN", ("judgment", "fn")),
    ("N*_Label", ("judgment", "residual_noise_rate")),
)


def run_label(report: Mapping[str, Any]) -> str:
    """Column title such as 'N_Label=40% N_BBox=20%' from the injected noise."""
    parts = []
    for entry in report.get("noise_meta", {}).get("corruptions", []):
        if entry.get("target") == "label":
            parts.append(f"N_Label={entry['rate'] * 100:g}%")
        elif entry.get("target") == "box":
            if entry.get("kind") == "uniform":
                parts.append(f"N_BBox={entry['parameter'] * 100:g}%")
            else:
                parts.append(f"sigma={entry['parameter']:g}")
    return " ".join(parts) or "clean"


def _cell(report: Mapping[str, Any], path: tuple[str, str]) -> float | None:
    block = (report.get("metrics") or {}).get(path[0]) or {}
    return block.get(path[1])


def render_table(reports: Iterable[Mapping[str, Any]], fmt: str = "text") -> str:
    """Refinement-quality table, one column per run, values in percent."""
    reports = list(reports)
    if not reports:
        raise EvaluationError("No run reports to render")
    headers = [run_label(r) for r in reports]
    rows = [
        [name] + [format_percent(_cell(r, path)) for r in reports] for name, path in TABLE_ROWS
    ]

    if fmt == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["metric"] + headers)
        writer.writerows(rows)
        return buffer.getvalue()
    if fmt != "text":
        raise EvaluationError(f"Unknown table format '{fmt}'")

    widths = [max(len(str(row[i])) for row in [["Metric"] + headers] + rows) for i in range(len(headers) + 1)]
    lines = ["  ".join(h.rjust(w) if i else h.ljust(w) for i, (h, w) in enumerate(zip(["Metric"] + headers, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append(
            "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
        )
    return "\n".join(lines) + "\n"

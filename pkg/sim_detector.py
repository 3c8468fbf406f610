"""Simulated detector standing in for a partially trained two-stage detector.

Given the clean annotations of an image, the oracle emits region proposals
with objectness, class-probability vectors for queried regions and
regressed boxes. The separation between losses of clean and corrupted labels
is built into the oracle through ``classification_accuracy``; it is a
modelling assumption, not something that emerges from training.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from core_types import AnnotatedObject, BoundingBox, ImageRecord, InvalidBoxError
from geometry import blend, iou
from utils import box_key, derive_rng, mistyped_fields

logger = logging.getLogger(__name__)

PROPOSAL_STREAM = 10
SCORE_STREAM = 11

# Below this IoU with every clean object a region is scored as background.
BACKGROUND_IOU = 0.1
# At or above this IoU the oracle is at its configured confidence.
CONFIDENT_IOU = 0.5
DISTRACTOR_MAX_OBJECTNESS = 0.3
PROBABILITY_FLOOR = 1e-12
MAX_JITTER_ATTEMPTS = 100


class OracleConfigError(ValueError):
    """Oracle fidelity knobs out of range."""

    pass


@dataclass(frozen=True)
class OracleConfig:
    """Fidelity knobs of the simulated detector."""

    proposal_jitter: float = 0.05
    proposals_per_object: int = 10
    distractor_count: int = 20
    classification_accuracy: float = 0.95
    score_temperature: float = 0.5
    regression_shrink: float = 0.8
    seed: int | None = None

    def validate(self, n_classes: int) -> list[str]:
        issues = []
        if self.proposal_jitter < 0:
            issues.append("proposal_jitter must be >= 0")
        if self.proposals_per_object < 1:
            issues.append("proposals_per_object must be >= 1")
        if self.distractor_count < 0:
            issues.append("distractor_count must be >= 0")
        if not (1.0 / n_classes < self.classification_accuracy <= 1.0):
            issues.append(
                f"classification_accuracy must be in (1/{n_classes}, 1], "
                f"got {self.classification_accuracy}"
            )
        if self.score_temperature < 0:
            issues.append("score_temperature must be >= 0")
        if not (0.0 <= self.regression_shrink <= 1.0):
            issues.append("regression_shrink must be in [0, 1]")
        return issues

    @classmethod
    def preset(cls, name: str, **overrides) -> "OracleConfig":
        try:
            base = ORACLE_PRESETS[name]
        except KeyError:
            raise OracleConfigError(
                f"Unknown oracle preset '{name}'; choose from {sorted(ORACLE_PRESETS)}"
            )
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "OracleConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"preset"}
        if unknown:
            raise OracleConfigError(f"Unknown oracle fields: {sorted(unknown)}")
        bad = mistyped_fields(cls, data)
        if bad or not isinstance(data.get("preset", ""), str):
            raise OracleConfigError(f"Oracle fields with invalid types: {bad or ['preset']}")
        base = cls.preset(data["preset"]) if "preset" in data else cls()
        return replace(base, **{k: v for k, v in data.items() if k in known})


ORACLE_PRESETS: dict[str, OracleConfig] = {
    "perfect": OracleConfig(
        proposal_jitter=0.0,
        distractor_count=0,
        classification_accuracy=1.0,
        score_temperature=0.0,
        regression_shrink=1.0,
    ),
    "high": OracleConfig(),
    "medium": OracleConfig(
        proposal_jitter=0.1,
        classification_accuracy=0.8,
        score_temperature=0.7,
        regression_shrink=0.5,
    ),
    "low": OracleConfig(
        proposal_jitter=0.2,
        distractor_count=40,
        classification_accuracy=0.5,
        score_temperature=1.0,
        regression_shrink=0.2,
    ),
}


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    objectness: float


@dataclass(frozen=True)
class ClassScores:
    """Probabilities over n foreground classes followed by one background entry."""

    probabilities: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.probabilities) - 1

    @property
    def background(self) -> float:
        return float(self.probabilities[-1])

    def probability(self, label: int) -> float:
        return float(self.probabilities[label])

    def pseudo_label(self) -> int:
        """Most probable foreground class; ties go to the lower index."""
        return int(np.argmax(self.probabilities[:-1]))

    def passes_gate(self, label: int, t_refine: float = 0.5) -> bool:
        """p(label) > t_refine; at 0.5 this equals p(label) > sum of all other entries."""
        return self.probability(label) > t_refine


def cross_entropy(scores: ClassScores, label: int) -> float:
    """-log p(label), with p floored at 1e-12."""
    return -math.log(max(scores.probability(label), PROBABILITY_FLOOR))


class DetectorResponse:
    """Proposals for one image plus deterministic scoring/regression of any region."""

    def __init__(
        self,
        image: ImageRecord,
        n_classes: int,
        cfg: OracleConfig,
        proposals: tuple[Proposal, ...],
    ):
        self.image_id = image.image_id
        self.truth: tuple[AnnotatedObject, ...] = image.objects
        self.n_classes = n_classes
        self.cfg = cfg
        self.seed = cfg.seed or 0
        self.proposals = proposals

    def nearest(self, box: BoundingBox) -> tuple[AnnotatedObject | None, float]:
        """Clean object of maximal IoU with box (first wins ties)."""
        best, best_iou = None, 0.0
        for obj in self.truth:
            overlap = iou(box, obj.box)
            if overlap > best_iou:
                best, best_iou = obj, overlap
        return best, best_iou

    def score_of(self, box: BoundingBox) -> ClassScores:
        n = self.n_classes
        rng = derive_rng(self.seed, SCORE_STREAM, self.image_id, box_key(box.as_tuple()))
        accuracy = self.cfg.classification_accuracy
        chance = 1.0 / (n + 1)

        target, overlap = self.nearest(box)
        if target is None or overlap < BACKGROUND_IOU:
            peak, confidence = n, accuracy
        else:
            if rng.random() < accuracy:
                peak = target.label
            else:
                wrong = int(rng.integers(n - 1))
                peak = wrong if wrong < target.label else wrong + 1
            quality = min(1.0, (overlap - BACKGROUND_IOU) / (CONFIDENT_IOU - BACKGROUND_IOU))
            confidence = chance + (accuracy - chance) * quality

        confidence = min(confidence, 1.0 - 1e-9)
        logits = rng.normal(0.0, self.cfg.score_temperature, size=n + 1)
        logits[peak] += math.log(confidence / (1.0 - confidence)) + math.log(n)
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        return ClassScores(probs)

    def regress(self, box: BoundingBox) -> BoundingBox:
        """Move box toward its nearest clean object by regression_shrink."""
        target, overlap = self.nearest(box)
        if target is None or overlap < BACKGROUND_IOU:
            return box
        return blend(box, target.box, self.cfg.regression_shrink)


def _jittered(
    box: BoundingBox, jitter: float, rng: np.random.Generator, width: float, height: float
) -> BoundingBox | None:
    if jitter == 0.0:
        return box
    w, h = box.width, box.height
    for _ in range(MAX_JITTER_ATTEMPTS):
        d = rng.normal(0.0, jitter, size=4)
        try:
            return BoundingBox(
                box.x1 + d[0] * w, box.y1 + d[1] * h, box.x2 + d[2] * w, box.y2 + d[3] * h
            ).clamp(width, height)
        except InvalidBoxError:
            continue
    return None


def _distractor(rng: np.random.Generator, width: float, height: float) -> BoundingBox | None:
    bw = rng.uniform(0.05, 0.3) * width
    bh = rng.uniform(0.05, 0.3) * height
    cx = rng.uniform(0.0, width)
    cy = rng.uniform(0.0, height)
    try:
        return BoundingBox(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2).clamp(
            width, height
        )
    except InvalidBoxError:
        return None


def respond(image: ImageRecord, cfg: OracleConfig, n_classes: int) -> DetectorResponse:
    """Proposals for an image whose objects are the clean ground truth.

    Each clean object yields ``proposals_per_object`` jittered copies whose
    objectness is their IoU with the object; distractors get objectness in
    [0, 0.3]. Proposals are sorted by objectness, descending, stable.
    """
    issues = cfg.validate(n_classes)
    if issues:
        raise OracleConfigError("; ".join(issues))

    rng = derive_rng(cfg.seed or 0, PROPOSAL_STREAM, image.image_id)
    proposals: list[Proposal] = []
    for obj in image.objects:
        for _ in range(cfg.proposals_per_object):
            box = _jittered(obj.box, cfg.proposal_jitter, rng, image.width, image.height)
            if box is not None:
                proposals.append(Proposal(box, iou(box, obj.box)))
    for _ in range(cfg.distractor_count):
        box = _distractor(rng, image.width, image.height)
        objectness = float(rng.uniform(0.0, DISTRACTOR_MAX_OBJECTNESS))
        if box is not None:
            proposals.append(Proposal(box, objectness))

    proposals.sort(key=lambda p: -p.objectness)
    logger.debug(f"Image {image.image_id}: {len(proposals)} proposals")
    return DetectorResponse(image, n_classes, cfg, tuple(proposals))

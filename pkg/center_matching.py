"""Center matching of region proposals to possibly distorted annotated boxes."""

import logging
from dataclasses import dataclass

from core_types import AnnotatedObject, BoundingBox
from geometry import DEFAULT_GAMMA, blend, fitness
from sim_detector import DetectorResponse, Proposal

logger = logging.getLogger(__name__)

TOP_PROPOSALS = 100
MAX_CANDIDATES = 10


@dataclass(frozen=True)
class MatchParams:
    t_cm: float = 0.9
    alpha: float = 0.2
    gamma: float = DEFAULT_GAMMA
    top_proposals: int = TOP_PROPOSALS
    max_candidates: int = MAX_CANDIDATES


@dataclass(frozen=True)
class MatchResult:
    """Initially corrected box b* and the candidate proposals behind it."""

    object_id: int | None
    b_star: BoundingBox
    candidates: tuple[Proposal, ...]
    matched: bool

    @property
    def best(self) -> Proposal | None:
        return self.candidates[0] if self.candidates else None


def match(
    b: BoundingBox,
    proposals: tuple[Proposal, ...] | list[Proposal],
    t_cm: float = 0.9,
    alpha: float = 0.2,
    gamma: float = DEFAULT_GAMMA,
    object_id: int | None = None,
    top_proposals: int = TOP_PROPOSALS,
    max_candidates: int = MAX_CANDIDATES,
) -> MatchResult:
    """Match one annotated box against proposals sorted by objectness.

    Only the first ``top_proposals`` entries are considered; of those, the ones
    with fitness above ``t_cm`` are kept, and the best ``max_candidates`` of
    them become candidates. b* blends b toward the best candidate by alpha.

    Candidates are ordered by objectness, then by fitness, then by position,
    so proposals of a neighbouring object with the same objectness rank behind
    proposals that fit b better.
    """
    passing = []
    for index, proposal in enumerate(proposals[:top_proposals]):
        fit = fitness(b, proposal.box, gamma)
        if fit > t_cm:
            passing.append((-proposal.objectness, -fit, index, proposal))
    passing.sort(key=lambda entry: entry[:3])
    candidates = [entry[3] for entry in passing[:max_candidates]]

    if not candidates:
        return MatchResult(object_id, b, (), False)

    b_star = blend(b, candidates[0].box, alpha)
    return MatchResult(object_id, b_star, tuple(candidates), True)


def match_image(
    objects: tuple[AnnotatedObject, ...] | list[AnnotatedObject],
    response: DetectorResponse,
    params: MatchParams,
) -> list[MatchResult]:
    """Match every object independently against the image's shared proposal pool."""
    results = [
        match(
            obj.box,
            response.proposals,
            t_cm=params.t_cm,
            alpha=params.alpha,
            gamma=params.gamma,
            object_id=obj.object_id,
            top_proposals=params.top_proposals,
            max_candidates=params.max_candidates,
        )
        for obj in objects
    ]
    unmatched = sum(1 for r in results if not r.matched)
    if unmatched:
        logger.debug(f"Image {response.image_id}: {unmatched}/{len(results)} objects unmatched")
    return results

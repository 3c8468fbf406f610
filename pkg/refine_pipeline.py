"""Per-epoch annotation refinement: center matching, noise judgment, pseudo-labels, box averaging.

For every object the pre-forward stage matches proposals, scores b* and the
candidates, and regresses the candidates. The judgment stage then runs in a
fixed object order against one shared loss queue, so results do not depend
on how many worker threads did the pre-forward work.
"""

import csv
import json
import logging
from collections import Counter
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from center_matching import MatchResult, match
from cinj import CLEAN, DEFERRED, NOISY, Judgment, LossQueue
from config import ConfigError, ConfigManager, PipelineConfig
from core_types import AnnotatedObject, BoundingBox, Dataset, ImageRecord, load_dataset, save_dataset
from geometry import average2, average3
from metrics import confusion, corloc_report, loss_histogram
from noise_injector import CorruptionRecord, load_record
from sim_detector import ClassScores, DetectorResponse, OracleConfig, cross_entropy, respond
from utils import CallbackLogger, EpochTimer, epoch_filename

logger = logging.getLogger(__name__)

KEPT_CLEAN = "kept-clean"
RELABELED = "relabeled"
DISCARDED = "discarded"
UNMATCHED = "unmatched"


@dataclass(frozen=True)
class PreForward:
    """Oracle queries for one object: scores of b*, and of each candidate with its regression."""

    match: MatchResult
    b_star_scores: ClassScores
    candidate_scores: tuple[ClassScores, ...]
    regressed: tuple[BoundingBox, ...]


@dataclass(frozen=True)
class RefinementOutcome:
    object_id: int
    image_id: int
    epoch: int
    input_label: int
    input_box: BoundingBox
    final_label: int
    final_box: BoundingBox
    b_star: BoundingBox
    candidate_count: int
    loss: float
    verdict: str
    threshold_used: float | None
    status: str
    pseudo_label: int | None = None
    pseudo_confidence: float | None = None

    @property
    def discarded(self) -> bool:
        return self.status == DISCARDED

    @property
    def label_changed(self) -> bool:
        return not self.discarded and self.final_label != self.input_label

    def to_row(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "object_id": self.object_id,
            "image_id": self.image_id,
            "status": self.status,
            "verdict": self.verdict,
            "loss": repr(self.loss),
            "threshold": "" if self.threshold_used is None else repr(self.threshold_used),
            "input_label": self.input_label,
            "final_label": self.final_label,
            "pseudo_label": "" if self.pseudo_label is None else self.pseudo_label,
            "candidates": self.candidate_count,
            "input_box": " ".join(repr(c) for c in self.input_box.as_tuple()),
            "b_star": " ".join(repr(c) for c in self.b_star.as_tuple()),
            "final_box": " ".join(repr(c) for c in self.final_box.as_tuple()),
        }


def pre_forward(
    obj: AnnotatedObject, response: DetectorResponse, cfg: PipelineConfig
) -> PreForward:
    """Center matching plus every oracle query the judgment stage needs."""
    params = cfg.match_params()
    if cfg.box_refinement == "off":
        params = replace(params, alpha=0.0)
    result = match(
        obj.box,
        response.proposals,
        t_cm=params.t_cm,
        alpha=params.alpha,
        gamma=params.gamma,
        object_id=obj.object_id,
        top_proposals=params.top_proposals,
        max_candidates=params.max_candidates,
    )
    return PreForward(
        match=result,
        b_star_scores=response.score_of(result.b_star),
        candidate_scores=tuple(response.score_of(p.box) for p in result.candidates),
        regressed=tuple(response.regress(p.box) for p in result.candidates),
    )


def final_box(pre: PreForward, label: int) -> BoundingBox:
    """Mean of b* and the regressions of the two candidates most confident in label."""
    b_star = pre.match.b_star
    ranked = sorted(
        range(len(pre.candidate_scores)),
        key=lambda i: -pre.candidate_scores[i].probability(label),
    )
    if len(ranked) >= 2:
        return average3(b_star, pre.regressed[ranked[0]], pre.regressed[ranked[1]])
    if len(ranked) == 1:
        return average2(b_star, pre.regressed[ranked[0]])
    return b_star


def judge_and_refine(
    obj: AnnotatedObject,
    pre: PreForward,
    queue: LossQueue,
    cfg: PipelineConfig,
    epoch: int = 0,
    warm_up: bool = False,
) -> RefinementOutcome:
    """Judge the label, pick the final label and box, then push the loss."""
    scores = pre.b_star_scores
    loss = cross_entropy(scores, obj.label)
    if warm_up:
        judgment = Judgment(obj.object_id, loss, None, DEFERRED)
    else:
        judgment = queue.judge(obj.object_id, loss)

    pseudo = scores.pseudo_label()
    pseudo_conf = scores.probability(pseudo)
    gate = scores.passes_gate(pseudo, cfg.t_refine)
    mode = "off" if warm_up else cfg.label_refinement

    label, status = obj.label, KEPT_CLEAN
    if mode == "full" and judgment.verdict == NOISY:
        if not gate:
            status = DISCARDED
        elif pseudo != obj.label:
            label, status = pseudo, RELABELED
    elif mode == "judge_only" and judgment.verdict == NOISY:
        status = DISCARDED
    elif mode == "relabel_all" and gate and pseudo != obj.label:
        label, status = pseudo, RELABELED

    if status == KEPT_CLEAN and not pre.match.matched:
        status = UNMATCHED

    box_mode = cfg.box_refinement
    if warm_up and not cfg.refine_boxes_during_warmup:
        box_mode = "off"
    if box_mode == "full":
        # discarded objects rank candidates by their best-guess class
        box = final_box(pre, pseudo if status == DISCARDED else label)
    elif box_mode == "center_matching":
        box = pre.match.b_star
    else:
        box = obj.box

    queue.push(obj.object_id, loss)
    logger.debug(
        f"Object {obj.object_id}: loss={loss:.4f} verdict={judgment.verdict} status={status}"
    )
    return RefinementOutcome(
        object_id=obj.object_id,
        image_id=obj.image_id,
        epoch=epoch,
        input_label=obj.label,
        input_box=obj.box,
        final_label=label,
        final_box=box,
        b_star=pre.match.b_star,
        candidate_count=len(pre.match.candidates),
        loss=loss,
        verdict=judgment.verdict,
        threshold_used=judgment.threshold_used,
        status=status,
        pseudo_label=pseudo,
        pseudo_confidence=pseudo_conf,
    )


def refine_object(
    obj: AnnotatedObject,
    response: DetectorResponse,
    queue: LossQueue,
    cfg: PipelineConfig,
    epoch: int = 0,
    warm_up: bool = False,
) -> RefinementOutcome:
    """Center matching, judgment and refinement of one object against its image's response."""
    return judge_and_refine(obj, pre_forward(obj, response, cfg), queue, cfg, epoch, warm_up)


def apply_outcomes(ds: Dataset, outcomes: list[RefinementOutcome], drop_discarded: bool) -> Dataset:
    """Write final labels/boxes back; discarded objects are dropped or kept unchanged."""
    by_id = {o.object_id: o for o in outcomes}
    sizes = {img.image_id: (img.width, img.height) for img in ds.images}

    def update(obj: AnnotatedObject) -> AnnotatedObject | None:
        o = by_id.get(obj.object_id)
        if o is None:
            return obj
        if o.discarded:
            if drop_discarded:
                return None
            return replace(obj, flags=replace(obj.flags, judged_noisy=True, discarded=True))
        # emitted boxes stay inside their image
        box = o.final_box.clamp(*sizes[obj.image_id])
        return replace(
            obj,
            label=o.final_label,
            box=box,
            flags=replace(
                obj.flags,
                judged_noisy=o.verdict == NOISY,
                refined=o.final_label != obj.label or box != obj.box,
                discarded=False,
            ),
        )

    return ds.map_objects(update)


def carry_forward(ds: Dataset, outcomes: list[RefinementOutcome]) -> Dataset:
    """Next epoch's annotations: refined objects updated, discarded ones kept as they were."""
    return apply_outcomes(ds, outcomes, drop_discarded=False)


def _clean_image(truth: dict[int, ImageRecord], image: ImageRecord) -> ImageRecord:
    clean = truth.get(image.image_id)
    if clean is None:
        return replace(image, objects=())
    return clean


def run_epoch(
    ds: Dataset,
    truth: Dataset,
    oracle_cfg: OracleConfig,
    queue: LossQueue,
    cfg: PipelineConfig,
    epoch: int = 0,
    warm_up: bool = False,
) -> tuple[Dataset, list[RefinementOutcome]]:
    """Refine every object in image order; returns the training dataset and the outcome log."""
    truth_images = truth.image_map()
    jobs = [(image, obj) for image in ds.images for obj in image.objects]

    def oracle(image: ImageRecord) -> DetectorResponse:
        return respond(_clean_image(truth_images, image), oracle_cfg, ds.n_classes)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            responses = dict(zip((img.image_id for img in ds.images), pool.map(oracle, ds.images)))
            pres = list(
                pool.map(lambda job: pre_forward(job[1], responses[job[0].image_id], cfg), jobs)
            )
        outcomes = [
            judge_and_refine(obj, pre, queue, cfg, epoch, warm_up)
            for (_, obj), pre in zip(jobs, pres)
        ]
    else:
        responses = {img.image_id: oracle(img) for img in ds.images}
        outcomes = [
            refine_object(obj, responses[image.image_id], queue, cfg, epoch, warm_up)
            for image, obj in jobs
        ]

    emitted = apply_outcomes(ds, outcomes, drop_discarded=True)
    meta = json.loads(json.dumps(emitted.noise_meta))
    meta["refinement"] = {
        "epoch": epoch,
        "warm_up": warm_up,
        "label_refinement": cfg.label_refinement,
        "box_refinement": cfg.box_refinement,
    }
    return replace(emitted, noise_meta=meta), outcomes


def summarize_epoch(
    epoch: int, warm_up: bool, outcomes: list[RefinementOutcome], queue: LossQueue
) -> dict[str, Any]:
    statuses = Counter(o.status for o in outcomes)
    verdicts = Counter(o.verdict for o in outcomes)
    losses = [o.loss for o in outcomes]
    return {
        "epoch": epoch,
        "warm_up": warm_up,
        "objects": len(outcomes),
        "kept_clean": statuses[KEPT_CLEAN],
        "relabeled": statuses[RELABELED],
        "discarded": statuses[DISCARDED],
        "unmatched": statuses[UNMATCHED],
        "judged_noisy": verdicts[NOISY],
        "judged_clean": verdicts[CLEAN],
        "deferred": verdicts[DEFERRED],
        "labels_changed": sum(1 for o in outcomes if o.label_changed),
        "boxes_changed": sum(1 for o in outcomes if not o.discarded and o.final_box != o.input_box),
        "mean_loss": sum(losses) / len(losses) if losses else None,
        "threshold": queue.threshold() if queue.is_full else None,
    }


def write_outcomes_csv(outcomes: list[RefinementOutcome], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = None
        for o in outcomes:
            row = o.to_row()
            if writer is None:
                writer = csv.DictWriter(f, fieldnames=list(row))
                writer.writeheader()
            writer.writerow(row)


@dataclass
class RunReport:
    config: dict[str, Any]
    inputs: dict[str, str | None]
    noise_meta: dict[str, Any]
    epochs: list[dict[str, Any]] = field(default_factory=list)
    metrics: dict[str, Any] | None = None
    evaluation_available: bool = False
    unavailable_reason: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


def _oracle_truth(
    noisy: Dataset, clean: Dataset | None, record: CorruptionRecord | None, log: CallbackLogger
) -> Dataset:
    if clean is not None:
        return clean
    if record is not None:
        log.info("Oracle truth reconstructed from the noisy annotations and the corruption record")
        return record.restore_clean(noisy)
    log.warning("No clean dataset or record: the oracle treats the noisy annotations as truth")
    return noisy


def evaluate_run(
    noisy: Dataset,
    clean: Dataset,
    record: CorruptionRecord | None,
    outcomes: list[RefinementOutcome],
    cfg: PipelineConfig,
) -> tuple[dict[str, Any], Any]:
    """CorLoc at three stages and judgment confusion for the last epoch."""
    clean_labels = {o.object_id: o.label for o in clean.objects()}
    report = corloc_report(
        noisy_boxes={o.object_id: o.box for o in noisy.objects()},
        cm_boxes={o.object_id: o.b_star for o in outcomes},
        final_boxes={o.object_id: o.final_box for o in outcomes},
        clean_ds=clean,
        threshold=cfg.corloc_iou,
    )
    judgment = confusion(outcomes, record, clean_labels)
    histogram = loss_histogram(outcomes, record, cfg.histogram_bins, clean_labels)
    metrics = {
        "corloc": report.to_dict(),
        "judgment": judgment.to_dict(),
        "loss_histogram": {
            "edges": histogram.edges,
            "clean": histogram.clean_counts,
            "noisy": histogram.noisy_counts,
        },
        "notes": "residual_noise_rate excludes discarded objects from numerator and denominator",
    }
    return metrics, histogram


def run(
    clean_path: str | Path | None,
    noisy_path: str | Path,
    record_path: str | Path | None,
    cfg: PipelineConfig,
    output_dir: str | Path,
    log_callback: Callable[[str], None] | None = None,
) -> RunReport:
    """Warm-up plus refinement epochs over a noisy dataset, with outputs and metrics on disk."""
    log = CallbackLogger(logger, log_callback)
    manager = ConfigManager()
    manager.config = cfg
    cfg = manager.validated()
    if cfg.seed is None:
        raise ConfigError("A seed is required for a refinement run")

    output_dir = Path(output_dir)
    noisy = load_dataset(noisy_path)
    clean = load_dataset(clean_path) if clean_path else None
    record = load_record(record_path) if record_path else None
    truth = _oracle_truth(noisy, clean, record, log)

    report = RunReport(
        config=cfg.to_dict(),
        inputs={
            "clean": str(clean_path) if clean_path else None,
            "noisy": str(noisy_path),
            "record": str(record_path) if record_path else None,
        },
        noise_meta=noisy.noise_meta,
    )

    queue = LossQueue(cfg.queue_length, cfg.acceptance_rate)
    current = noisy
    emitted, outcomes = noisy, []
    for epoch in range(cfg.total_epochs):
        warm_up = epoch < cfg.warm_up_epochs
        with EpochTimer() as timer:
            emitted, outcomes = run_epoch(
                current, truth, cfg.oracle_for_epoch(epoch), queue, cfg, epoch + 1, warm_up
            )
        path = epoch_filename(output_dir, epoch + 1)
        save_dataset(emitted, path)
        report.outputs[f"epoch_{epoch + 1}"] = path.name

        summary = summarize_epoch(epoch + 1, warm_up, outcomes, queue)
        report.epochs.append(summary)
        log.info(
            f"Epoch {epoch + 1}/{cfg.total_epochs}{' (warm-up)' if warm_up else ''}: "
            f"{summary['relabeled']} relabeled, {summary['discarded']} discarded, "
            f"{summary['unmatched']} unmatched in {timer.elapsed:.2f}s"
        )
        if cfg.carry_annotations:
            current = carry_forward(current, outcomes)

    save_dataset(emitted, output_dir / "refined.json")
    report.outputs["refined"] = "refined.json"
    queue.save(output_dir / "queue.json")
    report.outputs["queue"] = "queue.json"

    if cfg.write_outcome_csv:
        write_outcomes_csv(outcomes, output_dir / "outcomes.csv")
        report.outputs["outcomes"] = "outcomes.csv"

    if clean is None:
        report.unavailable_reason = "no clean dataset supplied"
        log.warning("Evaluation unavailable: no clean dataset supplied")
    else:
        report.metrics, histogram = evaluate_run(noisy, clean, record, outcomes, cfg)
        report.evaluation_available = True
        histogram.to_csv(output_dir / "loss_histogram.csv")
        report.outputs["loss_histogram"] = "loss_histogram.csv"

    report.save(output_dir / "report.json")
    log.info(f"Run report written to {output_dir / 'report.json'}")
    return report

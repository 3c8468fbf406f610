import json
import statistics
from dataclasses import replace

import numpy as np
import pytest

from center_matching import MatchResult
from cinj import CLEAN, DEFERRED, NOISY, LossQueue
from config import ConfigError, PipelineConfig
from core_types import AnnotatedObject, BoundingBox, ImageRecord, load_dataset, save_dataset
from geometry import average2, average3
from noise_injector import BoxNoiseSpec, LabelNoiseSpec, compose_corruptions, save_record
from refine_pipeline import (
    DISCARDED,
    KEPT_CLEAN,
    RELABELED,
    UNMATCHED,
    PreForward,
    carry_forward,
    final_box,
    judge_and_refine,
    refine_object,
    run,
    run_epoch,
)
from sim_detector import ClassScores, OracleConfig, Proposal, respond
from synthetic import make_synthetic_dataset

BOX = BoundingBox(10.0, 10.0, 50.0, 50.0)
B_STAR = BoundingBox(11.0, 10.0, 51.0, 50.0)


def _scores(*probs):
    return ClassScores(np.array(probs, dtype=np.float64))


def _pre(b_star_scores, candidate_scores=(), regressed=(), matched=True):
    candidates = tuple(Proposal(r, 0.9 - 0.1 * i) for i, r in enumerate(regressed))
    return PreForward(
        match=MatchResult(1, B_STAR if matched else BOX, candidates, matched),
        b_star_scores=b_star_scores,
        candidate_scores=tuple(candidate_scores),
        regressed=tuple(regressed),
    )


def _obj(label=0):
    return AnnotatedObject(1, 1, BOX, label)


def _full_queue(threshold_loss=1.0, capacity=4, rate=0.5):
    queue = LossQueue(capacity, rate)
    for i in range(capacity):
        queue.push(100 + i, threshold_loss if i < capacity * rate else 10.0)
    return queue


# label y=0 gets p=0.05, pseudo-label 1 at 0.9
CONFIDENT_OTHER = _scores(0.05, 0.9, 0.03, 0.02)
# pseudo-label 1 at 0.4, below the gate
UNSURE_OTHER = _scores(0.05, 0.4, 0.35, 0.2)
AGREES = _scores(0.9, 0.05, 0.03, 0.02)


def test_noisy_and_confident_is_relabeled():
    outcome = judge_and_refine(_obj(), _pre(CONFIDENT_OTHER), _full_queue(), PipelineConfig())
    assert outcome.verdict == NOISY
    assert outcome.status == RELABELED
    assert outcome.final_label == 1
    assert outcome.pseudo_label == 1


def test_noisy_and_unsure_is_discarded():
    outcome = judge_and_refine(_obj(), _pre(UNSURE_OTHER), _full_queue(), PipelineConfig())
    assert outcome.status == DISCARDED
    assert outcome.discarded
    assert outcome.final_label == 0


def test_clean_verdict_keeps_label():
    outcome = judge_and_refine(_obj(), _pre(AGREES), _full_queue(), PipelineConfig())
    assert outcome.verdict == CLEAN
    assert outcome.status == KEPT_CLEAN
    assert outcome.final_label == 0


def test_noisy_verdict_with_agreeing_pseudo_label_keeps_label():
    queue = _full_queue(threshold_loss=0.01)
    outcome = judge_and_refine(_obj(), _pre(AGREES), queue, PipelineConfig())
    assert outcome.verdict == NOISY
    assert (outcome.status, outcome.final_label) == (KEPT_CLEAN, 0)

    cfg = PipelineConfig(label_refinement="relabel_all")
    outcome = judge_and_refine(_obj(), _pre(AGREES), LossQueue(4, 0.5), cfg)
    assert (outcome.status, outcome.final_label) == (KEPT_CLEAN, 0)


def test_unmatched_status():
    outcome = judge_and_refine(
        _obj(), _pre(AGREES, matched=False), _full_queue(), PipelineConfig()
    )
    assert outcome.status == UNMATCHED
    assert outcome.final_box == BOX


def test_warm_up_defers_and_pushes():
    queue = LossQueue(4, 0.5)
    outcome = judge_and_refine(_obj(), _pre(CONFIDENT_OTHER), queue, PipelineConfig(), warm_up=True)
    assert outcome.verdict == DEFERRED
    assert outcome.status == KEPT_CLEAN
    assert outcome.final_label == 0
    assert len(queue) == 1
    assert queue.entries[0].loss == outcome.loss


def test_judging_happens_before_push():
    """The object's own loss is not in the window it is judged against"""
    queue = LossQueue(2, 0.5)
    queue.push(1, 0.1)
    outcome = judge_and_refine(_obj(), _pre(CONFIDENT_OTHER), queue, PipelineConfig())
    assert outcome.verdict == DEFERRED
    assert queue.is_full


def test_ablation_modes():
    cfg = PipelineConfig(label_refinement="judge_only")
    assert judge_and_refine(_obj(), _pre(CONFIDENT_OTHER), _full_queue(), cfg).status == DISCARDED

    cfg = PipelineConfig(label_refinement="off")
    outcome = judge_and_refine(_obj(), _pre(CONFIDENT_OTHER), _full_queue(), cfg)
    assert (outcome.status, outcome.final_label) == (KEPT_CLEAN, 0)

    cfg = PipelineConfig(label_refinement="relabel_all")
    queue = LossQueue(4, 0.5)
    outcome = judge_and_refine(_obj(), _pre(CONFIDENT_OTHER), queue, cfg)
    assert outcome.verdict == DEFERRED
    assert outcome.final_label == 1


def test_final_box_uses_two_most_confident_candidates():
    r1 = BoundingBox(12.0, 12.0, 52.0, 52.0)
    r2 = BoundingBox(8.0, 9.0, 49.0, 51.0)
    r3 = BoundingBox(30.0, 30.0, 60.0, 60.0)
    pre = _pre(
        AGREES,
        candidate_scores=(
            _scores(0.2, 0.7, 0.05, 0.05),
            _scores(0.8, 0.1, 0.05, 0.05),
            _scores(0.7, 0.2, 0.05, 0.05),
        ),
        regressed=(r3, r1, r2),
    )
    assert final_box(pre, 0) == average3(B_STAR, r1, r2)
    assert final_box(pre, 1) == average3(B_STAR, r3, r2)


def test_final_box_fallbacks():
    r1 = BoundingBox(12.0, 12.0, 52.0, 52.0)
    one = _pre(AGREES, candidate_scores=(AGREES,), regressed=(r1,))
    assert final_box(one, 0) == average2(B_STAR, r1)
    assert final_box(_pre(AGREES), 0) == B_STAR


def test_box_refinement_modes():
    r1 = BoundingBox(12.0, 12.0, 52.0, 52.0)
    pre = _pre(AGREES, candidate_scores=(AGREES,), regressed=(r1,))
    cm = judge_and_refine(_obj(), pre, _full_queue(), PipelineConfig(box_refinement="center_matching"))
    assert cm.final_box == B_STAR
    off = judge_and_refine(_obj(), pre, _full_queue(), PipelineConfig(box_refinement="off"))
    assert off.final_box == BOX


def test_discarded_object_box_ranked_by_pseudo_label():
    good = BoundingBox(12.0, 12.0, 52.0, 52.0)
    bad = BoundingBox(30.0, 30.0, 60.0, 60.0)
    pre = _pre(
        UNSURE_OTHER,
        candidate_scores=(_scores(0.9, 0.05, 0.03, 0.02), _scores(0.05, 0.9, 0.03, 0.02)),
        regressed=(bad, good),
    )
    outcome = judge_and_refine(_obj(), pre, _full_queue(), PipelineConfig())
    assert outcome.status == DISCARDED
    assert outcome.final_box == average3(B_STAR, good, bad)


def _single_object_image(label):
    box = BoundingBox(20.0, 30.0, 60.0, 80.0)
    return ImageRecord(1, 100.0, 100.0, (AnnotatedObject(1, 1, box, label),))


def _low_loss_queue():
    queue = LossQueue(4, 0.5)
    for i in range(4):
        queue.push(100 + i, 0.01)
    return queue


def test_refine_object_perfect_oracle_keeps_clean_object():
    image = _single_object_image(2)
    response = respond(image, OracleConfig.preset("perfect", seed=1), 5)
    obj = image.objects[0]
    outcome = refine_object(obj, response, _low_loss_queue(), PipelineConfig())
    assert outcome.status == KEPT_CLEAN
    assert outcome.final_label == 2
    assert np.allclose(outcome.final_box.as_tuple(), obj.box.as_tuple(), rtol=0.0, atol=1e-9)


def test_refine_object_relabels_corrupted_label():
    image = _single_object_image(2)
    response = respond(image, OracleConfig.preset("perfect", seed=1), 5)
    noisy = replace(image.objects[0], label=0)
    outcome = refine_object(noisy, response, _low_loss_queue(), PipelineConfig())
    assert outcome.verdict == NOISY
    assert (outcome.status, outcome.final_label) == (RELABELED, 2)


def test_refine_object_discards_when_oracle_unsure():
    image = _single_object_image(2)
    cfg = OracleConfig.preset("perfect", classification_accuracy=0.21, seed=1)
    noisy = replace(image.objects[0], label=0)
    outcome = refine_object(noisy, respond(image, cfg, 5), _low_loss_queue(), PipelineConfig())
    assert outcome.verdict == NOISY
    assert outcome.status == DISCARDED


def test_perfect_oracle_on_clean_data_is_a_fixed_point(synthetic_1000):
    cfg = PipelineConfig(seed=0, oracle_schedule=[OracleConfig.preset("perfect")])
    queue = LossQueue(cfg.queue_length, cfg.acceptance_rate)
    warmed, _ = run_epoch(
        synthetic_1000, synthetic_1000, cfg.oracle_for_epoch(0), queue, cfg, epoch=0, warm_up=True
    )
    emitted, outcomes = run_epoch(
        warmed, synthetic_1000, cfg.oracle_for_epoch(1), queue, cfg, epoch=1
    )
    assert {o.status for o in outcomes} == {KEPT_CLEAN}
    assert not any(o.discarded for o in outcomes)
    assert emitted.object_count() == synthetic_1000.object_count()
    clean = synthetic_1000.object_map()
    for obj in emitted.objects():
        assert obj.label == clean[obj.object_id].label
        assert np.allclose(
            obj.box.as_tuple(), clean[obj.object_id].box.as_tuple(), rtol=0.0, atol=1e-9
        )


@pytest.fixture(scope="module")
def noisy_setup():
    clean = make_synthetic_dataset(30, 8, 10, seed=3)
    noisy, record = compose_corruptions(
        clean, LabelNoiseSpec("symmetric", 0.4), BoxNoiseSpec("uniform", 0.2), seed=3
    )
    return clean, noisy, record


def test_run_epoch_drops_discarded_and_tags_meta(noisy_setup):
    clean, noisy, _ = noisy_setup
    cfg = PipelineConfig(seed=1, queue_length=32, acceptance_rate=0.6)
    queue = LossQueue(32, 0.6)
    emitted, outcomes = run_epoch(noisy, clean, cfg.oracle_for_epoch(0), queue, cfg, epoch=1)
    assert [o.object_id for o in outcomes] == [o.object_id for o in noisy.objects()]
    discarded = {o.object_id for o in outcomes if o.discarded}
    assert {o.object_id for o in emitted.objects()} == set(noisy.object_map()) - discarded
    assert emitted.noise_meta["refinement"]["epoch"] == 1
    assert emitted.noise_meta["corruptions"] == noisy.noise_meta["corruptions"]
    assert len(queue) == 32


def test_threads_do_not_change_results(noisy_setup):
    clean, noisy, _ = noisy_setup
    results = []
    for threads in (1, 4):
        cfg = PipelineConfig(seed=1, queue_length=32, acceptance_rate=0.6, threads=threads)
        queue = LossQueue(32, 0.6)
        emitted, outcomes = run_epoch(noisy, clean, cfg.oracle_for_epoch(0), queue, cfg)
        results.append((emitted, outcomes, queue.to_dict()))
    assert results[0] == results[1]


def test_carry_forward_keeps_discarded(noisy_setup):
    clean, noisy, _ = noisy_setup
    cfg = PipelineConfig(seed=2, queue_length=16, acceptance_rate=0.5)
    _, outcomes = run_epoch(noisy, clean, cfg.oracle_for_epoch(0), LossQueue(16, 0.5), cfg)
    carried = carry_forward(noisy, outcomes)
    assert carried.object_count() == noisy.object_count()
    by_id = carried.object_map()
    for o in outcomes:
        if o.discarded:
            assert by_id[o.object_id].label == o.input_label
            assert by_id[o.object_id].flags.discarded
        else:
            assert by_id[o.object_id].box == o.final_box


def _write_inputs(tmp_path, clean, noisy, record):
    paths = {name: tmp_path / f"{name}.json" for name in ("clean", "noisy", "record")}
    save_dataset(clean, paths["clean"])
    save_dataset(noisy, paths["noisy"])
    save_record(record, paths["record"])
    return paths


def test_run_writes_outputs(tmp_path, noisy_setup):
    paths = _write_inputs(tmp_path, *noisy_setup)
    cfg = PipelineConfig(seed=5, queue_length=32, acceptance_rate=0.6, epochs=2, write_outcome_csv=True)
    messages = []
    report = run(paths["clean"], paths["noisy"], paths["record"], cfg, tmp_path / "out", messages.append)
    out = tmp_path / "out"
    for name in ("refined_epoch_001.json", "refined_epoch_002.json", "refined_epoch_003.json",
                 "refined.json", "report.json", "queue.json", "loss_histogram.csv", "outcomes.csv"):
        assert (out / name).exists(), name
    assert report.evaluation_available
    assert [e["warm_up"] for e in report.epochs] == [True, False, False]
    assert report.epochs[0]["judged_noisy"] == 0
    assert len(messages) >= 3
    saved = json.loads((out / "report.json").read_text())
    assert saved["metrics"]["judgment"]["residual_excludes_discarded"] is True
    assert load_dataset(out / "refined.json") == load_dataset(out / "refined_epoch_003.json")


def test_run_is_reproducible(tmp_path, noisy_setup):
    paths = _write_inputs(tmp_path, *noisy_setup)
    cfg = PipelineConfig(seed=5, queue_length=32, acceptance_rate=0.6)
    run(paths["clean"], paths["noisy"], None, cfg, tmp_path / "a")
    run(paths["clean"], paths["noisy"], None, cfg, tmp_path / "b")
    for name in ("refined.json", "queue.json", "loss_histogram.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_without_clean(tmp_path, noisy_setup):
    paths = _write_inputs(tmp_path, *noisy_setup)
    cfg = PipelineConfig(seed=5, queue_length=32, acceptance_rate=0.6)
    report = run(None, paths["noisy"], paths["record"], cfg, tmp_path / "out")
    assert not report.evaluation_available
    assert report.metrics is None
    assert report.unavailable_reason
    assert (tmp_path / "out" / "refined.json").exists()
    assert not (tmp_path / "out" / "loss_histogram.csv").exists()


def test_run_requires_seed(tmp_path, noisy_setup):
    paths = _write_inputs(tmp_path, *noisy_setup)
    with pytest.raises(ConfigError):
        run(paths["clean"], paths["noisy"], None, PipelineConfig(), tmp_path / "out")


def _benchmark_run(tmp_path, synthetic_1000, seed, **overrides):
    noisy, record = compose_corruptions(
        synthetic_1000, LabelNoiseSpec("symmetric", 0.4), BoxNoiseSpec("uniform", 0.2), seed=seed
    )
    run_dir = tmp_path / f"run_{seed}_{len(overrides)}_{'_'.join(map(str, overrides.values()))}"
    paths = _write_inputs(run_dir, synthetic_1000, noisy, record)
    cfg = replace(
        PipelineConfig(
            seed=seed,
            acceptance_rate=0.6,
            alpha=0.2,
            warm_up_epochs=1,
            epochs=1,
            oracle_schedule=[OracleConfig.preset("high")],
        ),
        **overrides,
    )
    return run(paths["clean"], paths["noisy"], paths["record"], cfg, run_dir / "out").metrics


@pytest.fixture(scope="module")
def benchmark_metrics(synthetic_1000, tmp_path_factory):
    base = tmp_path_factory.mktemp("benchmark")
    return [_benchmark_run(base, synthetic_1000, seed) for seed in range(1, 6)]


def test_end_to_end_label_noise_reduction(benchmark_metrics):
    """40% symmetric label noise drops to at most 15% residual (median over 5 seeds)"""
    residuals = [m["judgment"]["residual_noise_rate"] for m in benchmark_metrics]
    assert statistics.median(residuals) <= 0.15


def test_end_to_end_corloc_ordering(benchmark_metrics):
    ordered = 0
    for m in benchmark_metrics:
        c = m["corloc"]
        ordered += c["corloc_final"] > c["corloc_cm"] > c["corloc_noisy"]
        assert c["corloc_final"] - c["corloc_noisy"] >= 0.15
    assert ordered >= 4


def test_hyperparameter_robustness(tmp_path, synthetic_1000):
    """Residual noise barely moves across T_CM and queue length sweeps"""
    residuals = []
    for t_cm in (0.8, 0.85, 0.9, 0.95):
        metrics = _benchmark_run(tmp_path, synthetic_1000, 1, t_cm=t_cm)
        residuals.append(metrics["judgment"]["residual_noise_rate"])
    for n in (64, 128, 256, 512):
        metrics = _benchmark_run(tmp_path, synthetic_1000, 1, queue_length=n)
        residuals.append(metrics["judgment"]["residual_noise_rate"])
    assert max(residuals) - min(residuals) < 0.05

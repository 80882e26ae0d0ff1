"""Tests for AP/mAP, detection extraction, the weight sweep and the ablation table."""

import numpy as np
import pytest

from context_stats import CategorySpace
from crf_engine import CrfWeights, ProposalSet
from evaluation import (
    DetectionRecord,
    GroundTruthObject,
    GroundTruthSet,
    ImageAnnotations,
    Interpolation,
    RescoreInputs,
    ablation_table,
    average_precision,
    evaluate_proposals,
    extract_detections,
    mean_average_precision,
    sign_changes,
    sweep_weights,
    top1_accuracy,
)
from geometry import BoundingBox, ImageFrame

FRAME = ImageFrame(100.0, 100.0)
CATS = CategorySpace(("cat", "dog"))
GT_BOX = BoundingBox(10, 10, 30, 30)
FAR_BOX = BoundingBox(60, 60, 90, 90)


def _truth(*images):
    return GroundTruthSet(CATS, {im.image_id: im for im in images})


def _image(image_id, *objects):
    return ImageAnnotations(image_id, FRAME, tuple(objects))


def _det(label, box, conf, image_id="a", index=0):
    return DetectionRecord(image_id, label, box, conf, index)


def test_perfect_single_detection():
    truth = _truth(_image("a", GroundTruthObject(1, GT_BOX)))
    result = average_precision([_det(1, GT_BOX, 0.9)], truth, 1)
    assert result.ap == 1.0
    assert (result.tp, result.fp, result.npos) == (1, 0, 1)


def test_false_positive_ranked_first():
    truth = _truth(_image("a", GroundTruthObject(1, GT_BOX)))
    dets = [_det(1, FAR_BOX, 0.9, index=0), _det(1, GT_BOX, 0.6, index=1)]
    assert average_precision(dets, truth, 1).ap == 0.5


def test_duplicate_detection_is_false_positive():
    truth = _truth(_image("a", GroundTruthObject(1, GT_BOX)))
    dets = [_det(1, GT_BOX, 0.9, index=0), _det(1, BoundingBox(10, 10, 30, 31), 0.8, index=1)]
    result = average_precision(dets, truth, 1)
    assert (result.tp, result.fp) == (1, 1)
    alone = average_precision(dets[:1], truth, 1)
    assert result.ap <= alone.ap


def test_difficult_objects_are_ignored():
    truth = _truth(_image("a", GroundTruthObject(1, GT_BOX), GroundTruthObject(1, FAR_BOX, difficult=True)))
    dets = [_det(1, FAR_BOX, 0.95, index=0), _det(1, GT_BOX, 0.5, index=1)]
    result = average_precision(dets, truth, 1)
    assert result.npos == 1
    assert (result.tp, result.fp) == (1, 0)
    assert result.ap == 1.0


def test_detection_falls_through_to_next_unclaimed_box():
    left = BoundingBox(0, 0, 10, 10)
    right = BoundingBox(4, 0, 14, 10)
    truth = _truth(_image("a", GroundTruthObject(1, left), GroundTruthObject(1, right)))
    # The second box overlaps `left` best (0.818) but `left` is already claimed; `right` still clears 0.5.
    dets = [_det(1, left, 0.9, index=0), _det(1, BoundingBox(1, 0, 11, 10), 0.8, index=1)]
    result = average_precision(dets, truth, 1)
    assert (result.tp, result.fp) == (2, 0)
    assert result.ap == 1.0


def test_claimed_box_with_difficult_neighbour_is_ignored():
    left = BoundingBox(0, 0, 10, 10)
    truth = _truth(
        _image("a", GroundTruthObject(1, left), GroundTruthObject(1, BoundingBox(4, 0, 14, 10), difficult=True))
    )
    dets = [_det(1, left, 0.9, index=0), _det(1, BoundingBox(1, 0, 11, 10), 0.8, index=1)]
    result = average_precision(dets, truth, 1)
    assert (result.tp, result.fp, result.npos) == (1, 0, 1)


def test_class_without_ground_truth_is_undefined():
    truth = _truth(_image("a", GroundTruthObject(1, GT_BOX)))
    report = mean_average_precision([_det(1, GT_BOX, 0.9), _det(2, FAR_BOX, 0.4)], truth)
    assert report.ap_by_name() == {"cat": 1.0, "dog": None}
    assert report.map == 1.0


def test_map_is_mean_of_defined_classes():
    truth = _truth(_image("a", GroundTruthObject(1, GT_BOX), GroundTruthObject(2, FAR_BOX)))
    dets = [
        _det(1, GT_BOX, 0.9, index=0),
        _det(2, GT_BOX, 0.9, index=0),
        _det(2, FAR_BOX, 0.5, index=1),
    ]
    report = mean_average_precision(dets, truth)
    assert [c.ap for c in report.classes] == [1.0, 0.5]
    assert report.map == 0.75


def test_no_detections_gives_zero():
    truth = _truth(_image("a", GroundTruthObject(1, GT_BOX), GroundTruthObject(2, FAR_BOX)))
    report = mean_average_precision([], truth)
    assert report.map == 0.0
    assert all(c.ap == 0.0 for c in report.classes)
    assert mean_average_precision([], truth, interpolation=Interpolation.ALL_POINTS).map == 0.0


def test_all_points_interpolation():
    truth = _truth(_image("a", GroundTruthObject(1, GT_BOX), GroundTruthObject(1, FAR_BOX)))
    dets = [
        _det(1, GT_BOX, 0.9, index=0),
        _det(1, BoundingBox(40, 0, 50, 5), 0.8, index=1),
        _det(1, FAR_BOX, 0.7, index=2),
    ]
    ap = average_precision(dets, truth, 1, interpolation=Interpolation.ALL_POINTS).ap
    # recall 0.5 at precision 1, recall 1.0 at precision 2/3
    assert ap == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3))


def test_ap_depends_only_on_ranks(rng):
    images = []
    dets = []
    for n in range(10):
        images.append(_image(f"im{n}", GroundTruthObject(1, GT_BOX)))
        dets.append(_det(1, GT_BOX, float(rng.uniform(0.1, 0.9)), f"im{n}", 0))
        dets.append(_det(1, FAR_BOX, float(rng.uniform(0.1, 0.9)), f"im{n}", 1))
    truth = _truth(*images)
    ap = average_precision(dets, truth, 1).ap
    squashed = [_det(d.label, d.box, d.confidence**3, d.image_id, d.proposal_index) for d in dets]
    assert average_precision(squashed, truth, 1).ap == ap
    shuffled = [dets[i] for i in rng.permutation(len(dets))]
    assert average_precision(shuffled, truth, 1).ap == ap
    assert 0.0 <= ap <= 1.0


def test_extract_detections_filters_and_orders():
    boxes = (GT_BOX, FAR_BOX)
    b = ProposalSet("b", FRAME, boxes, np.array([[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]))
    a = ProposalSet("a", FRAME, boxes[:1], np.array([[0.2, 0.5, 0.3]]))
    records = extract_detections([b, a], threshold=0.4)
    assert [(r.image_id, r.proposal_index, r.label) for r in records] == [("a", 0, 1), ("b", 0, 1), ("b", 1, 2)]
    assert records[0].confidence == 0.5
    assert len(extract_detections([a, b], threshold=0.0)) == 6
    assert extract_detections([a, b], threshold=1.01) == []


def test_detection_confidence_must_be_in_unit_interval():
    with pytest.raises(ValueError):
        _det(1, GT_BOX, 1.5)


def test_report_text_has_class_columns():
    truth = _truth(_image("a", GroundTruthObject(1, GT_BOX)))
    text = mean_average_precision([_det(1, GT_BOX, 0.9)], truth).to_text()
    header = text.splitlines()[0]
    assert "cat" in header and "dog" in header and "mAP" in header
    assert "100.0" in text


def test_sign_changes():
    assert sign_changes([0.1, 0.2, 0.3, 0.25, 0.2]) == 1
    assert sign_changes([0.1, 0.2, 0.2, 0.3]) == 0
    assert sign_changes([0.3, 0.1, 0.2, 0.1]) == 2
    assert sign_changes([1.0]) == 0


def test_top1_accuracy():
    ps = ProposalSet("a", FRAME, (GT_BOX, FAR_BOX), np.array([[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]))
    assert top1_accuracy([ps], {"a": [1, 1]}) == 0.5
    with pytest.raises(ValueError):
        top1_accuracy([ps], {"a": [1]})


def test_rescore_inputs_need_every_feature():
    ps = ProposalSet("a", FRAME, (GT_BOX,), np.array([[0.2, 0.5, 0.3]]))
    with pytest.raises(ValueError, match="'a'"):
        RescoreInputs((ps,), {})


def _small_fixture(synth_dataset, count=40):
    scenes = synth_dataset.scenes[:count]
    inputs = RescoreInputs(tuple(s.proposals for s in scenes), {s.image_id: s.feature for s in scenes})
    truth = GroundTruthSet(synth_dataset.categories, {s.image_id: s.annotations for s in scenes})
    return inputs, truth


def test_zero_weight_grid_reproduces_baseline(synth_dataset, synth_models):
    pairwise, scene = synth_models
    inputs, truth = _small_fixture(synth_dataset)
    result = sweep_weights(inputs, truth, pairwise, scene, [0.0], [0.0])
    assert len(result.rows) == 1
    baseline = evaluate_proposals(inputs.proposals, truth)
    assert result.best.map == baseline.map
    assert result.best.report.ap_by_name() == baseline.ap_by_name()


def test_sweep_is_thread_independent(synth_dataset, synth_models):
    pairwise, scene = synth_models
    inputs, truth = _small_fixture(synth_dataset)
    grid_p, grid_g = [0.0, 0.5, 0.25], [0.0, 0.5]
    single = sweep_weights(inputs, truth, pairwise, scene, grid_p, grid_g, threads=1)
    multi = sweep_weights(inputs, truth, pairwise, scene, grid_p, grid_g, threads=4)
    assert [(r.omega_p, r.omega_g) for r in single.rows] == [
        (0.0, 0.0), (0.0, 0.5), (0.25, 0.0), (0.25, 0.5), (0.5, 0.0), (0.5, 0.5)
    ]
    assert [r.map for r in single.rows] == [r.map for r in multi.rows]
    assert (single.best.omega_p, single.best.omega_g) == (multi.best.omega_p, multi.best.omega_g)
    assert single.best.map >= single.rows[0].map
    assert [p for p, _ in single.curve(0.0)] == [0.0, 0.25, 0.5]


def test_sweep_collapses_duplicate_grid_values(synth_dataset, synth_models):
    pairwise, scene = synth_models
    inputs, truth = _small_fixture(synth_dataset, 5)
    result = sweep_weights(inputs, truth, pairwise, scene, [0.0, 0.0], [0.0])
    assert len(result.rows) == 1
    assert (result.best.omega_p, result.best.omega_g) == (0.0, 0.0)


def test_ablation_table(synth_dataset, synth_models):
    pairwise, scene = synth_models
    inputs, truth = _small_fixture(synth_dataset)
    table = ablation_table(inputs, truth, pairwise, scene, CrfWeights(0.2, 0.5), threads=2)
    assert list(table.reports) == ["baseline", "pairwise", "global", "pairwise+global"]
    assert table.reports["baseline"].map == evaluate_proposals(inputs.proposals, truth).map
    deltas = table.deltas("pairwise+global")
    assert deltas["mAP"] == pytest.approx(table.reports["pairwise+global"].map - table.reports["baseline"].map)
    text = table.to_text()
    assert "baseline" in text and "delta" in text
    assert table.to_dict()["omega_p"] == 0.2


def test_context_improves_map_on_synthetic_benchmark(synth_dataset, synth_models):
    pairwise, scene = synth_models
    inputs = RescoreInputs(tuple(synth_dataset.proposal_sets()), synth_dataset.features())
    truth = synth_dataset.ground_truth()
    grid_p = [round(0.1 * i, 12) for i in range(11)]
    grid_g = [0.0, 0.25, 0.5]
    result = sweep_weights(inputs, truth, pairwise, scene, grid_p, grid_g, threads=4)
    baseline = next(r for r in result.rows if r.omega_p == 0.0 and r.omega_g == 0.0)
    assert result.best.map >= baseline.map + 0.01
    assert max(m for _, m in result.curve(0.0)) > baseline.map
    # Rises then falls: one turn across the coarse grid, peak strictly inside the full one.
    curve = dict(result.curve(0.0))
    assert sign_changes([curve[0.0], curve[0.5], curve[1.0]]) == 1
    peak = max(curve, key=curve.get)
    assert 0.0 < peak < 1.0
    assert curve[1.0] < curve[peak]

"""Tests for the service layer: training, batch rescoring and dataset export."""

import json

import numpy as np
import pytest

import formats_io
from crf_engine import CrfWeights, InferenceConfig, rescore
from evaluation import GroundTruthSet, RescoreInputs
from services import DatasetService, RescoreService, TrainingService
from synth import SynthConfig, generate


def _inputs(dataset, count=None):
    scenes = dataset.scenes[:count]
    return RescoreInputs(tuple(s.proposals for s in scenes), {s.image_id: s.feature for s in scenes})


def test_presence_labels(synth_dataset):
    truth = synth_dataset.ground_truth()
    ids = list(truth.images)[:5]
    labels = TrainingService.presence_labels(truth, ids)
    assert labels.shape == (5, truth.categories.size)
    for row, image_id in zip(labels, ids):
        present = {o.label for o in truth.images[image_id].objects}
        assert set(np.flatnonzero(row) + 1) == present


def test_align_features_requires_every_image(synth_dataset):
    truth = synth_dataset.ground_truth()
    features = synth_dataset.features()
    first = next(iter(features))
    del features[first]
    with pytest.raises(ValueError, match=first):
        TrainingService.align_features(truth, features)


def test_align_features_ignores_extra_features(synth_dataset):
    scenes = synth_dataset.scenes[:10]
    truth = GroundTruthSet(synth_dataset.categories, {s.image_id: s.annotations for s in scenes})
    aligned, labels = TrainingService.align_features(truth, synth_dataset.features())
    assert [f.image_id for f in aligned] == [s.image_id for s in scenes]
    assert labels.shape == (10, synth_dataset.categories.size)


def test_rescore_images_keeps_order_and_matches_single_image(synth_dataset, synth_models):
    pairwise, scene = synth_models
    inputs = _inputs(synth_dataset, 12)
    weights = CrfWeights(0.3, 0.5)
    cfg = InferenceConfig()
    single = RescoreService.rescore_images(inputs, pairwise, scene, weights, cfg, threads=1)
    multi = RescoreService.rescore_images(inputs, pairwise, scene, weights, cfg, threads=4)
    assert [ps.image_id for ps in multi] == [ps.image_id for ps in inputs.proposals]
    for a, b, original in zip(single, multi, inputs.proposals):
        assert np.array_equal(a.scores, b.scores)
        direct = rescore(original, pairwise, scene, inputs.features[original.image_id], weights, cfg)
        assert np.array_equal(a.scores, direct.scores)


def test_rescore_images_empty_input(synth_models):
    pairwise, scene = synth_models
    assert RescoreService.rescore_images(RescoreInputs((), {}), pairwise, scene, CrfWeights(), threads=4) == []


def test_export_synthetic_round_trips(tmp_path):
    dataset = generate(SynthConfig(num_images=15))
    paths = DatasetService.export_synthetic(dataset, tmp_path / "out")
    assert set(paths) == {"detections", "annotations", "features", "manifest"}

    manifest = formats_io.read_manifest(paths["manifest"])
    assert manifest.categories == dataset.categories
    assert manifest.seed == 7
    assert [im.image_id for im in manifest.images] == [s.image_id for s in dataset.scenes]
    assert [im.line for im in manifest.images] == list(range(1, len(dataset.scenes) + 1))
    assert manifest.files["detections"] == "detections.jsonl"
    assert {r["subject"] for r in manifest.planted_rules} == {"boat", "train"}

    truth = formats_io.read_annotations(paths["annotations"], manifest.categories)
    assert truth.images == dataset.ground_truth().images
    inputs = DatasetService.load_inputs(paths["detections"], paths["features"])
    assert len(inputs.proposals) == len(dataset.scenes)
    for ps, scene in zip(inputs.proposals, dataset.scenes):
        assert ps.boxes == scene.proposals.boxes
        assert np.allclose(ps.scores, scene.proposals.scores, rtol=0, atol=1e-15)


def test_export_is_repeatable(tmp_path):
    config = SynthConfig(num_images=10)
    DatasetService.export_synthetic(generate(config), tmp_path / "a")
    DatasetService.export_synthetic(generate(config), tmp_path / "b")
    for name in ("detections.jsonl", "annotations.jsonl", "features.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    json.loads((tmp_path / "a" / "manifest.json").read_text())

"""Tests for pairwise statistics."""

import itertools
import logging
import math

import numpy as np
import pytest

from context_stats import (
    BACKGROUND,
    CategorySpace,
    check_consistency,
    count_pairs,
    learn_pairwise,
    model_from_counts,
    pairwise_potential,
)
from evaluation import GroundTruthObject, ImageAnnotations
from geometry import INVERSE_INDEX, NUM_RELATIONS, BoundingBox, ImageFrame, SpatialRelation

FRAME = ImageFrame(100.0, 100.0)


def _image(image_id, *objects):
    return ImageAnnotations(image_id, FRAME, tuple(GroundTruthObject(label, box) for label, box in objects))


def test_category_space_labels(two_categories):
    assert two_categories.num_labels == 3
    assert two_categories.label_of("dog") == 2
    assert two_categories.name_of(BACKGROUND) == "background"
    with pytest.raises(ValueError):
        two_categories.label_of("horse")


@pytest.mark.parametrize("names", [(), ("a", "a"), ("background",), ("",)])
def test_category_space_rejects_bad_names(names):
    with pytest.raises(ValueError):
        CategorySpace(names)


def test_no_pairs_gives_uniform_smoothing(two_categories, caplog):
    with caplog.at_level(logging.WARNING):
        model = learn_pairwise([_image("a", (1, BoundingBox(0, 0, 10, 10)))], two_categories)
    assert model.smoothing_only
    assert np.allclose(model.likelihood, 0.25)
    assert "pure smoothing" in caplog.text


def test_single_pair_counts_both_directions(two_categories):
    image = _image("a", (1, BoundingBox(40, 40, 60, 60)), (2, BoundingBox(40, 70, 60, 90)))
    counts = count_pairs([image], two_categories)
    assert counts.sum() == 2
    assert counts[1, 2, SpatialRelation.DISJOINT_BELOW] == 1
    assert counts[2, 1, SpatialRelation.DISJOINT_ABOVE] == 1

    model = learn_pairwise([image], two_categories)
    assert model.likelihood[1, 2, SpatialRelation.DISJOINT_BELOW] == pytest.approx(2 / 5)
    assert model.likelihood[1, 1, SpatialRelation.DISJOINT_BELOW] == pytest.approx(1 / 5)
    assert pairwise_potential(model, 1, 2, SpatialRelation.DISJOINT_BELOW) == pytest.approx(-math.log(0.4))


def test_background_entries_are_neutral(two_categories):
    image = _image("a", (1, BoundingBox(40, 40, 60, 60)), (2, BoundingBox(40, 70, 60, 90)))
    model = learn_pairwise([image], two_categories)
    assert model.neutral_value == 0.25
    assert np.all(model.likelihood[0] == 0.25)
    assert np.all(model.likelihood[:, 0] == 0.25)
    assert pairwise_potential(model, 0, 1, SpatialRelation.INSIDE) == pytest.approx(math.log(4))


def test_learned_models_are_consistent(rng, random_boxes):
    categories = CategorySpace(("a", "b", "c"))
    images = []
    for n in range(50):
        boxes = random_boxes(rng, int(rng.integers(0, 6)))
        labels = rng.integers(1, 4, size=len(boxes))
        images.append(_image(f"im{n}", *zip(labels.tolist(), boxes)))
    model = learn_pairwise(images, categories, alpha=0.5)
    assert check_consistency(model) == []
    fg = model.likelihood[1:, 1:, :]
    assert np.allclose(fg.sum(axis=(0, 1)), 1.0, rtol=0, atol=1e-9)
    counts = model.counts
    assert np.array_equal(counts, np.transpose(counts, (1, 0, 2))[:, :, INVERSE_INDEX])


def test_label_outside_space_is_rejected(two_categories):
    image = _image("bad", (3, BoundingBox(0, 0, 10, 10)))
    with pytest.raises(ValueError, match="bad"):
        count_pairs([image], two_categories)


def test_model_from_counts_validates_shape(two_categories):
    with pytest.raises(ValueError):
        model_from_counts(two_categories, np.zeros((2, 2, 11)), 1.0)
    with pytest.raises(ValueError):
        model_from_counts(two_categories, np.zeros((3, 3, 11)), 0.0)


def test_check_consistency_reports_asymmetry(two_categories):
    counts = np.zeros((3, 3, 11), dtype=np.int64)
    counts[1, 2, SpatialRelation.DISJOINT_BELOW] = 5
    model = model_from_counts(two_categories, counts, 1.0)
    assert any("inverse" in p for p in check_consistency(model))


def test_one_more_observation_never_lowers_its_likelihood(rng):
    categories = CategorySpace(("a", "b", "c"))
    counts = rng.integers(0, 20, size=(4, 4, NUM_RELATIONS))
    base = model_from_counts(categories, counts, 1.0).likelihood
    for a, b, r in itertools.product(range(1, 4), range(1, 4), range(NUM_RELATIONS)):
        bumped = counts.copy()
        bumped[a, b, r] += 1
        after = model_from_counts(categories, bumped, 1.0).likelihood
        assert after[a, b, r] >= base[a, b, r]
        assert np.array_equal(after[0], base[0])


def test_adding_an_image_never_lowers_the_pairs_it_shows(two_categories, rng, random_boxes):
    images = []
    for n in range(30):
        boxes = random_boxes(rng, int(rng.integers(0, 5)))
        labels = rng.integers(1, 3, size=len(boxes))
        images.append(_image(f"im{n}", *zip(labels.tolist(), boxes)))
    extra = _image("extra", (1, BoundingBox(40, 40, 60, 60)), (2, BoundingBox(40, 70, 60, 90)))
    before = learn_pairwise(images, two_categories).likelihood
    after = learn_pairwise(images + [extra], two_categories).likelihood
    assert after[1, 2, SpatialRelation.DISJOINT_BELOW] >= before[1, 2, SpatialRelation.DISJOINT_BELOW]
    assert after[2, 1, SpatialRelation.DISJOINT_ABOVE] >= before[2, 1, SpatialRelation.DISJOINT_ABOVE]

"""Pytest fixtures and test env. Set env before importing project modules."""

import os

import numpy as np
import pytest

# Set test env before any project imports: enables the in-loop invariant checks.
os.environ["TESTING"] = "1"
os.environ.pop("CTXCRF_LOG_LEVEL", None)

from context_stats import CategorySpace, learn_pairwise, model_from_counts  # noqa: E402
from crf_engine import ProposalSet  # noqa: E402
from geometry import INVERSE_INDEX, NUM_RELATIONS, BoundingBox, ImageFrame  # noqa: E402
from scene_prior import SceneFeature, ScenePriorModel  # noqa: E402
from services import TrainingService  # noqa: E402
from synth import SynthConfig, generate  # noqa: E402

FRAME = ImageFrame(100.0, 100.0)


def _random_boxes(rng, n, frame=FRAME):
    boxes = []
    for _ in range(n):
        w = rng.uniform(5.0, 30.0)
        h = rng.uniform(5.0, 30.0)
        x0 = rng.uniform(0.0, frame.width - w)
        y0 = rng.uniform(0.0, frame.height - h)
        boxes.append(BoundingBox(x0, y0, x0 + w, y0 + h))
    return boxes


def _random_instance(rng, n, k, dim=3, weight_scale=0.5, image_id="img"):
    """Proposals plus consistent random models: counts are symmetrized so P[a,b,r] = P[b,a,inv r]."""
    categories = CategorySpace(tuple(f"c{i}" for i in range(k)))
    raw = rng.integers(0, 4, size=(k + 1, k + 1, NUM_RELATIONS))
    counts = raw + np.transpose(raw, (1, 0, 2))[:, :, INVERSE_INDEX]
    pairwise = model_from_counts(categories, counts, 1.0)
    scene = ScenePriorModel(
        categories,
        rng.normal(0.0, weight_scale, size=(k, dim)),
        rng.normal(0.0, weight_scale, size=k),
    )
    feature = SceneFeature(image_id, rng.normal(size=dim))
    scores = rng.dirichlet(np.ones(k + 1), size=n).reshape(n, k + 1)
    proposals = ProposalSet(image_id, FRAME, tuple(_random_boxes(rng, n)), scores)
    return proposals, pairwise, scene, feature


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def random_boxes():
    return _random_boxes


@pytest.fixture
def random_instance():
    return _random_instance


@pytest.fixture
def two_categories():
    return CategorySpace(("cat", "dog"))


@pytest.fixture(scope="session")
def synth_dataset():
    """The default seeded fixture: K=4, 200 scenes, noise 0.45, seed 7."""
    return generate(SynthConfig())


@pytest.fixture(scope="session")
def synth_models(synth_dataset):
    truth = synth_dataset.ground_truth()
    pairwise = learn_pairwise(truth, truth.categories)
    scene = TrainingService.train_scene(truth, synth_dataset.features(), 1e-3, 500, 0.1)
    return pairwise, scene

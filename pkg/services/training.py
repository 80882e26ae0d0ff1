"""Training service: turn ingested ground truth and features into fitted models."""

from __future__ import annotations

import logging
from collections.abc import Mapping

import numpy as np

from context_stats import PairwiseModel, learn_pairwise
from evaluation import GroundTruthSet
from scene_prior import SceneFeature, ScenePriorModel, train_scene_prior

logger = logging.getLogger(__name__)


class TrainingService:
    """Fit the pairwise statistics and the scene prior from annotated data."""

    @staticmethod
    def presence_labels(truth: GroundTruthSet, image_ids: list[str]) -> np.ndarray:
        """(n_images, K) 0/1 matrix: does category k appear in the image. Difficult objects count."""
        labels = np.zeros((len(image_ids), truth.categories.size))
        for row, image_id in enumerate(image_ids):
            for obj in truth.images[image_id].objects:
                labels[row, obj.label - 1] = 1.0
        return labels

    @staticmethod
    def align_features(
        truth: GroundTruthSet,
        features: Mapping[str, SceneFeature],
    ) -> tuple[list[SceneFeature], np.ndarray]:
        """Features of every annotated image, in annotation order, with their presence labels."""
        missing = [image_id for image_id in truth.images if image_id not in features]
        if missing:
            raise ValueError(f'no scene feature for annotated image {missing[0]!r} ({len(missing)} missing)')
        extra = len(set(features) - set(truth.images))
        if extra:
            logger.info('Ignoring %d feature records without annotations', extra)
        image_ids = list(truth.images)
        return [features[i] for i in image_ids], TrainingService.presence_labels(truth, image_ids)

    @staticmethod
    def learn_pairwise(truth: GroundTruthSet, alpha: float) -> PairwiseModel:
        return learn_pairwise(truth, truth.categories, alpha)

    @staticmethod
    def train_scene(
        truth: GroundTruthSet,
        features: Mapping[str, SceneFeature],
        lam: float,
        epochs: int,
        learning_rate: float,
        seed: int = 0,
    ) -> ScenePriorModel:
        aligned, presence = TrainingService.align_features(truth, features)
        return train_scene_prior(aligned, presence, truth.categories, lam, epochs, learning_rate, seed)

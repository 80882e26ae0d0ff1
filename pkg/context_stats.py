"""Pairwise co-occurrence/layout statistics P(a, b, r) and the pairwise potential."""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from geometry import INVERSE_INDEX, NUM_RELATIONS, SpatialRelation, relation_matrix
from validators import validate_category_names, validate_positive

if TYPE_CHECKING:
    from evaluation import ImageAnnotations

logger = logging.getLogger(__name__)

BACKGROUND = 0
DEFAULT_ALPHA = 1.0


@dataclass(frozen=True)
class CategorySpace:
    """K foreground names; label ids are 1..K, 0 is background."""

    names: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, 'names', validate_category_names(list(self.names)))

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def num_labels(self) -> int:
        """K + 1, background included."""
        return len(self.names) + 1

    def label_of(self, name: str) -> int:
        try:
            return self.names.index(name) + 1
        except ValueError:
            raise ValueError(f'Unknown category: {name!r}') from None

    def name_of(self, label: int) -> str:
        if label == BACKGROUND:
            return 'background'
        if not 1 <= label <= self.size:
            raise ValueError(f'Label {label} outside 0..{self.size}')
        return self.names[label - 1]


@dataclass(frozen=True, eq=False)
class PairwiseModel:
    """Likelihood tensor P[a, b, r] of shape (K+1, K+1, 11) with its raw counts."""

    categories: CategorySpace
    alpha: float
    counts: np.ndarray
    likelihood: np.ndarray
    smoothing_only: bool = field(default=False)

    @property
    def neutral_value(self) -> float:
        return 1.0 / self.categories.size ** 2

    def potentials(self) -> np.ndarray:
        """-ln P over the whole tensor."""
        return -np.log(self.likelihood)


def likelihood_from_counts(counts: np.ndarray, alpha: float) -> np.ndarray:
    """
    Add-alpha estimate, joint over foreground label pairs and conditioned on the
    relation. Rows/columns involving background get the neutral value 1/K^2.
    """
    num_labels = counts.shape[0]
    k = num_labels - 1
    fg = counts[1:, 1:, :].astype(np.float64)
    totals = fg.sum(axis=(0, 1))
    likelihood = np.full(counts.shape, 1.0 / k ** 2, dtype=np.float64)
    likelihood[1:, 1:, :] = (fg + alpha) / (totals + alpha * k ** 2)
    return likelihood


def model_from_counts(categories: CategorySpace, counts: np.ndarray, alpha: float) -> PairwiseModel:
    alpha = validate_positive(alpha, 'alpha')
    expected = (categories.num_labels, categories.num_labels, NUM_RELATIONS)
    counts = np.asarray(counts)
    if counts.shape != expected:
        raise ValueError(f'counts shape {counts.shape} does not match {expected}')
    if np.any(counts < 0):
        raise ValueError('counts must be non-negative')
    return PairwiseModel(
        categories=categories,
        alpha=alpha,
        counts=counts,
        likelihood=likelihood_from_counts(counts, alpha),
        smoothing_only=not bool(counts[1:, 1:, :].any()),
    )


def count_pairs(
    annotations: Iterable[ImageAnnotations],
    categories: CategorySpace,
) -> np.ndarray:
    """Ordered-pair counts[label_i, label_j, relation(box_i, box_j)] over every image."""
    shape = (categories.num_labels, categories.num_labels, NUM_RELATIONS)
    counts = np.zeros(shape, dtype=np.int64)
    for image in annotations:
        labels = [obj.label for obj in image.objects]
        for label in labels:
            if not 1 <= label <= categories.size:
                raise ValueError(f'image {image.image_id!r}: label {label} outside 1..{categories.size}')
        if len(labels) < 2:
            continue
        relations = relation_matrix([obj.box for obj in image.objects], image.frame)
        for i, a in enumerate(labels):
            for j, b in enumerate(labels):
                if i != j:
                    counts[a, b, relations[i, j]] += 1
    return counts


def learn_pairwise(
    annotations: Iterable[ImageAnnotations],
    categories: CategorySpace,
    alpha: float = DEFAULT_ALPHA,
) -> PairwiseModel:
    """Learn P(a, b, r) from ground-truth objects. Each unordered pair contributes both directions."""
    model = model_from_counts(categories, count_pairs(annotations, categories), alpha)
    if model.smoothing_only:
        logger.warning('No object pairs observed; pairwise model is pure smoothing (uniform).')
    else:
        logger.info(
            'Learned pairwise model: %d ordered pairs, K=%d, alpha=%g',
            int(model.counts.sum()),
            categories.size,
            model.alpha,
        )
    return model


def pairwise_potential(model: PairwiseModel, a: int, b: int, r: SpatialRelation) -> float:
    """phi_p(a, b, r) = -ln P[a, b, r]."""
    k = model.categories.size
    if not (0 <= a <= k and 0 <= b <= k):
        raise ValueError(f'labels ({a}, {b}) outside 0..{k}')
    return -math.log(float(model.likelihood[a, b, int(r)]))


def check_consistency(model: PairwiseModel, atol: float = 1e-9) -> list[str]:
    """Return the violated tensor invariants (empty when the model is sound)."""
    problems: list[str] = []
    p = model.likelihood
    fg = p[1:, 1:, :]
    sums = fg.sum(axis=(0, 1))
    if not np.allclose(sums, 1.0, rtol=0.0, atol=atol):
        problems.append(f'per-relation sums deviate from 1: {sums.tolist()}')
    swapped = np.transpose(fg, (1, 0, 2))[:, :, INVERSE_INDEX]
    if not np.allclose(fg, swapped, rtol=0.0, atol=atol):
        problems.append('P[a][b][r] != P[b][a][inverse(r)]')
    if not np.all(p > 0):
        problems.append('non-positive likelihood entries')
    neutral = model.neutral_value
    if not (np.allclose(p[0], neutral) and np.allclose(p[:, 0], neutral)):
        problems.append('background entries are not neutral')
    return problems


def relation_names() -> Sequence[str]:
    return [r.label for r in SpatialRelation]

"""One-vs-rest logistic regression scene prior p(k | f) and the global potential."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from context_stats import BACKGROUND, CategorySpace
from validators import validate_non_negative, validate_positive

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1e-3
DEFAULT_EPOCHS = 500
DEFAULT_LEARNING_RATE = 0.1
PROBABILITY_CLAMP = 1e-6
BACKGROUND_POTENTIAL = -math.log(0.5)

_P_MIN = np.finfo(np.float64).tiny
_P_MAX = np.nextafter(1.0, 0.0)


@dataclass(frozen=True, eq=False)
class SceneFeature:
    """Opaque per-image scene descriptor of fixed dimension."""

    image_id: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise ValueError(f'image {self.image_id!r}: feature must be a nonempty 1-D vector')
        if not np.all(np.isfinite(vec)):
            raise ValueError(f'image {self.image_id!r}: feature contains non-finite values')
        object.__setattr__(self, 'vector', vec)

    @property
    def dim(self) -> int:
        return int(self.vector.size)


@dataclass(frozen=True)
class TrainingReport:
    """Per-run diagnostics; not persisted with the model."""

    losses: tuple[float, ...]
    degenerate_categories: tuple[str, ...]
    num_images: int


@dataclass(frozen=True, eq=False)
class ScenePriorModel:
    categories: CategorySpace
    weights: np.ndarray  # (K, D)
    biases: np.ndarray  # (K,)
    lam: float = DEFAULT_LAMBDA
    report: TrainingReport | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        k = self.categories.size
        if w.ndim != 2 or w.shape[0] != k or w.shape[1] < 1:
            raise ValueError(f'weights must have shape ({k}, D), got {w.shape}')
        if b.shape != (k,):
            raise ValueError(f'biases must have shape ({k},), got {b.shape}')
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError('scene prior parameters must be finite')
        object.__setattr__(self, 'weights', w)
        object.__setattr__(self, 'biases', b)

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    @classmethod
    def zeros(cls, categories: CategorySpace, dim: int, lam: float = DEFAULT_LAMBDA) -> ScenePriorModel:
        """Untrained model: every presence probability is 0.5."""
        return cls(categories, np.zeros((categories.size, dim)), np.zeros(categories.size), lam)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_dim(model: ScenePriorModel, f: SceneFeature) -> None:
    if f.dim != model.dim:
        raise ValueError(f'image {f.image_id!r}: feature dimension {f.dim} does not match model dimension {model.dim}')


def loss_and_gradient(
    weights: np.ndarray,
    biases: np.ndarray,
    features: np.ndarray,
    presence: np.ndarray,
    lam: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """
    Regularized mean negative log-likelihood summed over the K one-vs-rest
    problems, with L2 on weights only. Returns (loss, dW, db).
    """
    n = features.shape[0]
    z = features @ weights.T + biases  # (n, K)
    # -log sigma(z) for y=1 and -log(1 - sigma(z)) for y=0, both via logaddexp
    nll = np.logaddexp(0.0, z) - presence * z
    loss = float(nll.sum() / n + 0.5 * lam * np.sum(weights * weights))
    residual = (sigmoid(z) - presence) / n
    grad_w = residual.T @ features + lam * weights
    grad_b = residual.sum(axis=0)
    return loss, grad_w, grad_b


def train_scene_prior(
    features: Sequence[SceneFeature],
    presence_labels: np.ndarray,
    categories: CategorySpace,
    lam: float = DEFAULT_LAMBDA,
    epochs: int = DEFAULT_EPOCHS,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    seed: int = 0,
) -> ScenePriorModel:
    """
    Full-batch gradient descent from zero initialization; deterministic.
    `presence_labels` is (n_images, K) of 0/1 aligned with `features`.
    `seed` is accepted for API stability; zero initialization does not consume it.
    """
    lam = validate_non_negative(lam, 'lambda')
    learning_rate = validate_positive(learning_rate, 'learning_rate')
    if isinstance(epochs, bool) or not isinstance(epochs, int) or epochs < 0:
        raise ValueError(f'epochs must be a non-negative integer, got {epochs!r}')
    if not features:
        raise ValueError('At least one image is required to train the scene prior.')
    dim = features[0].dim
    for f in features:
        if f.dim != dim:
            raise ValueError(f'image {f.image_id!r}: feature dimension {f.dim} differs from {dim}')
    x = np.stack([f.vector for f in features])
    y = np.asarray(presence_labels, dtype=np.float64)
    k = categories.size
    if y.shape != (len(features), k):
        raise ValueError(f'presence labels must have shape ({len(features)}, {k}), got {y.shape}')
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError('presence labels must be 0 or 1')

    positives = y.sum(axis=0)
    degenerate = tuple(
        name for name, pos in zip(categories.names, positives) if pos == 0 or pos == len(features)
    )
    if degenerate:
        logger.warning('Scene prior: categories with one-sided labels: %s', ', '.join(degenerate))

    weights = np.zeros((k, dim))
    biases = np.zeros(k)
    losses: list[float] = []
    for _ in range(epochs):
        loss, grad_w, grad_b = loss_and_gradient(weights, biases, x, y, lam)
        losses.append(loss)
        weights = weights - learning_rate * grad_w
        biases = biases - learning_rate * grad_b
    final_loss, _, _ = loss_and_gradient(weights, biases, x, y, lam)
    losses.append(final_loss)
    logger.info('Scene prior trained: %d images, D=%d, %d epochs, loss %.6f', len(features), dim, epochs, final_loss)

    report = TrainingReport(losses=tuple(losses), degenerate_categories=degenerate, num_images=len(features))
    return ScenePriorModel(categories, weights, biases, lam, report)


def predict_presence(model: ScenePriorModel, f: SceneFeature) -> np.ndarray:
    """K presence probabilities, strictly inside (0, 1)."""
    _check_dim(model, f)
    p = sigmoid(model.weights @ f.vector + model.biases)
    return np.clip(p, _P_MIN, _P_MAX)


def global_potentials(model: ScenePriorModel, f: SceneFeature) -> np.ndarray:
    """phi_g for every label 0..K; background is the neutral -ln 0.5."""
    p = np.clip(predict_presence(model, f), PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    out = np.empty(model.categories.num_labels)
    out[BACKGROUND] = BACKGROUND_POTENTIAL
    out[1:] = -np.log(p)
    return out


def global_potential(model: ScenePriorModel, f: SceneFeature, label: int) -> float:
    k = model.categories.size
    if not 0 <= label <= k:
        raise ValueError(f'label {label} outside 0..{k}')
    return float(global_potentials(model, f)[label])

"""
Seeded synthetic scenes with planted co-occurrence/layout rules and noisy detector scores.

Each scene draws an archetype, the categories present in it, boxes that
respect the planted pair rules, one proposal per ground-truth box with part of
the true label's mass leaked to a confusable label, and a scene feature around
the archetype mean. Everything is a function of the seed.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from context_stats import DEFAULT_ALPHA, CategorySpace, PairwiseModel, count_pairs, model_from_counts
from crf_engine import ProposalSet
from evaluation import GroundTruthObject, GroundTruthSet, ImageAnnotations
from geometry import BoundingBox, ImageFrame, SpatialRelation, classify_relation
from scene_prior import SceneFeature
from validators import (
    validate_category_names,
    validate_non_negative,
    validate_positive,
    validate_positive_int,
    validate_unit_interval,
)

logger = logging.getLogger(__name__)

DEFAULT_SEED = 7
DEFAULT_MAX_ATTEMPTS = 500
DEFAULT_ORACLE_SAMPLES = 10_000
# Independent stream for the oracle sample, so it never replays the dataset draws.
_ORACLE_STREAM = 1


@dataclass(frozen=True)
class PlantedRule:
    """When both are present, `reference` is placed at `relation` from `subject` with this probability."""

    subject: str
    reference: str
    relation: SpatialRelation
    probability: float

    def __post_init__(self) -> None:
        object.__setattr__(self, 'relation', SpatialRelation(self.relation))
        validate_unit_interval(self.probability, 'rule probability')
        if self.subject == self.reference:
            raise ValueError(f'rule pairs {self.subject!r} with itself')

    def to_dict(self) -> dict[str, Any]:
        return {
            'subject': self.subject,
            'reference': self.reference,
            'relation': self.relation.label,
            'probability': self.probability,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PlantedRule:
        return cls(
            subject=str(data['subject']),
            reference=str(data['reference']),
            relation=SpatialRelation.from_label(str(data['relation'])),
            probability=float(data['probability']),
        )


@dataclass(frozen=True)
class Archetype:
    name: str
    weight: float
    presence: Mapping[str, float]
    mean: tuple[float, ...]

    def __post_init__(self) -> None:
        validate_positive(self.weight, f'archetype {self.name!r} weight')
        for cat, p in self.presence.items():
            validate_unit_interval(p, f'archetype {self.name!r} presence of {cat!r}')
        object.__setattr__(self, 'mean', tuple(float(v) for v in self.mean))
        if not self.mean:
            raise ValueError(f'archetype {self.name!r} has an empty feature mean')

    def to_dict(self) -> dict[str, Any]:
        return {'name': self.name, 'weight': self.weight, 'presence': dict(self.presence), 'mean': list(self.mean)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Archetype:
        return cls(
            name=str(data['name']),
            weight=float(data.get('weight', 1.0)),
            presence={str(k): float(v) for k, v in data['presence'].items()},
            mean=tuple(float(v) for v in data['mean']),
        )


def _default_archetypes() -> tuple[Archetype, ...]:
    return (
        Archetype(
            name='harbor',
            weight=1.0,
            presence={'boat': 0.9, 'water': 0.9, 'train': 0.1, 'rail': 0.1},
            mean=(1.0, -1.0, 0.5, -0.5, 1.0, 0.0, -1.0, 0.5),
        ),
        Archetype(
            name='station',
            weight=1.0,
            presence={'boat': 0.1, 'water': 0.1, 'train': 0.9, 'rail': 0.9},
            mean=(-1.0, 1.0, -0.5, 0.5, -1.0, 0.0, 1.0, -0.5),
        ),
    )


def _default_rules() -> tuple[PlantedRule, ...]:
    return (
        PlantedRule('boat', 'water', SpatialRelation.DISJOINT_BELOW, 0.9),
        PlantedRule('train', 'rail', SpatialRelation.DISJOINT_BELOW, 0.9),
    )


@dataclass(frozen=True)
class SynthConfig:
    categories: tuple[str, ...] = ('boat', 'water', 'train', 'rail')
    num_images: int = 200
    width: float = 640.0
    height: float = 480.0
    rules: tuple[PlantedRule, ...] = field(default_factory=_default_rules)
    confusions: Mapping[str, str] = field(
        default_factory=lambda: {'boat': 'train', 'train': 'boat', 'water': 'rail', 'rail': 'water'}
    )
    noise: float = 0.45
    confusion_share: float = 0.8
    archetypes: tuple[Archetype, ...] = field(default_factory=_default_archetypes)
    feature_noise: float = 0.5
    max_instances: int = 2
    min_box_fraction: float = 0.1
    max_box_fraction: float = 0.3
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    oracle_samples: int = DEFAULT_ORACLE_SAMPLES
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        names = validate_category_names(list(self.categories))
        object.__setattr__(self, 'categories', names)
        object.__setattr__(self, 'rules', tuple(self.rules))
        object.__setattr__(self, 'archetypes', tuple(self.archetypes))
        validate_positive_int(self.num_images, 'num_images')
        validate_positive(self.width, 'width')
        validate_positive(self.height, 'height')
        validate_unit_interval(self.noise, 'noise')
        validate_unit_interval(self.confusion_share, 'confusion_share')
        validate_non_negative(self.feature_noise, 'feature_noise')
        validate_positive_int(self.max_instances, 'max_instances')
        validate_positive_int(self.max_attempts, 'max_attempts')
        validate_positive_int(self.oracle_samples, 'oracle_samples')
        if not 0.0 < self.min_box_fraction <= self.max_box_fraction < 1.0:
            raise ValueError('box fractions must satisfy 0 < min <= max < 1')
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f'seed must be a non-negative integer, got {self.seed!r}')
        known = set(names)
        for rule in self.rules:
            for name in (rule.subject, rule.reference):
                if name not in known:
                    raise ValueError(f'planted rule names unknown category {name!r}')
        for src, dst in self.confusions.items():
            if src not in known or dst not in known:
                raise ValueError(f'confusion {src!r} -> {dst!r} names an unknown category')
        if not self.archetypes:
            raise ValueError('at least one archetype is required')
        dim = len(self.archetypes[0].mean)
        for arch in self.archetypes:
            if len(arch.mean) != dim:
                raise ValueError(f'archetype {arch.name!r} mean has dimension {len(arch.mean)}, expected {dim}')
            unknown = set(arch.presence) - known
            if unknown:
                raise ValueError(f'archetype {arch.name!r} names unknown categories {sorted(unknown)}')

    @property
    def category_space(self) -> CategorySpace:
        return CategorySpace(self.categories)

    @property
    def frame(self) -> ImageFrame:
        return ImageFrame(self.width, self.height)

    @property
    def feature_dim(self) -> int:
        return len(self.archetypes[0].mean)

    def to_dict(self) -> dict[str, Any]:
        return {
            'categories': list(self.categories),
            'num_images': self.num_images,
            'width': self.width,
            'height': self.height,
            'rules': [r.to_dict() for r in self.rules],
            'confusions': dict(self.confusions),
            'noise': self.noise,
            'confusion_share': self.confusion_share,
            'archetypes': [a.to_dict() for a in self.archetypes],
            'feature_noise': self.feature_noise,
            'max_instances': self.max_instances,
            'min_box_fraction': self.min_box_fraction,
            'max_box_fraction': self.max_box_fraction,
            'max_attempts': self.max_attempts,
            'oracle_samples': self.oracle_samples,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SynthConfig:
        """Build from a JSON config; absent keys keep their defaults, unknown keys are rejected."""
        allowed = set(cls().to_dict())
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f'unknown synth config keys: {sorted(unknown)}')
        kwargs: dict[str, Any] = dict(data)
        if 'categories' in kwargs:
            kwargs['categories'] = tuple(kwargs['categories'])
        if 'rules' in kwargs:
            kwargs['rules'] = tuple(PlantedRule.from_dict(r) for r in kwargs['rules'])
        if 'archetypes' in kwargs:
            kwargs['archetypes'] = tuple(Archetype.from_dict(a) for a in kwargs['archetypes'])
        if 'confusions' in kwargs:
            kwargs['confusions'] = {str(k): str(v) for k, v in kwargs['confusions'].items()}
        for key in ('num_images', 'max_instances', 'max_attempts', 'oracle_samples', 'seed'):
            if key in kwargs and isinstance(kwargs[key], float) and kwargs[key].is_integer():
                kwargs[key] = int(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class SynthScene:
    archetype: str
    annotations: ImageAnnotations
    proposals: ProposalSet
    feature: SceneFeature
    true_labels: tuple[int, ...]

    @property
    def image_id(self) -> str:
        return self.annotations.image_id


@dataclass(frozen=True)
class SkippedScene:
    index: int
    image_id: str
    reason: str

    def to_dict(self) -> dict[str, Any]:
        return {'index': self.index, 'image_id': self.image_id, 'reason': self.reason}


@dataclass(frozen=True)
class SynthDataset:
    config: SynthConfig
    scenes: tuple[SynthScene, ...]
    skipped: tuple[SkippedScene, ...] = ()

    @property
    def categories(self) -> CategorySpace:
        return self.config.category_space

    def ground_truth(self) -> GroundTruthSet:
        return GroundTruthSet(self.categories, {s.image_id: s.annotations for s in self.scenes})

    def proposal_sets(self) -> list[ProposalSet]:
        return [s.proposals for s in self.scenes]

    def features(self) -> dict[str, SceneFeature]:
        return {s.image_id: s.feature for s in self.scenes}

    def true_labels(self) -> dict[str, tuple[int, ...]]:
        return {s.image_id: s.true_labels for s in self.scenes}


class PlacementError(RuntimeError):
    """A planted relation could not be satisfied within the attempt budget."""


def _random_box(rng: np.random.Generator, config: SynthConfig) -> BoundingBox:
    w = rng.uniform(config.min_box_fraction, config.max_box_fraction) * config.width
    h = rng.uniform(config.min_box_fraction, config.max_box_fraction) * config.height
    x0 = rng.uniform(0.0, config.width - w)
    y0 = rng.uniform(0.0, config.height - h)
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def _place_related(
    rng: np.random.Generator,
    config: SynthConfig,
    subject: BoundingBox,
    relation: SpatialRelation,
) -> BoundingBox:
    frame = config.frame
    for _ in range(config.max_attempts):
        candidate = _random_box(rng, config)
        if classify_relation(subject, candidate, frame) == relation:
            return candidate
    raise PlacementError(f'could not place a box {relation.label} after {config.max_attempts} attempts')


def _sample_layout(rng: np.random.Generator, config: SynthConfig) -> tuple[str, list[tuple[str, BoundingBox]]]:
    weights = np.array([a.weight for a in config.archetypes])
    arch = config.archetypes[int(rng.choice(len(config.archetypes), p=weights / weights.sum()))]

    present = [name for name in config.categories if rng.random() < arch.presence.get(name, 0.0)]
    if not present:
        present = [max(config.categories, key=lambda n: arch.presence.get(n, 0.0))]
    instances = {name: int(rng.integers(1, config.max_instances + 1)) for name in present}

    # Rule references are placed against the first instance of their subject.
    active: dict[str, PlantedRule] = {}
    for rule in config.rules:
        if rule.subject in instances and rule.reference in instances and rule.reference not in active:
            if rng.random() < rule.probability:
                active[rule.reference] = rule

    # Dependency order: a reference waits until its subject has been placed.
    placed: dict[str, list[BoundingBox]] = {}
    pending = list(present)
    while pending:
        ready = [name for name in pending if name not in active or active[name].subject in placed]
        if not ready:
            name = pending[0]
            logger.warning(
                'Planted rules form a cycle through %s; placing %r without its %s rule',
                ', '.join(repr(p) for p in pending),
                name,
                active[name].relation.label,
            )
            del active[name]
            ready = [name]
        for name in ready:
            rule = active.get(name)
            boxes: list[BoundingBox] = []
            for n in range(instances[name]):
                if n == 0 and rule is not None:
                    boxes.append(_place_related(rng, config, placed[rule.subject][0], rule.relation))
                else:
                    boxes.append(_random_box(rng, config))
            placed[name] = boxes
            pending.remove(name)
    objects = [(name, box) for name in config.categories if name in placed for box in placed[name]]
    return arch.name, objects


def _noisy_scores(rng: np.random.Generator, config: SynthConfig, categories: CategorySpace, label: int) -> np.ndarray:
    row = np.zeros(categories.num_labels)
    leak = min(1.0, config.noise * 2.0 * rng.random())
    row[label] = 1.0 - leak
    confusable = config.confusions.get(categories.name_of(label))
    if confusable is None:
        row[0] += leak
    else:
        row[categories.label_of(confusable)] += config.confusion_share * leak
        row[0] += (1.0 - config.confusion_share) * leak
    return row / row.sum()


def _sample_scene(
    rng: np.random.Generator,
    config: SynthConfig,
    categories: CategorySpace,
    image_id: str,
) -> SynthScene:
    arch_name, objects = _sample_layout(rng, config)
    frame = config.frame
    labels = tuple(categories.label_of(name) for name, _ in objects)
    annotations = ImageAnnotations(
        image_id=image_id,
        frame=frame,
        objects=tuple(GroundTruthObject(label, box) for label, (_, box) in zip(labels, objects)),
    )
    scores = np.array([_noisy_scores(rng, config, categories, label) for label in labels]).reshape(
        len(labels), categories.num_labels
    )
    proposals = ProposalSet(image_id, frame, tuple(box for _, box in objects), scores)
    arch = next(a for a in config.archetypes if a.name == arch_name)
    noise = rng.normal(0.0, 1.0, size=config.feature_dim)
    feature = SceneFeature(image_id, np.asarray(arch.mean) + config.feature_noise * noise)
    return SynthScene(arch_name, annotations, proposals, feature, labels)


def _generate_with(rng: np.random.Generator, config: SynthConfig, count: int, prefix: str) -> SynthDataset:
    categories = config.category_space
    scenes: list[SynthScene] = []
    skipped: list[SkippedScene] = []
    for index in range(count):
        image_id = f'{prefix}{index:05d}'
        try:
            scenes.append(_sample_scene(rng, config, categories, image_id))
        except PlacementError as exc:
            skipped.append(SkippedScene(index, image_id, str(exc)))
    if skipped:
        logger.warning('Synthetic generator skipped %d of %d scenes (unsatisfiable placement)', len(skipped), count)
    return SynthDataset(config, tuple(scenes), tuple(skipped))


def generate(config: SynthConfig) -> SynthDataset:
    """Draw `config.num_images` scenes; same config and seed, same dataset."""
    rng = np.random.default_rng(config.seed)
    dataset = _generate_with(rng, config, config.num_images, 'synth-')
    logger.info(
        'Generated %d synthetic scenes (seed %d, K=%d, noise %.2f)',
        len(dataset.scenes),
        config.seed,
        len(config.categories),
        config.noise,
    )
    return dataset


def plant_oracle_stats(config: SynthConfig, alpha: float = DEFAULT_ALPHA) -> PairwiseModel:
    """
    Pairwise model implied by the generator: expected pair/relation counts per
    scene from a large sample on an independent stream, scaled to
    `config.num_images` scenes and smoothed like learn_pairwise.
    """
    rng = np.random.default_rng([config.seed, _ORACLE_STREAM])
    sample = _generate_with(rng, config, config.oracle_samples, 'oracle-')
    if not sample.scenes:
        raise ValueError('oracle sample produced no scenes')
    counts = count_pairs((s.annotations for s in sample.scenes), config.category_space)
    expected = counts.astype(np.float64) * (config.num_images / len(sample.scenes))
    return model_from_counts(config.category_space, expected, alpha)


def planted_rules_summary(rules: Sequence[PlantedRule]) -> list[dict[str, Any]]:
    return [rule.to_dict() for rule in rules]

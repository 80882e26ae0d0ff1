"""
VOC-style per-class average precision, mAP, and the omega grid sweep.

Detections of a class are ranked by confidence and matched greedily: each one
claims the best-overlapping unclaimed, non-difficult ground-truth box of its
image at or above the IoU threshold. Failing that, an overlap with a difficult
box is ignored and anything else is a false positive.
"""

from __future__ import annotations

import logging
from collections.abc import Iterable, Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from config import get_config
from context_stats import CategorySpace, PairwiseModel
from crf_engine import CrfWeights, InferenceConfig, ProposalSet, rescore
from geometry import BoundingBox, ImageFrame, iou
from scene_prior import SceneFeature, ScenePriorModel
from validators import validate_finite, validate_unit_interval

_config = get_config()
logger = logging.getLogger(__name__)

ELEVEN_POINT_RECALLS = np.arange(11) / 10.0


class Interpolation(str, Enum):
    ELEVEN_POINT = '11pt'
    ALL_POINTS = 'all'


@dataclass(frozen=True)
class GroundTruthObject:
    label: int
    box: BoundingBox
    difficult: bool = False


@dataclass(frozen=True)
class ImageAnnotations:
    image_id: str
    frame: ImageFrame
    objects: tuple[GroundTruthObject, ...] = ()


@dataclass(frozen=True)
class GroundTruthSet:
    """Annotated images keyed by image id, in file order."""

    categories: CategorySpace
    images: Mapping[str, ImageAnnotations] = field(default_factory=dict)

    def __post_init__(self) -> None:
        k = self.categories.size
        for image in self.images.values():
            for obj in image.objects:
                if not 1 <= obj.label <= k:
                    raise ValueError(f'image {image.image_id!r}: label {obj.label} outside 1..{k}')

    def __iter__(self) -> Iterator[ImageAnnotations]:
        return iter(self.images.values())

    def __len__(self) -> int:
        return len(self.images)

    def num_positives(self, label: int) -> int:
        """Non-difficult instances of `label`."""
        return sum(1 for image in self for obj in image.objects if obj.label == label and not obj.difficult)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    label: int
    box: BoundingBox
    confidence: float
    proposal_index: int = 0

    def __post_init__(self) -> None:
        validate_unit_interval(self.confidence, 'confidence')


@dataclass(frozen=True)
class ClassResult:
    name: str
    label: int
    ap: float | None  # None when the class has no non-difficult ground truth
    tp: int
    fp: int
    npos: int

    def to_dict(self) -> dict[str, object]:
        return {'name': self.name, 'ap': self.ap, 'tp': self.tp, 'fp': self.fp, 'npos': self.npos}


@dataclass(frozen=True)
class EvalReport:
    classes: tuple[ClassResult, ...]
    map: float
    iou_threshold: float
    interpolation: Interpolation

    def ap_by_name(self) -> dict[str, float | None]:
        return {c.name: c.ap for c in self.classes}

    def to_dict(self) -> dict[str, object]:
        return {
            'map': self.map,
            'iou_threshold': self.iou_threshold,
            'interpolation': self.interpolation.value,
            'classes': [c.to_dict() for c in self.classes],
        }

    def to_text(self) -> str:
        """Aligned table, one column per class, AP in percent."""
        rows = [
            ('AP', [_pct(c.ap) for c in self.classes] + [_pct(self.map)]),
            ('TP', [str(c.tp) for c in self.classes] + ['']),
            ('FP', [str(c.fp) for c in self.classes] + ['']),
            ('GT', [str(c.npos) for c in self.classes] + ['']),
        ]
        return _render_table([c.name for c in self.classes] + ['mAP'], rows)


def _pct(value: float | None) -> str:
    return '-' if value is None else f'{100.0 * value:.1f}'


def _render_table(columns: Sequence[str], rows: Sequence[tuple[str, Sequence[str]]]) -> str:
    label_width = max([len(name) for name, _ in rows] + [0])
    widths = [max([len(col)] + [len(cells[i]) for _, cells in rows]) for i, col in enumerate(columns)]
    lines = [' ' * label_width + ' | ' + ' | '.join(col.rjust(w) for col, w in zip(columns, widths))]
    lines.append('-' * len(lines[0]))
    for name, cells in rows:
        lines.append(name.ljust(label_width) + ' | ' + ' | '.join(c.rjust(w) for c, w in zip(cells, widths)))
    return '\n'.join(lines) + '\n'


def extract_detections(
    proposal_sets: Iterable[ProposalSet],
    threshold: float = _config.detection_threshold,
) -> list[DetectionRecord]:
    """One record per (proposal, foreground label) with score >= threshold."""
    threshold = validate_finite(threshold, 'threshold')
    records: list[DetectionRecord] = []
    for ps in sorted(proposal_sets, key=lambda p: p.image_id):
        rows, labels = np.nonzero(ps.scores[:, 1:] >= threshold)
        for i, col in zip(rows.tolist(), labels.tolist()):
            records.append(
                DetectionRecord(
                    image_id=ps.image_id,
                    label=col + 1,
                    box=ps.boxes[i],
                    confidence=min(1.0, float(ps.scores[i, col + 1])),
                    proposal_index=i,
                )
            )
    return records


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, interpolation: Interpolation) -> float:
    """Area under the PR curve, 11-point VOC2007 or all-points envelope."""
    if Interpolation(interpolation) is Interpolation.ELEVEN_POINT:
        points = [float(np.max(precision[recall >= t])) if np.any(recall >= t) else 0.0 for t in ELEVEN_POINT_RECALLS]
        return float(np.mean(points))
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(
    detections: Sequence[DetectionRecord],
    truth: GroundTruthSet,
    label: int,
    iou_threshold: float = _config.iou_threshold,
    interpolation: Interpolation = Interpolation.ELEVEN_POINT,
) -> ClassResult:
    """AP for one class; `ap` is None when the class has no non-difficult ground truth."""
    for d in detections:
        if d.label != label:
            raise ValueError(f'detection of label {d.label} passed to AP for label {label}')
    npos = truth.num_positives(label)
    name = truth.categories.name_of(label)

    gt_boxes: dict[str, list[GroundTruthObject]] = {
        image.image_id: [obj for obj in image.objects if obj.label == label] for image in truth
    }
    claimed = {image_id: [False] * len(objs) for image_id, objs in gt_boxes.items()}

    ranked = sorted(detections, key=lambda d: (-d.confidence, d.image_id, d.proposal_index))
    tp = np.zeros(len(ranked))
    fp = np.zeros(len(ranked))
    for n, det in enumerate(ranked):
        objs = gt_boxes.get(det.image_id, [])
        # Best unclaimed non-difficult box above the threshold, ties to the lower index.
        best, best_iou = -1, iou_threshold
        hits_difficult = False
        for k, obj in enumerate(objs):
            overlap = iou(det.box, obj.box)
            if overlap < iou_threshold:
                continue
            if obj.difficult:
                hits_difficult = True
            elif not claimed[det.image_id][k] and (best < 0 or overlap > best_iou):
                best, best_iou = k, overlap
        if best >= 0:
            claimed[det.image_id][best] = True
            tp[n] = 1.0
        elif not hits_difficult:
            fp[n] = 1.0

    n_tp, n_fp = int(tp.sum()), int(fp.sum())
    if npos == 0:
        return ClassResult(name, label, None, n_tp, n_fp, 0)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    ap = interpolated_ap(recall, precision, interpolation)
    return ClassResult(name, label, ap, n_tp, n_fp, npos)


def mean_average_precision(
    detections: Iterable[DetectionRecord],
    truth: GroundTruthSet,
    iou_threshold: float = _config.iou_threshold,
    interpolation: Interpolation = Interpolation.ELEVEN_POINT,
) -> EvalReport:
    """Per-class AP and their mean over classes with ground truth (0.0 when none has)."""
    interpolation = Interpolation(interpolation)
    by_label: dict[int, list[DetectionRecord]] = {label: [] for label in range(1, truth.categories.size + 1)}
    for det in detections:
        if det.label not in by_label:
            raise ValueError(f'image {det.image_id!r}: detection label {det.label} outside 1..{truth.categories.size}')
        by_label[det.label].append(det)
    classes = tuple(
        average_precision(by_label[label], truth, label, iou_threshold, interpolation) for label in sorted(by_label)
    )
    defined = [c.ap for c in classes if c.ap is not None]
    mean_ap = float(np.mean(defined)) if defined else 0.0
    return EvalReport(classes, mean_ap, iou_threshold, interpolation)


def evaluate_proposals(
    proposal_sets: Iterable[ProposalSet],
    truth: GroundTruthSet,
    threshold: float = _config.detection_threshold,
    iou_threshold: float = _config.iou_threshold,
    interpolation: Interpolation = Interpolation.ELEVEN_POINT,
) -> EvalReport:
    return mean_average_precision(extract_detections(proposal_sets, threshold), truth, iou_threshold, interpolation)


def top1_accuracy(proposal_sets: Iterable[ProposalSet], true_labels: Mapping[str, Sequence[int]]) -> float:
    """Fraction of proposals whose argmax label is the recorded true label."""
    correct = 0
    total = 0
    for ps in proposal_sets:
        labels = np.asarray(true_labels[ps.image_id], dtype=np.intp)
        if labels.shape != (len(ps),):
            raise ValueError(f'image {ps.image_id!r}: {labels.size} true labels for {len(ps)} proposals')
        if len(ps):
            correct += int(np.sum(np.argmax(ps.scores, axis=1) == labels))
        total += len(ps)
    return correct / total if total else 0.0


def sign_changes(values: Sequence[float]) -> int:
    """Sign changes of the first difference, flat steps skipped."""
    steps = np.sign(np.diff(np.asarray(values, dtype=np.float64)))
    steps = steps[steps != 0]
    return int(np.count_nonzero(steps[1:] != steps[:-1]))


@dataclass(frozen=True)
class RescoreInputs:
    """Detections paired with their scene features, shared read-only by sweep workers."""

    proposals: tuple[ProposalSet, ...]
    features: Mapping[str, SceneFeature]

    def __post_init__(self) -> None:
        missing = [ps.image_id for ps in self.proposals if ps.image_id not in self.features]
        if missing:
            raise ValueError(f'no scene feature for image {missing[0]!r} ({len(missing)} missing)')


def rescore_all(
    inputs: RescoreInputs,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    weights: CrfWeights,
    cfg: InferenceConfig,
) -> list[ProposalSet]:
    return [rescore(ps, pairwise, scene, inputs.features[ps.image_id], weights, cfg) for ps in inputs.proposals]


@dataclass(frozen=True)
class SweepRow:
    omega_p: float
    omega_g: float
    report: EvalReport

    @property
    def map(self) -> float:
        return self.report.map


@dataclass(frozen=True)
class SweepResult:
    rows: tuple[SweepRow, ...]
    best: SweepRow

    def curve(self, omega_g: float) -> list[tuple[float, float]]:
        """(omega_p, mAP) at a fixed omega_g, ascending omega_p."""
        return sorted((row.omega_p, row.map) for row in self.rows if row.omega_g == omega_g)


def _evaluate_point(
    inputs: RescoreInputs,
    truth: GroundTruthSet,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    weights: CrfWeights,
    cfg: InferenceConfig,
    threshold: float,
    iou_threshold: float,
    interpolation: Interpolation,
) -> EvalReport:
    rescored = rescore_all(inputs, pairwise, scene, weights, cfg)
    return evaluate_proposals(rescored, truth, threshold, iou_threshold, interpolation)


def _evaluate_points(
    points: Sequence[CrfWeights],
    inputs: RescoreInputs,
    truth: GroundTruthSet,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    cfg: InferenceConfig,
    threshold: float,
    iou_threshold: float,
    interpolation: Interpolation,
    threads: int,
) -> list[EvalReport]:
    """One report per weight setting, in the order of `points`."""
    reports: list[EvalReport | None] = [None] * len(points)
    shared = (truth, pairwise, scene)
    tail = (cfg, threshold, iou_threshold, interpolation)
    if threads <= 1 or len(points) == 1:
        for n, w in enumerate(points):
            reports[n] = _evaluate_point(inputs, *shared, w, *tail)
    else:
        with ThreadPoolExecutor(max_workers=min(threads, len(points))) as executor:
            futures = {executor.submit(_evaluate_point, inputs, *shared, w, *tail): n for n, w in enumerate(points)}
            for future in as_completed(futures):
                reports[futures[future]] = future.result()
    return [r for r in reports if r is not None]


def sweep_weights(
    inputs: RescoreInputs,
    truth: GroundTruthSet,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    omega_p_grid: Sequence[float],
    omega_g_grid: Sequence[float],
    cfg: InferenceConfig | None = None,
    threshold: float = _config.detection_threshold,
    iou_threshold: float = _config.iou_threshold,
    interpolation: Interpolation = Interpolation.ELEVEN_POINT,
    threads: int = 1,
) -> SweepResult:
    """
    Evaluate every (omega_p, omega_g) grid point. Rows come back ordered by
    omega_p then omega_g whatever the thread count; best is the highest mAP,
    ties to the smaller omega_p, then the smaller omega_g.
    """
    cfg = cfg or InferenceConfig()
    points = [CrfWeights(p, g) for p in sorted(set(omega_p_grid)) for g in sorted(set(omega_g_grid))]
    if not points:
        raise ValueError('weight grid is empty')
    logger.info('Sweeping %d grid points over %d images (%d threads)', len(points), len(inputs.proposals), threads)

    reports = _evaluate_points(
        points, inputs, truth, pairwise, scene, cfg, threshold, iou_threshold, Interpolation(interpolation), threads
    )
    rows = tuple(SweepRow(w.omega_p, w.omega_g, report) for w, report in zip(points, reports))
    best = rows[0]
    for row in rows[1:]:
        if row.map > best.map:
            best = row
    logger.info('Best grid point omega_p=%g omega_g=%g mAP=%.4f', best.omega_p, best.omega_g, best.map)
    return SweepResult(rows, best)


ABLATION_ROWS = ('baseline', 'pairwise', 'global', 'pairwise+global')


@dataclass(frozen=True)
class AblationTable:
    """Baseline against each context term alone and both together, at fixed weights."""

    weights: CrfWeights
    reports: Mapping[str, EvalReport]

    def deltas(self, row: str) -> dict[str, float | None]:
        base = self.reports['baseline']
        out: dict[str, float | None] = {}
        for b, c in zip(base.classes, self.reports[row].classes):
            out[c.name] = None if b.ap is None or c.ap is None else c.ap - b.ap
        out['mAP'] = self.reports[row].map - base.map
        return out

    def to_dict(self) -> dict[str, object]:
        return {
            'omega_p': self.weights.omega_p,
            'omega_g': self.weights.omega_g,
            'rows': {name: self.reports[name].to_dict() for name in ABLATION_ROWS},
            'deltas': {name: self.deltas(name) for name in ABLATION_ROWS[1:]},
        }

    def to_text(self) -> str:
        first = self.reports['baseline']
        columns = [c.name for c in first.classes] + ['mAP']
        rows = []
        for name in ABLATION_ROWS:
            report = self.reports[name]
            rows.append((name, [_pct(c.ap) for c in report.classes] + [_pct(report.map)]))
        delta = self.deltas('pairwise+global')
        rows.append(('delta', [_signed_pct(delta[col]) for col in columns]))
        return _render_table(columns, rows)


def _signed_pct(value: float | None) -> str:
    return '-' if value is None else f'{100.0 * value:+.1f}'


def ablation_table(
    inputs: RescoreInputs,
    truth: GroundTruthSet,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    weights: CrfWeights,
    cfg: InferenceConfig | None = None,
    threshold: float = _config.detection_threshold,
    iou_threshold: float = _config.iou_threshold,
    interpolation: Interpolation = Interpolation.ELEVEN_POINT,
    threads: int = 1,
) -> AblationTable:
    cfg = cfg or InferenceConfig()
    settings = [
        CrfWeights(0.0, 0.0),
        CrfWeights(weights.omega_p, 0.0),
        CrfWeights(0.0, weights.omega_g),
        weights,
    ]
    reports = _evaluate_points(
        settings, inputs, truth, pairwise, scene, cfg, threshold, iou_threshold, Interpolation(interpolation), threads
    )
    return AblationTable(weights, dict(zip(ABLATION_ROWS, reports)))

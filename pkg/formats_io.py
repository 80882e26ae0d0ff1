"""
File formats: the only place where external bytes become domain types.

Detections, annotations and features are JSON lines, one image per line.
Models, reports and the dataset manifest are single JSON documents carrying a
`version`. Every write goes to a temp file in the target directory and is
renamed into place. Floats are written with Python's shortest round-trip repr,
so reading a file back gives the same doubles bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from context_stats import CategorySpace, PairwiseModel, check_consistency, relation_names
from crf_engine import InferenceSummary, ProposalSet
from evaluation import AblationTable, EvalReport, GroundTruthObject, GroundTruthSet, ImageAnnotations, SweepResult
from geometry import NUM_RELATIONS, BoundingBox, ImageFrame
from scene_prior import SceneFeature, ScenePriorModel
from validators import IngestError, UnsupportedVersionError, normalize_score_row

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_FORMAT = 'ctxcrf-dataset'
PAIRWISE_KIND = 'pairwise'
SCENE_KIND = 'scene_prior'
REPORT_KIND = 'eval_report'
ABLATION_KIND = 'ablation'

PathLike = str | os.PathLike[str]


# --------------------------------------------------------------------------
# Low-level helpers
# --------------------------------------------------------------------------


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write `text` to a temp file next to `path`, then rename over it."""
    target = Path(path)
    directory = target.parent if str(target.parent) else Path('.')
    fd, tmp = tempfile.mkstemp(prefix=f'.{target.name}.', suffix='.tmp', dir=directory)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _dumps(value: Any) -> str:
    return json.dumps(value, allow_nan=False, ensure_ascii=False)


def _iter_json_lines(path: PathLike) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (line number, object) for every nonblank line."""
    with open(path, encoding='utf-8') as fh:
        for line_no, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise IngestError(f'invalid JSON: {exc.msg}', path=str(path), line=line_no) from None
            if not isinstance(record, dict):
                raise IngestError('expected a JSON object', path=str(path), line=line_no)
            yield line_no, record


def _read_json(path: PathLike) -> Any:
    with open(path, encoding='utf-8') as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise IngestError(f'invalid JSON: {exc.msg}', path=str(path), line=exc.lineno) from None


class _Record:
    """Typed field access for one parsed line, raising IngestError with location."""

    def __init__(self, data: Mapping[str, Any], path: PathLike, line: int | None) -> None:
        self.data = data
        self.path = str(path)
        self.line = line

    def error(self, reason: str, field_name: str | None = None) -> IngestError:
        return IngestError(reason, path=self.path, line=self.line, field=field_name)

    def require(self, key: str) -> Any:
        if key not in self.data:
            raise self.error('missing required field', key)
        return self.data[key]

    def string(self, key: str) -> str:
        value = self.require(key)
        if not isinstance(value, str) or not value.strip():
            raise self.error('must be a nonempty string', key)
        return value

    def number(self, key: str, value: Any = None) -> float:
        raw = self.require(key) if value is None else value
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or not math.isfinite(raw):
            raise self.error(f'must be a finite number, got {raw!r}', key)
        return float(raw)

    def array(self, key: str) -> list[Any]:
        value = self.require(key)
        if not isinstance(value, list):
            raise self.error('must be a list', key)
        return value

    def frame(self) -> ImageFrame:
        width = self.number('width')
        height = self.number('height')
        if width <= 0 or height <= 0:
            raise self.error(f'frame must be positive, got {width} x {height}', 'width')
        return ImageFrame(width, height)

    def box(self, raw: Any, key: str) -> list[float]:
        if not isinstance(raw, list) or len(raw) != 4:
            raise self.error('box must be [x_min, y_min, x_max, y_max]', key)
        return [self.number(key, v) for v in raw]


def _check_version(data: Mapping[str, Any], path: PathLike, kind: str | None = None) -> None:
    version = data.get('version')
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f'unsupported version {version!r} (expected {FORMAT_VERSION})', path=str(path), field='version'
        )
    if kind is not None and data.get('kind') != kind:
        raise IngestError(f'expected kind {kind!r}, got {data.get("kind")!r}', path=str(path), field='kind')


# --------------------------------------------------------------------------
# Categories
# --------------------------------------------------------------------------


def read_categories(path: PathLike) -> CategorySpace:
    """A JSON list of names, or any JSON object with a `categories` list."""
    data = _read_json(path)
    names = data.get('categories') if isinstance(data, dict) else data
    if not isinstance(names, list):
        raise IngestError('expected a list of category names', path=str(path), field='categories')
    try:
        return CategorySpace(tuple(names))
    except ValueError as exc:
        raise IngestError(str(exc), path=str(path), field='categories') from None


# --------------------------------------------------------------------------
# Detections
# --------------------------------------------------------------------------


def read_detections(path: PathLike) -> list[ProposalSet]:
    """
    One ProposalSet per line. Score rows within 1e-3 of the simplex are
    renormalized, others rejected; boxes are clipped to the frame and rows
    whose box has no area left are dropped.
    """
    pending: list[tuple[str, ImageFrame, list[BoundingBox], list[np.ndarray], InferenceSummary | None]] = []
    seen: set[str] = set()
    num_labels: int | None = None
    dropped = 0
    for line_no, data in _iter_json_lines(path):
        rec = _Record(data, path, line_no)
        image_id = rec.string('image_id')
        if image_id in seen:
            raise rec.error(f'duplicate image {image_id!r}', 'image_id')
        seen.add(image_id)
        frame = rec.frame()
        raw_boxes = rec.array('boxes')
        raw_scores = rec.array('scores')
        if len(raw_boxes) != len(raw_scores):
            raise rec.error(f'image {image_id!r}: {len(raw_boxes)} boxes but {len(raw_scores)} score rows', 'scores')

        boxes: list[BoundingBox] = []
        rows: list[np.ndarray] = []
        for i, (raw_box, raw_row) in enumerate(zip(raw_boxes, raw_scores)):
            if not isinstance(raw_row, list) or any(
                isinstance(v, bool) or not isinstance(v, (int, float)) for v in raw_row
            ):
                raise rec.error(f'image {image_id!r}: row {i} must be a list of numbers', 'scores')
            if num_labels is None:
                num_labels = len(raw_row)
            if len(raw_row) != num_labels or num_labels < 2:
                raise rec.error(f'image {image_id!r}: row {i} has {len(raw_row)} scores, expected {num_labels}', 'scores')
            try:
                row = normalize_score_row(raw_row)
            except ValueError as exc:
                raise rec.error(f'image {image_id!r}: row {i}: {exc}', 'scores') from None
            box = BoundingBox.clipped(rec.box(raw_box, 'boxes'), frame)
            if box is None:
                dropped += 1
                continue
            boxes.append(box)
            rows.append(row)

        pending.append((image_id, frame, boxes, rows, _inference_summary(rec)))

    # Images without boxes take the score width of the rest of the file.
    width = num_labels if num_labels is not None else 2
    out = [
        ProposalSet(image_id, frame, tuple(boxes), np.array(rows).reshape(len(rows), width), summary)
        for image_id, frame, boxes, rows, summary in pending
    ]
    if dropped:
        logger.warning('%s: dropped %d proposals with no area inside the frame', path, dropped)
    return out


def _inference_summary(rec: _Record) -> InferenceSummary | None:
    info = rec.data.get('inference')
    if info is None:
        return None
    if not isinstance(info, dict):
        raise rec.error('must be an object', 'inference')
    counts: dict[str, int] = {}
    for key in ('iterations', 'dropped'):
        raw = info.get(key, 0)
        if isinstance(raw, bool) or not isinstance(raw, int) or raw < 0:
            raise rec.error(f'must be a non-negative integer, got {raw!r}', f'inference.{key}')
        counts[key] = raw
    converged = info.get('converged', False)
    if not isinstance(converged, bool):
        raise rec.error(f'must be true or false, got {converged!r}', 'inference.converged')
    max_change = info.get('max_change', 0.0)
    if isinstance(max_change, bool) or not isinstance(max_change, (int, float)) or not math.isfinite(max_change):
        raise rec.error(f'must be a finite number, got {max_change!r}', 'inference.max_change')
    return InferenceSummary(counts['iterations'], converged, float(max_change), counts['dropped'])


def _detection_record(ps: ProposalSet) -> dict[str, Any]:
    record: dict[str, Any] = {
        'image_id': ps.image_id,
        'width': ps.frame.width,
        'height': ps.frame.height,
        'boxes': [b.to_list() for b in ps.boxes],
        'scores': ps.scores.tolist(),
    }
    if ps.inference is not None:
        record['inference'] = ps.inference.to_dict()
    return record


def write_detections(path: PathLike, proposal_sets: Iterable[ProposalSet]) -> None:
    atomic_write_text(path, ''.join(_dumps(_detection_record(ps)) + '\n' for ps in proposal_sets))


# --------------------------------------------------------------------------
# Annotations
# --------------------------------------------------------------------------


def _annotation_names(path: PathLike) -> CategorySpace:
    names: set[str] = set()
    for line_no, data in _iter_json_lines(path):
        rec = _Record(data, path, line_no)
        for obj in rec.array('objects'):
            if isinstance(obj, dict) and isinstance(obj.get('label'), str):
                names.add(obj['label'].strip())
    if not names:
        raise IngestError('no labelled objects to infer categories from', path=str(path))
    return CategorySpace(tuple(sorted(names)))


def read_annotations(path: PathLike, categories: CategorySpace | None = None) -> GroundTruthSet:
    """
    Ground truth per image. Labels are category names; without `categories`
    the space is the sorted set of names found in the file.
    """
    if categories is None:
        categories = _annotation_names(path)
    images: dict[str, ImageAnnotations] = {}
    dropped = 0
    for line_no, data in _iter_json_lines(path):
        rec = _Record(data, path, line_no)
        image_id = rec.string('image_id')
        if image_id in images:
            raise rec.error(f'duplicate image {image_id!r}', 'image_id')
        frame = rec.frame()
        objects: list[GroundTruthObject] = []
        for raw in rec.array('objects'):
            if not isinstance(raw, dict):
                raise rec.error('each object must be a JSON object', 'objects')
            name = raw.get('label')
            if not isinstance(name, str):
                raise rec.error('object label must be a category name', 'label')
            try:
                label = categories.label_of(name.strip())
            except ValueError:
                raise rec.error(f'unknown category {name!r}', 'label') from None
            difficult = raw.get('difficult', False)
            if not isinstance(difficult, bool):
                raise rec.error('difficult must be true or false', 'difficult')
            box = BoundingBox.clipped(rec.box(raw.get('box'), 'box'), frame)
            if box is None:
                dropped += 1
                continue
            objects.append(GroundTruthObject(label, box, difficult))
        images[image_id] = ImageAnnotations(image_id, frame, tuple(objects))
    if dropped:
        logger.warning('%s: dropped %d objects with no area inside the frame', path, dropped)
    return GroundTruthSet(categories, images)


def write_annotations(path: PathLike, truth: GroundTruthSet) -> None:
    lines = []
    for image in truth:
        record = {
            'image_id': image.image_id,
            'width': image.frame.width,
            'height': image.frame.height,
            'objects': [
                {'label': truth.categories.name_of(o.label), 'box': o.box.to_list(), 'difficult': o.difficult}
                for o in image.objects
            ],
        }
        lines.append(_dumps(record) + '\n')
    atomic_write_text(path, ''.join(lines))


# --------------------------------------------------------------------------
# Scene features
# --------------------------------------------------------------------------


def read_features(path: PathLike) -> dict[str, SceneFeature]:
    """Features keyed by image id, in file order; every vector has the same dimension."""
    out: dict[str, SceneFeature] = {}
    dim: int | None = None
    for line_no, data in _iter_json_lines(path):
        rec = _Record(data, path, line_no)
        image_id = rec.string('image_id')
        if image_id in out:
            raise rec.error(f'duplicate image {image_id!r}', 'image_id')
        values = [rec.number('feature', v) for v in rec.array('feature')]
        if not values:
            raise rec.error('feature vector is empty', 'feature')
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise rec.error(f'feature has dimension {len(values)}, expected {dim}', 'feature')
        out[image_id] = SceneFeature(image_id, np.array(values))
    return out


def write_features(path: PathLike, features: Iterable[SceneFeature]) -> None:
    atomic_write_text(
        path,
        ''.join(_dumps({'image_id': f.image_id, 'feature': f.vector.tolist()}) + '\n' for f in features),
    )


# --------------------------------------------------------------------------
# Models
# --------------------------------------------------------------------------


def pairwise_to_dict(model: PairwiseModel) -> dict[str, Any]:
    counts = model.counts
    return {
        'version': FORMAT_VERSION,
        'kind': PAIRWISE_KIND,
        'categories': list(model.categories.names),
        'alpha': model.alpha,
        'relations': list(relation_names()),
        'counts': counts.tolist(),
        'likelihood': model.likelihood.tolist(),
    }


def pairwise_from_dict(data: Mapping[str, Any], path: PathLike = '<memory>') -> PairwiseModel:
    _check_version(data, path, PAIRWISE_KIND)
    rec = _Record(data, path, None)
    try:
        categories = CategorySpace(tuple(rec.array('categories')))
    except ValueError as exc:
        raise rec.error(str(exc), 'categories') from None
    if rec.array('relations') != list(relation_names()):
        raise rec.error('relation order does not match this build', 'relations')
    alpha = rec.number('alpha')
    shape = (categories.num_labels, categories.num_labels, NUM_RELATIONS)
    raw_counts = np.array(rec.array('counts'))
    if raw_counts.shape != shape or raw_counts.dtype.kind not in 'iuf':
        raise rec.error(f'counts must be numeric with shape {shape}', 'counts')
    counts = raw_counts.astype(np.int64) if raw_counts.dtype.kind in 'iu' else raw_counts.astype(np.float64)
    likelihood = np.array(rec.array('likelihood'), dtype=np.float64)
    if likelihood.shape != shape:
        raise rec.error(f'likelihood must have shape {shape}', 'likelihood')
    if alpha <= 0 or np.any(counts < 0):
        raise rec.error('alpha must be > 0 and counts >= 0', 'counts')
    model = PairwiseModel(
        categories=categories,
        alpha=alpha,
        counts=counts,
        likelihood=likelihood,
        smoothing_only=not bool(counts[1:, 1:, :].any()),
    )
    problems = check_consistency(model)
    if problems:
        raise rec.error('; '.join(problems), 'likelihood')
    return model


def scene_to_dict(model: ScenePriorModel) -> dict[str, Any]:
    return {
        'version': FORMAT_VERSION,
        'kind': SCENE_KIND,
        'categories': list(model.categories.names),
        'dim': model.dim,
        'lambda': model.lam,
        'weights': model.weights.tolist(),
        'biases': model.biases.tolist(),
    }


def scene_from_dict(data: Mapping[str, Any], path: PathLike = '<memory>') -> ScenePriorModel:
    _check_version(data, path, SCENE_KIND)
    rec = _Record(data, path, None)
    try:
        categories = CategorySpace(tuple(rec.array('categories')))
        weights = np.array(rec.array('weights'), dtype=np.float64)
        model = ScenePriorModel(
            categories=categories,
            weights=weights,
            biases=np.array(rec.array('biases'), dtype=np.float64),
            lam=rec.number('lambda'),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, IngestError):
            raise
        raise rec.error(str(exc), 'weights') from None
    if int(rec.number('dim')) != model.dim:
        raise rec.error(f'dim {data["dim"]} does not match weights ({model.dim})', 'dim')
    return model


def write_model(path: PathLike, model: PairwiseModel | ScenePriorModel) -> None:
    data = pairwise_to_dict(model) if isinstance(model, PairwiseModel) else scene_to_dict(model)
    atomic_write_text(path, _dumps(data) + '\n')


def read_pairwise_model(path: PathLike) -> PairwiseModel:
    data = _read_json(path)
    if not isinstance(data, dict):
        raise IngestError('expected a JSON object', path=str(path))
    return pairwise_from_dict(data, path)


def read_scene_model(path: PathLike) -> ScenePriorModel:
    data = _read_json(path)
    if not isinstance(data, dict):
        raise IngestError('expected a JSON object', path=str(path))
    return scene_from_dict(data, path)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def write_report(path: PathLike, report: EvalReport | AblationTable, text_path: PathLike | None = None) -> None:
    """JSON report, plus the aligned text table when `text_path` is given."""
    kind = REPORT_KIND if isinstance(report, EvalReport) else ABLATION_KIND
    payload = {'version': FORMAT_VERSION, 'kind': kind, **report.to_dict()}
    atomic_write_text(path, json.dumps(payload, allow_nan=False, indent=2) + '\n')
    if text_path is not None:
        atomic_write_text(text_path, report.to_text())


def sweep_csv(result: SweepResult) -> str:
    """Header omega_p,omega_g,map,<class...>; undefined AP cells are empty."""
    names = [c.name for c in result.rows[0].report.classes]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['omega_p', 'omega_g', 'map', *names])
    for row in result.rows:
        aps = ['' if c.ap is None else repr(c.ap) for c in row.report.classes]
        writer.writerow([repr(row.omega_p), repr(row.omega_g), repr(row.map), *aps])
    return buf.getvalue()


def write_sweep(path: PathLike, result: SweepResult) -> None:
    atomic_write_text(path, sweep_csv(result))


# --------------------------------------------------------------------------
# Dataset manifest
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestImage:
    image_id: str
    width: float
    height: float
    line: int  # 1-based line in the detections/annotations/features files


@dataclass(frozen=True)
class DatasetManifest:
    categories: CategorySpace
    images: tuple[ManifestImage, ...]
    seed: int | None = None
    planted_rules: tuple[Mapping[str, Any], ...] = ()
    skipped: tuple[Mapping[str, Any], ...] = ()
    files: Mapping[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            'format': MANIFEST_FORMAT,
            'version': FORMAT_VERSION,
            'categories': list(self.categories.names),
            'seed': self.seed,
            'files': dict(self.files),
            'planted_rules': [dict(r) for r in self.planted_rules],
            'images': [
                {'image_id': im.image_id, 'width': im.width, 'height': im.height, 'line': im.line}
                for im in self.images
            ],
            'skipped': [dict(s) for s in self.skipped],
        }


def write_manifest(path: PathLike, manifest: DatasetManifest) -> None:
    atomic_write_text(path, json.dumps(manifest.to_dict(), allow_nan=False, indent=2) + '\n')


def read_manifest(path: PathLike) -> DatasetManifest:
    data = _read_json(path)
    if not isinstance(data, dict) or data.get('format') != MANIFEST_FORMAT:
        raise IngestError(f'not a {MANIFEST_FORMAT} manifest', path=str(path), field='format')
    _check_version(data, path)
    rec = _Record(data, path, None)
    try:
        categories = CategorySpace(tuple(rec.array('categories')))
    except ValueError as exc:
        raise rec.error(str(exc), 'categories') from None
    images = []
    for raw in rec.array('images'):
        if not isinstance(raw, dict):
            raise rec.error('each image entry must be an object', 'images')
        entry = _Record(raw, path, None)
        images.append(
            ManifestImage(entry.string('image_id'), entry.number('width'), entry.number('height'), int(entry.number('line')))
        )
    seed = data.get('seed')
    return DatasetManifest(
        categories=categories,
        images=tuple(images),
        seed=int(seed) if seed is not None else None,
        planted_rules=tuple(data.get('planted_rules', [])),
        skipped=tuple(data.get('skipped', [])),
        files=dict(data.get('files', {})),
    )

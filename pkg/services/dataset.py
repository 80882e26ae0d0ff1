"""Dataset service: load rescoring inputs and export synthetic datasets."""

from __future__ import annotations

import logging
import os
from pathlib import Path

import formats_io
from evaluation import RescoreInputs
from synth import SynthDataset, planted_rules_summary

logger = logging.getLogger(__name__)

DETECTIONS_FILE = 'detections.jsonl'
ANNOTATIONS_FILE = 'annotations.jsonl'
FEATURES_FILE = 'features.jsonl'
MANIFEST_FILE = 'manifest.json'


class DatasetService:
    """File-level orchestration shared by the CLI commands."""

    @staticmethod
    def load_inputs(detections_path: str | os.PathLike[str], features_path: str | os.PathLike[str]) -> RescoreInputs:
        proposals = formats_io.read_detections(detections_path)
        features = formats_io.read_features(features_path)
        logger.info('Loaded %d detection records and %d feature records', len(proposals), len(features))
        return RescoreInputs(tuple(proposals), features)

    @staticmethod
    def export_synthetic(dataset: SynthDataset, out_dir: str | os.PathLike[str]) -> dict[str, str]:
        """Write detections, annotations, features and the manifest; returns the written paths."""
        directory = Path(out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            'detections': directory / DETECTIONS_FILE,
            'annotations': directory / ANNOTATIONS_FILE,
            'features': directory / FEATURES_FILE,
            'manifest': directory / MANIFEST_FILE,
        }
        formats_io.write_detections(paths['detections'], dataset.proposal_sets())
        formats_io.write_annotations(paths['annotations'], dataset.ground_truth())
        formats_io.write_features(paths['features'], [s.feature for s in dataset.scenes])
        manifest = formats_io.DatasetManifest(
            categories=dataset.categories,
            images=tuple(
                formats_io.ManifestImage(s.image_id, s.annotations.frame.width, s.annotations.frame.height, n)
                for n, s in enumerate(dataset.scenes, 1)
            ),
            seed=dataset.config.seed,
            planted_rules=tuple(planted_rules_summary(dataset.config.rules)),
            skipped=tuple(s.to_dict() for s in dataset.skipped),
            files={key: path.name for key, path in paths.items() if key != 'manifest'},
        )
        formats_io.write_manifest(paths['manifest'], manifest)
        logger.info('Wrote synthetic dataset (%d scenes) to %s', len(dataset.scenes), directory)
        return {key: str(path) for key, path in paths.items()}

"""Rescore service: batch mean-field rescoring across images."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed

from context_stats import PairwiseModel
from crf_engine import CrfWeights, InferenceConfig, ProposalSet, rescore
from evaluation import RescoreInputs
from scene_prior import ScenePriorModel

logger = logging.getLogger(__name__)


class RescoreService:
    """Runs rescore over every image with shared read-only models."""

    @staticmethod
    def rescore_images(
        inputs: RescoreInputs,
        pairwise: PairwiseModel,
        scene: ScenePriorModel,
        weights: CrfWeights,
        cfg: InferenceConfig | None = None,
        threads: int = 1,
    ) -> list[ProposalSet]:
        """Rescored sets in input order, whatever the thread count."""
        cfg = cfg or InferenceConfig()
        proposals = inputs.proposals
        results: list[ProposalSet | None] = [None] * len(proposals)

        def rescore_one(index: int) -> tuple[int, ProposalSet]:
            ps = proposals[index]
            return index, rescore(ps, pairwise, scene, inputs.features[ps.image_id], weights, cfg)

        if threads <= 1 or len(proposals) <= 1:
            for n in range(len(proposals)):
                results[n] = rescore_one(n)[1]
        else:
            with ThreadPoolExecutor(max_workers=min(threads, len(proposals))) as executor:
                futures = {executor.submit(rescore_one, n): proposals[n].image_id for n in range(len(proposals))}
                for future in as_completed(futures):
                    index, rescored = future.result()
                    results[index] = rescored

        done = [r for r in results if r is not None]
        unconverged = sum(1 for r in done if r.inference is not None and not r.inference.converged)
        if unconverged:
            logger.warning('%d of %d images stopped at the iteration cap', unconverged, len(done))
        logger.info(
            'Rescored %d images (omega_p=%g, omega_g=%g, rule=%s)',
            len(done),
            weights.omega_p,
            weights.omega_g,
            cfg.update_rule.value,
        )
        return done

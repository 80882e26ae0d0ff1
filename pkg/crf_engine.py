"""
Fully-connected CRF over one image's proposals: energy, mean-field marginals,
an exact enumeration oracle, and rescoring.

Labels are 0..K with 0 = background. The pair term for proposals (i, j) reads
the relation from a per-image relation matrix R built once by
geometry.relation_matrix, so the energy and the mean-field update see the same
orientation for every pair.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from config import get_config
from context_stats import PairwiseModel
from geometry import BoundingBox, ImageFrame, relation_matrix
from scene_prior import SceneFeature, ScenePriorModel, global_potentials
from validators import validate_damping, validate_non_negative, validate_positive_int

_config = get_config()
logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-6
MAX_ENUMERATION = 10**6
_Q_FLOOR = 1e-300

# Assignment x_1..x_N of labels in 0..K.
LabeledConfiguration = Sequence[int]


class UpdateRule(str, Enum):
    """Which source labels feed the context field of a target label."""

    ALL_LABELS = 'all'
    EXCLUDE_SELF = 'exclude-self'


class UpdateSchedule(str, Enum):
    """Order of mean-field updates within one iteration."""

    PARALLEL = 'parallel'
    SEQUENTIAL = 'sequential'


@dataclass(frozen=True)
class CrfWeights:
    omega_p: float = 0.0
    omega_g: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, 'omega_p', validate_non_negative(self.omega_p, 'omega_p'))
        object.__setattr__(self, 'omega_g', validate_non_negative(self.omega_g, 'omega_g'))


@dataclass(frozen=True)
class InferenceConfig:
    max_iterations: int = _config.max_iterations
    tolerance: float = _config.tolerance
    damping: float = _config.damping
    score_clamp: float = _config.score_clamp
    max_proposals: int = _config.max_proposals
    update_rule: UpdateRule = UpdateRule(_config.update_rule)
    schedule: UpdateSchedule = UpdateSchedule(_config.update_schedule)

    def __post_init__(self) -> None:
        validate_positive_int(self.max_iterations, 'max_iterations')
        validate_positive_int(self.max_proposals, 'max_proposals')
        if not 0.0 < self.tolerance < 1.0:
            raise ValueError(f'tolerance must lie in (0, 1), got {self.tolerance}')
        validate_damping(self.damping)
        if not 0.0 < self.score_clamp < 1.0:
            raise ValueError(f'score_clamp must lie in (0, 1), got {self.score_clamp}')
        object.__setattr__(self, 'update_rule', UpdateRule(self.update_rule))
        object.__setattr__(self, 'schedule', UpdateSchedule(self.schedule))


@dataclass(frozen=True)
class InferenceSummary:
    iterations: int
    converged: bool
    max_change: float
    dropped: int = 0

    def to_dict(self) -> dict[str, object]:
        return {
            'iterations': self.iterations,
            'converged': self.converged,
            'max_change': self.max_change,
            'dropped': self.dropped,
        }


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """One image's proposals: N boxes and an N x (K+1) score matrix on the simplex."""

    image_id: str
    frame: ImageFrame
    boxes: tuple[BoundingBox, ...]
    scores: np.ndarray
    inference: InferenceSummary | None = field(default=None)

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        boxes = tuple(self.boxes)
        if scores.ndim != 2 or scores.shape[1] < 2:
            raise ValueError(f'image {self.image_id!r}: scores must be N x (K+1) with K >= 1, got {scores.shape}')
        if scores.shape[0] != len(boxes):
            raise ValueError(f'image {self.image_id!r}: {len(boxes)} boxes but {scores.shape[0]} score rows')
        if not np.all(np.isfinite(scores)) or np.any(scores < 0):
            raise ValueError(f'image {self.image_id!r}: scores must be finite and non-negative')
        sums = scores.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE)
        if bad.size:
            row = int(bad[0])
            raise ValueError(f'image {self.image_id!r}: score row {row} sums to {sums[row]:.9g}')
        object.__setattr__(self, 'scores', scores)
        object.__setattr__(self, 'boxes', boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def num_labels(self) -> int:
        return int(self.scores.shape[1])


@dataclass(frozen=True, eq=False)
class MarginalSet:
    """Per-proposal label distributions Q (N x (K+1)) and how they were obtained."""

    q: np.ndarray
    iterations: int
    converged: bool
    max_change: float
    kept: np.ndarray | None = None
    log_partition: float | None = None


def _check_inputs(
    proposals: ProposalSet,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    f: SceneFeature,
) -> None:
    if pairwise.categories.names != scene.categories.names:
        raise ValueError('pairwise and scene-prior models use different category lists')
    if len(proposals) and proposals.num_labels != pairwise.categories.num_labels:
        raise ValueError(
            f'image {proposals.image_id!r}: {proposals.num_labels} score columns, '
            f'models expect {pairwise.categories.num_labels}'
        )
    if f.dim != scene.dim:
        raise ValueError(f'image {f.image_id!r}: feature dimension {f.dim} does not match model dimension {scene.dim}')


def unary_potential(proposals: ProposalSet, i: int, label: int, score_clamp: float = _config.score_clamp) -> float:
    """phi_u = -ln max(S[i, label], eps)."""
    if not 0 <= i < len(proposals):
        raise IndexError(f'proposal {i} outside 0..{len(proposals) - 1}')
    return -math.log(max(float(proposals.scores[i, label]), score_clamp))


def unary_potentials(proposals: ProposalSet, score_clamp: float = _config.score_clamp) -> np.ndarray:
    return -np.log(np.maximum(proposals.scores, score_clamp))


def pair_potentials(pairwise: PairwiseModel, update_rule: UpdateRule = UpdateRule.ALL_LABELS) -> np.ndarray:
    """phi_p tensor (K+1, K+1, 11); under EXCLUDE_SELF equal-label pairs cost nothing."""
    phi = pairwise.potentials()
    if UpdateRule(update_rule) is UpdateRule.EXCLUDE_SELF:
        labels = np.arange(phi.shape[0])
        phi[labels, labels, :] = 0.0
    return phi


def configuration_energies(
    unary: np.ndarray,
    glob: np.ndarray,
    phi: np.ndarray,
    relations: np.ndarray,
    configs: np.ndarray,
    weights: CrfWeights,
) -> np.ndarray:
    """Energies of a batch of assignments `configs` (C x N). Pairs i < j are counted once."""
    n = configs.shape[1]
    unary_sum = unary[np.arange(n)[None, :], configs].sum(axis=1)
    global_sum = glob[configs].sum(axis=1)
    pair_sum = np.zeros(configs.shape[0])
    for i in range(n):
        for j in range(i + 1, n):
            pair_sum += phi[configs[:, i], configs[:, j], relations[i, j]]
    return unary_sum + weights.omega_p * pair_sum + weights.omega_g * global_sum


def energy(
    proposals: ProposalSet,
    x: LabeledConfiguration,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    f: SceneFeature,
    w: CrfWeights,
    update_rule: UpdateRule = UpdateRule.ALL_LABELS,
    score_clamp: float = _config.score_clamp,
) -> float:
    """E(X) = sum phi_u + omega_p * sum_{i<j} phi_p + omega_g * sum phi_g."""
    _check_inputs(proposals, pairwise, scene, f)
    labels = np.asarray(x, dtype=np.intp).reshape(1, -1)
    if labels.shape[1] != len(proposals):
        raise ValueError(f'assignment has {labels.shape[1]} labels for {len(proposals)} proposals')
    if labels.size and (labels.min() < 0 or labels.max() >= proposals.num_labels):
        raise ValueError(f'assignment labels must lie in 0..{proposals.num_labels - 1}')
    energies = configuration_energies(
        unary_potentials(proposals, score_clamp),
        global_potentials(scene, f),
        pair_potentials(pairwise, update_rule),
        relation_matrix(proposals.boxes, proposals.frame),
        labels,
        w,
    )
    return float(energies[0])


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    q = np.maximum(np.exp(shifted), _Q_FLOOR)
    return q / q.sum(axis=1, keepdims=True)


def initial_marginals(
    proposals: ProposalSet,
    scene: ScenePriorModel,
    f: SceneFeature,
    w: CrfWeights,
    score_clamp: float = _config.score_clamp,
) -> np.ndarray:
    """Q_i(l) proportional to exp(-phi_u(l) - omega_g * phi_g(l))."""
    if len(proposals) == 0:
        return np.zeros((0, proposals.num_labels))
    base = -unary_potentials(proposals, score_clamp) - w.omega_g * global_potentials(scene, f)
    return _softmax_rows(base)


def truncate_proposals(proposals: ProposalSet, max_proposals: int) -> tuple[ProposalSet, np.ndarray]:
    """
    Keep the `max_proposals` proposals with the highest max foreground score,
    ties to the lower index. Kept proposals stay in ascending original order.
    """
    n = len(proposals)
    if n <= max_proposals:
        return proposals, np.arange(n)
    best_fg = proposals.scores[:, 1:].max(axis=1)
    order = np.lexsort((np.arange(n), -best_fg))
    kept = np.sort(order[:max_proposals])
    logger.warning('image %r: keeping %d of %d proposals', proposals.image_id, max_proposals, n)
    subset = replace(
        proposals,
        boxes=tuple(proposals.boxes[i] for i in kept),
        scores=proposals.scores[kept],
        inference=None,
    )
    return subset, kept


def _context_field(q: np.ndarray, phi_t: np.ndarray, relations: np.ndarray, omega_p: float) -> np.ndarray:
    """
    C_i(m) = omega_p * sum_{j != i} sum_l Q_j(l) phi_p(l, m, R[j, i]).
    Contributions are summed in sorted order so the result does not depend on
    the order proposals are listed in.
    """
    n, num_labels = q.shape
    messages = np.zeros((n, phi_t.shape[1], num_labels))
    for label in range(num_labels):
        messages += q[:, label, None, None] * phi_t[label][None, :, :]
    contrib = messages[np.arange(n)[:, None], relations]  # [j, i, m]
    idx = np.arange(n)
    contrib[idx, idx, :] = 0.0
    return omega_p * np.sort(contrib, axis=0).sum(axis=0)


def _sequential_sweep(
    q: np.ndarray, base: np.ndarray, phi: np.ndarray, relations: np.ndarray, omega_p: float, eta: float
) -> np.ndarray:
    """
    One pass over the proposals in index order, each update reading the
    marginals already refreshed in this pass. Every step minimizes the free
    energy in Q_i with the others fixed, so the free energy never increases.
    """
    q = q.copy()
    for i in range(q.shape[0]):
        contrib = np.einsum('jl,lmj->jm', q, phi[:, :, relations[:, i]])
        contrib[i] = 0.0
        q_hat = _softmax_rows((base[i] - omega_p * contrib.sum(axis=0))[None, :])[0]
        q[i] = (1.0 - eta) * q_hat + eta * q[i]
    return q


def mean_field_infer(
    proposals: ProposalSet,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    f: SceneFeature,
    w: CrfWeights,
    cfg: InferenceConfig | None = None,
) -> MarginalSet:
    """Damped mean-field updates on `cfg.schedule` until max |dQ| < tolerance or the iteration cap."""
    cfg = cfg or InferenceConfig()
    _check_inputs(proposals, pairwise, scene, f)
    kept_set, kept = truncate_proposals(proposals, cfg.max_proposals)
    n = len(kept_set)
    if n == 0:
        return MarginalSet(np.zeros((0, pairwise.categories.num_labels)), 0, True, 0.0, kept)

    base = -unary_potentials(kept_set, cfg.score_clamp) - w.omega_g * global_potentials(scene, f)
    q = _softmax_rows(base)
    phi = pair_potentials(pairwise, cfg.update_rule)
    phi_t = np.transpose(phi, (0, 2, 1))
    relations = relation_matrix(kept_set.boxes, kept_set.frame)
    eta = cfg.damping

    iterations = 0
    max_change = 0.0
    converged = False
    while iterations < cfg.max_iterations:
        if cfg.schedule is UpdateSchedule.SEQUENTIAL:
            q_next = _sequential_sweep(q, base, phi, relations, w.omega_p, eta)
        else:
            q_hat = _softmax_rows(base - _context_field(q, phi_t, relations, w.omega_p))
            q_next = (1.0 - eta) * q_hat + eta * q
        max_change = float(np.max(np.abs(q_next - q)))
        q = q_next
        iterations += 1
        if _config.check_invariants:
            sums = q.sum(axis=1)
            assert np.all(np.abs(sums - 1.0) <= 1e-9), f'row sums drifted: {sums}'
            assert np.all(q > 0.0), 'marginal underflowed to zero'
        if max_change < cfg.tolerance:
            converged = True
            break
    if not converged:
        logger.warning(
            'image %r: mean field stopped after %d iterations (max change %.3g)',
            proposals.image_id,
            iterations,
            max_change,
        )
    return MarginalSet(q, iterations, converged, max_change, kept)


def exact_marginals(
    proposals: ProposalSet,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    f: SceneFeature,
    w: CrfWeights,
    update_rule: UpdateRule = UpdateRule.ALL_LABELS,
    score_clamp: float = _config.score_clamp,
) -> MarginalSet:
    """Marginals of P(X) proportional to exp(-E(X)) by enumerating every assignment."""
    _check_inputs(proposals, pairwise, scene, f)
    n = len(proposals)
    num_labels = proposals.num_labels
    total = num_labels**n
    if total > MAX_ENUMERATION:
        raise ValueError(
            f'image {proposals.image_id!r}: (K+1)^N = {num_labels}^{n} configurations exceeds the '
            f'enumeration bound {MAX_ENUMERATION}'
        )
    configs = np.array(list(itertools.product(range(num_labels), repeat=n)), dtype=np.intp).reshape(total, n)
    energies = configuration_energies(
        unary_potentials(proposals, score_clamp),
        global_potentials(scene, f),
        pair_potentials(pairwise, update_rule),
        relation_matrix(proposals.boxes, proposals.frame),
        configs,
        w,
    )
    lowest = float(energies.min())
    weights = np.exp(-(energies - lowest))
    z = float(weights.sum())
    q = np.empty((n, num_labels))
    for i in range(n):
        q[i] = np.bincount(configs[:, i], weights=weights, minlength=num_labels) / z
    return MarginalSet(q, 0, True, 0.0, np.arange(n), log_partition=-lowest + math.log(z))


def free_energy(
    q: np.ndarray,
    proposals: ProposalSet,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    f: SceneFeature,
    w: CrfWeights,
    update_rule: UpdateRule = UpdateRule.ALL_LABELS,
    score_clamp: float = _config.score_clamp,
) -> float:
    """
    Mean-field objective E_Q[E(X)] - H(Q) for the fully factorized Q. It equals
    KL(Q || P) - log Z, so it is bounded below by -log Z and reaches E(x) when
    Q is a point mass on x.
    """
    _check_inputs(proposals, pairwise, scene, f)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != proposals.scores.shape:
        raise ValueError(f'marginals have shape {q.shape}, proposals need {proposals.scores.shape}')
    unary = unary_potentials(proposals, score_clamp)
    glob = global_potentials(scene, f)
    phi = pair_potentials(pairwise, update_rule)
    relations = relation_matrix(proposals.boxes, proposals.frame)
    expected = float(np.sum(q * (unary + w.omega_g * glob[None, :])))
    pair = 0.0
    n = len(proposals)
    for i in range(n):
        for j in range(i + 1, n):
            pair += float(q[i] @ phi[:, :, relations[i, j]] @ q[j])
    mask = q > 0
    neg_entropy = float(np.sum(q[mask] * np.log(q[mask])))
    return expected + w.omega_p * pair + neg_entropy


def kl_divergence(q: np.ndarray, p: np.ndarray) -> float:
    """Sum over proposals of KL(Q_i || P_i)."""
    q = np.asarray(q, dtype=np.float64)
    p = np.maximum(np.asarray(p, dtype=np.float64), _Q_FLOOR)
    mask = q > 0
    return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask]))))


def rescore(
    proposals: ProposalSet,
    pairwise: PairwiseModel,
    scene: ScenePriorModel,
    f: SceneFeature,
    w: CrfWeights,
    cfg: InferenceConfig | None = None,
) -> ProposalSet:
    """Replace detector scores by mean-field marginals; boxes are unchanged."""
    result = mean_field_infer(proposals, pairwise, scene, f, w, cfg)
    kept = result.kept if result.kept is not None else np.arange(len(proposals))
    summary = InferenceSummary(
        iterations=result.iterations,
        converged=result.converged,
        max_change=result.max_change,
        dropped=len(proposals) - len(kept),
    )
    return ProposalSet(
        image_id=proposals.image_id,
        frame=proposals.frame,
        boxes=tuple(proposals.boxes[i] for i in kept),
        scores=result.q,
        inference=summary,
    )

"""
Frame-wise decoding of prediction tensors into detections.
Thresholds conditional class scores, clusters same-class candidates by angular
connectivity and unifies each cluster into one detection.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import expit, softmax

from .geometry import Direction, angular_distance_deg, to_cartesian
from .labels import PredictionTensor

logger = logging.getLogger(__name__)

# Temperature of the squared-score term in the unification weights
WEIGHT_TEMPERATURE: float = 0.5


@dataclass(frozen=True)
class Detection:
    """One decoded sound event at one frame."""

    frame: int
    class_id: int
    doa: Direction
    score: float


@dataclass(frozen=True)
class Candidate:
    """A slot whose conditional class score passed the threshold."""

    frame: int
    class_id: int
    cell: int
    slot: int
    doa: Direction
    score: float


@dataclass(frozen=True)
class Cluster:
    """Same-class candidates of one frame joined by angular links."""

    frame: int
    class_id: int
    members: Tuple[Tuple[int, int], ...]
    scores: NDArray[np.float64]
    vectors: NDArray[np.float64]
    doas: Tuple[Direction, ...]

    def __len__(self) -> int:
        return len(self.members)


CandidateMap = Dict[Tuple[int, int], List[Candidate]]


def candidate_scores(
    preds: PredictionTensor, use_existence: bool = True
) -> NDArray[np.float64]:
    """Scores of shape (T, G, K, C): sigmoid(class) * sigmoid(existence)."""
    scores = expit(preds.class_logits)
    if use_existence:
        scores = scores * expit(preds.existence_logits)[..., None]
    return scores


def candidate_detections(
    preds: PredictionTensor, score_threshold: float = 0.5, use_existence: bool = True
) -> CandidateMap:
    """
    Collect every (slot, class) whose score is strictly above the threshold.

    Args:
        preds: Prediction tensor
        score_threshold: Strict lower bound on the conditional class score
        use_existence: False scores by the class probability alone

    Returns:
        CandidateMap: (frame, class_id) -> candidates in slot order
    """
    scores = candidate_scores(preds, use_existence)
    decoded = preds.decoded()
    candidates: CandidateMap = {}
    for t, g, k, c in zip(*np.nonzero(scores > score_threshold)):
        doa = Direction(float(decoded.azimuth[t, g, k]), float(decoded.elevation[t, g, k]))
        candidate = Candidate(int(t), int(c), int(g), int(k), doa, float(scores[t, g, k, c]))
        candidates.setdefault((int(t), int(c)), []).append(candidate)
    logger.debug(f"{sum(len(v) for v in candidates.values())} candidates above {score_threshold}")
    return candidates


def cluster_candidates(candidates: List[Candidate], upsilon: float) -> List[Cluster]:
    """
    Connected components of the graph linking candidates closer than upsilon.

    Args:
        candidates: Candidates of one frame and one class
        upsilon: Link threshold in degrees (strict)

    Returns:
        List[Cluster]: Ordered by the position of each cluster's first member
    """
    if not candidates:
        return []
    azimuth = np.array([c.doa.azimuth for c in candidates])
    elevation = np.array([c.doa.elevation for c in candidates])
    distance = angular_distance_deg(
        azimuth[:, None], elevation[:, None], azimuth[None, :], elevation[None, :]
    )
    links = distance < upsilon
    np.fill_diagonal(links, False)
    count, labels = connected_components(csr_matrix(links), directed=False)

    clusters = []
    first = candidates[0]
    for label in range(count):
        members = [candidates[i] for i in np.flatnonzero(labels == label)]
        clusters.append(
            Cluster(
                frame=first.frame,
                class_id=first.class_id,
                members=tuple((m.cell, m.slot) for m in members),
                scores=np.array([m.score for m in members]),
                vectors=to_cartesian(
                    [m.doa.azimuth for m in members], [m.doa.elevation for m in members]
                ),
                doas=tuple(m.doa for m in members),
            )
        )
    return clusters


def unification_weights(scores: NDArray[np.float64]) -> NDArray[np.float64]:
    """W = softmax(exp(score^2 / 0.5)) over the members of a cluster."""
    return softmax(np.exp(np.square(scores) / WEIGHT_TEMPERATURE))


def unify_cluster(cluster: Cluster) -> Detection:
    """
    Merge a cluster into one detection.

    The DOA is the weighted Cartesian mean renormalized to the unit sphere;
    the score is the best member score. If the weighted sum vanishes the
    best member's DOA is used.

    Raises:
        ValueError: If the cluster is empty
    """
    if len(cluster) == 0:
        raise ValueError("Cannot unify an empty cluster")
    weights = unification_weights(cluster.scores)
    best = int(np.argmax(cluster.scores))
    mean = weights @ cluster.vectors
    if np.linalg.norm(mean) < 1e-12:
        logger.warning(
            f"Degenerate cluster at frame {cluster.frame}, class {cluster.class_id}; "
            "using the highest-score member"
        )
        doa = cluster.doas[best]
    else:
        doa = Direction.from_cartesian(mean)
    return Detection(cluster.frame, cluster.class_id, doa, float(cluster.scores[best]))


def decode(
    preds: PredictionTensor,
    upsilon: float = 15.0,
    score_threshold: float = 0.5,
    use_existence: bool = True,
) -> List[Detection]:
    """
    Decode a prediction tensor into frame-wise detections.

    Returns:
        List[Detection]: Sorted by (frame, class_id, descending score)
    """
    detections = []
    candidates = candidate_detections(preds, score_threshold, use_existence)
    for key in sorted(candidates):
        for cluster in cluster_candidates(candidates[key], upsilon):
            detections.append(unify_cluster(cluster))
    detections.sort(key=lambda d: (d.frame, d.class_id, -d.score))
    logger.info(f"Decoded {len(detections)} detections with upsilon={upsilon:g}")
    return detections

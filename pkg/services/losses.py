"""
Metric learning: similarity masks, batch-hard mining, triplet margin loss and
the weighted three-head objective.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from config import LossConfig
from models.tensor import DenseTensor, add, as_tensor, mean, mul, relu, row_distance, sub

logger = logging.getLogger(__name__)

HEADS = ('fused', 'pc', 'rgb')


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


@dataclass
class HeadLoss:
    """Loss of one head over its own mined triplets."""
    loss: DenseTensor
    active: int
    triplets: int

    @property
    def value(self) -> float:
        return float(self.loss.item())


@dataclass
class LossBreakdown:
    l_f: float
    l_pc: float
    l_rgb: float
    active_f: int
    active_pc: int
    active_rgb: int
    total: float
    triplets_f: int = 0
    triplets_pc: int = 0
    triplets_rgb: int = 0
    objective: Optional[DenseTensor] = None

    def as_row(self) -> Dict[str, float]:
        return {
            'L_F': self.l_f, 'L_PC': self.l_pc, 'L_RGB': self.l_rgb,
            'active_F': self.active_f, 'active_PC': self.active_pc, 'active_RGB': self.active_rgb,
        }


def planar_distances(positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def similarity_masks(positions: np.ndarray, positive_radius_m: float = 10.0,
                     negative_radius_m: float = 50.0) -> Tuple[np.ndarray, np.ndarray]:
    """positive: distance <= positive radius; negative: distance >= negative radius; diagonal in neither."""
    dist = planar_distances(positions)
    off_diagonal = ~np.eye(len(dist), dtype=bool)
    return (dist <= positive_radius_m) & off_diagonal, (dist >= negative_radius_m) & off_diagonal


def pairwise_distances(descriptors: np.ndarray) -> np.ndarray:
    descriptors = np.asarray(descriptors, dtype=np.float64)
    diff = descriptors[:, None, :] - descriptors[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def batch_hard_mine(dist: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> List[Triplet]:
    """Hardest positive (farthest) and hardest negative (closest) per eligible anchor; ties go to the lowest index."""
    eligible = positive.any(axis=1) & negative.any(axis=1)
    hardest_pos = np.argmax(np.where(positive, dist, -np.inf), axis=1)
    hardest_neg = np.argmin(np.where(negative, dist, np.inf), axis=1)
    return [Triplet(int(a), int(hardest_pos[a]), int(hardest_neg[a])) for a in np.nonzero(eligible)[0]]


def triplet_margin_loss(triplets: List[Triplet], descriptors, margin: float) -> Tuple[DenseTensor, int]:
    """Mean of max(d(a, p) - d(a, n) + m, 0) over the triplets, and the count with nonzero loss."""
    if not triplets:
        return DenseTensor(0.0), 0
    descriptors = as_tensor(descriptors)
    anchors, positives, negatives = (np.array(col, dtype=np.int64) for col in zip(*triplets))
    d_ap = row_distance(descriptors, anchors, positives)
    d_an = row_distance(descriptors, anchors, negatives)
    per_triplet = relu(add(sub(d_ap, d_an), margin))
    return mean(per_triplet), int(np.count_nonzero(per_triplet.values > 0))


def head_loss(descriptors: DenseTensor, positive: np.ndarray, negative: np.ndarray, margin: float) -> HeadLoss:
    """Mine on this head's own descriptor space, then apply the triplet loss."""
    triplets = batch_hard_mine(pairwise_distances(descriptors.values), positive, negative)
    loss, active = triplet_margin_loss(triplets, descriptors, margin)
    return HeadLoss(loss, active, len(triplets))


def head_weights(cfg: LossConfig) -> Dict[str, float]:
    return {'fused': 1.0 - cfg.alpha - cfg.beta, 'pc': cfg.alpha, 'rgb': cfg.beta}


def multi_head_loss(heads: Dict[str, HeadLoss], cfg: LossConfig) -> LossBreakdown:
    """total = (1 - alpha - beta) L_F + alpha L_PC + beta L_RGB; missing heads count as zero."""
    weights = head_weights(cfg)
    objective: Optional[DenseTensor] = None
    total = 0.0
    for name in HEADS:
        head = heads.get(name)
        if head is None or weights[name] == 0:
            continue
        total += weights[name] * head.value
        term = mul(head.loss, weights[name])
        objective = term if objective is None else add(objective, term)

    def get(name: str, attr: str, default):
        head = heads.get(name)
        return getattr(head, attr) if head is not None else default

    return LossBreakdown(
        l_f=get('fused', 'value', 0.0), l_pc=get('pc', 'value', 0.0), l_rgb=get('rgb', 'value', 0.0),
        active_f=get('fused', 'active', 0), active_pc=get('pc', 'active', 0), active_rgb=get('rgb', 'active', 0),
        total=total,
        triplets_f=get('fused', 'triplets', 0), triplets_pc=get('pc', 'triplets', 0),
        triplets_rgb=get('rgb', 'triplets', 0),
        objective=objective if objective is not None else DenseTensor(0.0),
    )

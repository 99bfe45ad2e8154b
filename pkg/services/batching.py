"""
Batch assembly: place-group sampling, threaded element loading and collation.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from config import AugmentationConfig, QuantizationConfig
from dataset.augmentation import augment_cloud, augment_image
from dataset.dataset import Dataset
from errors import DataError
from models.network import ModelInput
from models.sparse import quantize_batch
from models.tensor import DenseTensor, get_dtype
from services.losses import similarity_masks

logger = logging.getLogger(__name__)


@dataclass
class Sample:
    """Loaded (and possibly augmented) arrays of one element."""
    index: int
    cloud: Optional[np.ndarray]
    image: Optional[np.ndarray]
    position: np.ndarray


def place_clusters(positions: np.ndarray, radius_m: float) -> List[List[int]]:
    """Connected components of the 'within radius' relation (union-find), in index order."""
    n = len(positions)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    diff = positions[:, None, :] - positions[None, :, :]
    close = np.sqrt(np.sum(diff * diff, axis=-1)) <= radius_m
    for i, j in zip(*np.nonzero(np.triu(close, k=1))):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


class PlaceGroupSampler:
    """Draws batches of ceil(B/2) place clusters with two elements each, so every batch has positives.

    With an anchor mask, each cluster contributes one masked element and one
    unmasked element whenever it has both (query-vs-database pairs).
    """

    def __init__(self, positions: np.ndarray, positive_radius_m: float = 10.0, max_retries: int = 10,
                 anchor_mask: Optional[np.ndarray] = None):
        self.positions = np.asarray(positions, dtype=np.float64)
        self.positive_radius_m = positive_radius_m
        self.max_retries = max_retries
        self.anchor_mask = None if anchor_mask is None else np.asarray(anchor_mask, dtype=bool)
        self.clusters = [c for c in place_clusters(self.positions, positive_radius_m) if len(c) >= 2]
        if not self.clusters:
            raise DataError("no two elements lie within the positive radius; cannot form positive pairs")

    def _pair(self, members: np.ndarray, rng: np.random.Generator) -> List[int]:
        if self.anchor_mask is not None:
            anchors = members[self.anchor_mask[members]]
            others = members[~self.anchor_mask[members]]
            if len(anchors) and len(others):
                return [int(rng.choice(anchors)), int(rng.choice(others))]
        return [int(m) for m in members[:2]]

    def draw(self, batch_size: int, rng: np.random.Generator) -> List[int]:
        n_groups = min(math.ceil(batch_size / 2), len(self.clusters))
        chosen = rng.choice(len(self.clusters), size=n_groups, replace=False)
        picked: List[int] = []
        leftovers: List[int] = []
        for c in chosen:
            members = rng.permutation(self.clusters[c])
            pair = self._pair(members, rng)
            picked.extend(pair)
            leftovers.extend(int(m) for m in members if m not in pair)
        if len(picked) < batch_size and leftovers:
            # too few clusters: top up from the chosen clusters' remaining members
            extra = rng.permutation(leftovers)[:batch_size - len(picked)]
            picked.extend(int(m) for m in extra)
        return picked[:batch_size]

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[int]:
        for attempt in range(self.max_retries):
            indices = self.draw(batch_size, rng)
            positive, _ = similarity_masks(self.positions[indices], self.positive_radius_m)
            if positive.any():
                return indices
            logger.debug("batch without positive pairs, resampling (attempt %d)", attempt + 1)
        raise DataError(f"could not draw a batch with a positive pair in {self.max_retries} attempts")


def element_rng(seed: int, epoch: int, batch: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, batch, slot])


def load_sample(dataset: Dataset, index: int, want_cloud: bool, want_image: bool,
                augmentation: Optional[AugmentationConfig], rng: Optional[np.random.Generator]) -> Sample:
    """Load one element; with augmentation a random image variant is drawn, otherwise variant 0."""
    element = dataset[index]
    cloud = image = None
    if want_cloud:
        cloud = dataset.load_cloud(element)
        if augmentation is not None:
            cloud = augment_cloud(cloud, augmentation, rng)
    if want_image:
        variant = int(rng.integers(len(element.variants))) if augmentation is not None else 0
        image = dataset.load_image(element, variant)
        if augmentation is not None:
            image = augment_image(image, augmentation, rng)
    return Sample(index, cloud, image, element.position)


def load_samples(dataset: Dataset, indices: Sequence[int], want_cloud: bool, want_image: bool,
                 augmentation: Optional[AugmentationConfig] = None, seed: int = 0, epoch: int = 0,
                 batch: int = 0, threads: int = 1) -> List[Sample]:
    """Load elements concurrently; each slot has its own generator and results keep submission order."""
    def job(slot: int, index: int) -> Sample:
        return load_sample(dataset, index, want_cloud, want_image, augmentation,
                           element_rng(seed, epoch, batch, slot))

    if threads <= 1:
        return [job(slot, index) for slot, index in enumerate(indices)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(job, slot, index) for slot, index in enumerate(indices)]
        return [f.result() for f in futures]


def images_to_tensor(images: Sequence[np.ndarray]) -> DenseTensor:
    """uint8 [3, H, W] images to a [B, 3, H, W] tensor scaled to [0, 1]."""
    stacked = np.stack([np.asarray(img) for img in images]).astype(get_dtype())
    return DenseTensor(stacked / get_dtype()(255.0))


def collate(samples: Sequence[Sample], quantization: QuantizationConfig) -> ModelInput:
    clouds = images = None
    if samples and samples[0].cloud is not None:
        clouds = quantize_batch([s.cloud for s in samples], quantization)
    if samples and samples[0].image is not None:
        shapes = {s.image.shape for s in samples}
        if len(shapes) != 1:
            raise DataError(f"images in one batch must share a shape, got {sorted(shapes)}")
        images = images_to_tensor([s.image for s in samples])
    return ModelInput(size=len(samples), clouds=clouds, images=images)


def positions_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.position for s in samples])

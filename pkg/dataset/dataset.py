"""
Elements, the dataset index and geographic splits.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dataset.formats import read_pcb, read_ppm
from errors import DataError

logger = logging.getLogger(__name__)

INDEX_FILE = 'index.json'
MIN_IMAGE_SIZE = 32


@dataclass(frozen=True)
class Element:
    """One sample: a point cloud, one or more images and a planar position in meters."""
    id: str
    easting: float
    northing: float
    cloud: str
    image: str
    image_variants: Tuple[str, ...] = ()
    traversal: int = 0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.easting, self.northing], dtype=np.float64)

    @property
    def variants(self) -> Tuple[str, ...]:
        return self.image_variants or (self.image,)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['image_variants'] = list(self.image_variants)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'Element':
        try:
            element = cls(
                id=str(data['id']),
                easting=float(data['easting']),
                northing=float(data['northing']),
                cloud=str(data['cloud']),
                image=str(data['image']),
                image_variants=tuple(data.get('image_variants') or ()),
                traversal=int(data.get('traversal', 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"malformed index entry {data!r}: {e}") from e
        if not (np.isfinite(element.easting) and np.isfinite(element.northing)):
            raise DataError(f"element {element.id}: position is not finite")
        return element


@dataclass
class Dataset:
    """Elements of one dataset directory; file paths in elements are relative to root."""
    root: str
    elements: List[Element] = field(default_factory=list)

    @classmethod
    def load(cls, root: str) -> 'Dataset':
        path = os.path.join(root, INDEX_FILE)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                entries = json.load(f)
        except FileNotFoundError as e:
            raise DataError(f"no {INDEX_FILE} in {root}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read {path}: {e}") from e
        if not isinstance(entries, list):
            raise DataError(f"{path}: expected a JSON array of elements")
        elements = [Element.from_dict(entry) for entry in entries]
        ids = [e.id for e in elements]
        if len(set(ids)) != len(ids):
            raise DataError(f"{path}: duplicate element ids")
        logger.info("loaded %d elements from %s", len(elements), root)
        return cls(root, elements)

    def save_index(self) -> str:
        os.makedirs(self.root, exist_ok=True)
        path = os.path.join(self.root, INDEX_FILE)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump([e.to_dict() for e in self.elements], f, indent=1)
        return path

    def __len__(self) -> int:
        return len(self.elements)

    def __getitem__(self, i: int) -> Element:
        return self.elements[i]

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        return Dataset(self.root, [self.elements[i] for i in indices])

    def positions(self) -> np.ndarray:
        if not self.elements:
            return np.zeros((0, 2))
        return np.stack([e.position for e in self.elements])

    def traversals(self) -> List[int]:
        return sorted({e.traversal for e in self.elements})

    def by_traversal(self, traversal: int) -> 'Dataset':
        return Dataset(self.root, [e for e in self.elements if e.traversal == traversal])

    def excluding_traversal(self, traversal: int) -> 'Dataset':
        return Dataset(self.root, [e for e in self.elements if e.traversal != traversal])

    def resolve_traversal(self, query_traversal: int) -> int:
        """Negative values index from the last traversal (-1 = last)."""
        traversals = self.traversals()
        if not traversals:
            raise DataError("dataset is empty")
        try:
            return traversals[query_traversal] if query_traversal < 0 else traversals[traversals.index(query_traversal)]
        except (IndexError, ValueError) as e:
            raise DataError(f"traversal {query_traversal} not in dataset (have {traversals})") from e

    def load_cloud(self, element: Element) -> np.ndarray:
        points = read_pcb(os.path.join(self.root, element.cloud))
        if len(points) == 0:
            raise DataError(f"element {element.id}: empty point cloud")
        if np.any(np.abs(points) > 1.0):
            raise DataError(f"element {element.id}: points outside [-1, 1]^3")
        return points

    def load_image(self, element: Element, variant: int = 0) -> np.ndarray:
        variants = element.variants
        image = read_ppm(os.path.join(self.root, variants[variant % len(variants)]))
        if image.shape[1] < MIN_IMAGE_SIZE or image.shape[2] < MIN_IMAGE_SIZE:
            raise DataError(f"element {element.id}: image {image.shape[1]}x{image.shape[2]} is below "
                            f"{MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")
        return image


def in_region(positions: np.ndarray, region: Sequence[float]) -> np.ndarray:
    """Closed-rectangle membership; region is (xmin, ymin, xmax, ymax)."""
    xmin, ymin, xmax, ymax = region
    return ((positions[:, 0] >= xmin) & (positions[:, 0] <= xmax)
            & (positions[:, 1] >= ymin) & (positions[:, 1] <= ymax))


def utm_split(dataset: Dataset, region: Sequence[float], allow_empty: bool = True) -> Tuple[Dataset, Dataset]:
    """Elements inside the closed rectangle go to test, the rest to train."""
    xmin, ymin, xmax, ymax = region
    if not (xmin < xmax and ymin < ymax):
        raise DataError(f"test region {tuple(region)} is degenerate")
    inside = in_region(dataset.positions(), region) if len(dataset) else np.zeros(0, dtype=bool)
    train = dataset.subset(np.nonzero(~inside)[0])
    test = dataset.subset(np.nonzero(inside)[0])
    if not allow_empty and (len(train) == 0 or len(test) == 0):
        side = 'train' if len(train) == 0 else 'test'
        raise DataError(f"test region {tuple(region)} leaves the {side} side empty")
    return train, test


def run_split(dataset: Dataset, query_traversal: int = -1,
              test_region: Optional[Sequence[float]] = None) -> Tuple[Dataset, Dataset]:
    """(training set, evaluation set) for one run.

    With a test region, training uses everything outside it and evaluation
    everything inside. Without one, training leaves out the query traversal and
    evaluation sees the whole dataset.
    """
    if test_region is not None:
        return utm_split(dataset, test_region, allow_empty=False)
    held_out = dataset.resolve_traversal(query_traversal)
    return dataset.excluding_traversal(held_out), dataset

"""
Desk-scale synthetic dataset: places laid out on a grid, each with its own box
scene and procedural image, re-observed on several traversals.

Optional spurious mode stamps a place code into the images of every traversal
except the held-out one and weakens the genuine pattern, so an image branch
can fit the code on training data and fail on the held-out traversal.
"""
import logging
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from dataset.dataset import Dataset, Element
from dataset.formats import write_pcb, write_ppm
from errors import DataError

logger = logging.getLogger(__name__)

MIN_SPACING_M = 50.0
MAX_JITTER_M = 4.0
CODE_CELLS = 4
CODE_CELL_PX = 3


@dataclass(frozen=True)
class SyntheticSpec:
    n_places: int
    traversals: int
    spacing_m: float
    seed: int = 0
    points: int = 4096
    image_size: int = 64
    variants: int = 3
    spurious_rgb: bool = False
    held_out_traversal: int = -1

    def validate(self) -> None:
        if self.spacing_m <= MIN_SPACING_M:
            raise DataError(
                f"spacing {self.spacing_m:g} m must exceed the {MIN_SPACING_M:g} m negative threshold, "
                "otherwise distinct places would not be negatives")
        if self.n_places < 2:
            raise DataError("need at least 2 places")
        if self.traversals < 2:
            raise DataError("need at least 2 traversals")
        if self.points < 1:
            raise DataError("points per cloud must be positive")
        if self.image_size < 32:
            raise DataError("image size must be at least 32")
        if self.variants < 1:
            raise DataError("need at least one image variant")

    @property
    def held_out(self) -> int:
        return self.held_out_traversal % self.traversals


@dataclass
class SelfCheck:
    """Watermark presence per side; a clean run marks every train image and no held-out image."""
    marked_train: int
    total_train: int
    marked_held_out: int
    total_held_out: int

    @property
    def passed(self) -> bool:
        return self.marked_train == self.total_train and self.marked_held_out == 0

    def line(self) -> str:
        status = 'PASS' if self.passed else 'FAIL'
        return (f"spurious-cue self-check {status}: {self.marked_train}/{self.total_train} train images "
                f"watermarked, {self.marked_held_out}/{self.total_held_out} held-out images watermarked")


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def place_centers(n_places: int, spacing_m: float) -> np.ndarray:
    """Grid with pitch spacing + 2 * max jitter, so cross-place distances stay >= spacing."""
    pitch = spacing_m + 2 * MAX_JITTER_M
    cols = math.ceil(math.sqrt(n_places))
    idx = np.arange(n_places)
    return np.stack([(idx % cols) * pitch, (idx // cols) * pitch], axis=1).astype(np.float64)


def place_scene(rng: np.random.Generator) -> np.ndarray:
    """Random boxes as rows (cx, cy, cz, hx, hy, hz), plus a ground slab."""
    n = int(rng.integers(3, 7))
    centers = rng.uniform(-0.7, 0.7, size=(n, 3))
    halves = rng.uniform(0.05, 0.25, size=(n, 3))
    ground = np.array([[0.0, 0.0, -0.9, 0.95, 0.95, 0.02]])
    return np.concatenate([ground, np.concatenate([centers, halves], axis=1)])


def sample_boxes(boxes: np.ndarray, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the box surfaces, weighted by face area."""
    halves = boxes[:, 3:]
    # face areas: pairs (y,z), (x,z), (x,y), two faces each
    areas = np.stack([halves[:, 1] * halves[:, 2], halves[:, 0] * halves[:, 2], halves[:, 0] * halves[:, 1]], axis=1)
    weights = np.repeat(areas, 2, axis=1).reshape(-1)
    face = rng.choice(len(weights), size=n_points, p=weights / weights.sum())
    box, local = face // 6, face % 6
    axis, side = local // 2, np.where(local % 2 == 0, -1.0, 1.0)
    u = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    u[np.arange(n_points), axis] = side
    return boxes[box, :3] + u * boxes[box, 3:]


def observe_cloud(boxes: np.ndarray, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """One traversal's view: small yaw + shift, sensor noise, clipped to the unit cube."""
    points = sample_boxes(boxes, n_points, rng)
    yaw = rng.uniform(-0.08, 0.08)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    points = points @ rot.T + rng.uniform(-0.03, 0.03, size=3)
    points += rng.normal(0.0, 0.005, size=points.shape)
    return np.clip(points, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def place_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    """Stripes at a place-specific angle and frequency over a place palette, plus blocks. [3, H, W] in [0, 1]."""
    palette = rng.uniform(0.1, 0.9, size=(3, 3))
    angle = rng.uniform(0, math.pi)
    freq = rng.uniform(2.0, 6.0)
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = (xx * math.cos(angle) + yy * math.sin(angle)) * freq
    stripes = (np.floor(phase * 2) % 2).astype(np.float64)
    image = palette[0][:, None, None] * (1 - stripes) + palette[1][:, None, None] * stripes
    for _ in range(int(rng.integers(2, 5))):
        h, w = rng.integers(size // 8, size // 3, size=2)
        top, left = rng.integers(0, size - h), rng.integers(0, size - w)
        image[:, top:top + h, left:left + w] = palette[2][:, None, None]
    return image


def place_code(place: int) -> np.ndarray:
    """CODE_CELLS x CODE_CELLS binary code of the place id, as a {0, 1} pixel block."""
    bits = np.array([(place >> i) & 1 for i in range(CODE_CELLS * CODE_CELLS)], dtype=np.float64)
    block = bits.reshape(CODE_CELLS, CODE_CELLS)
    return np.kron(block, np.ones((CODE_CELL_PX, CODE_CELL_PX)))


def stamp_code(image: np.ndarray, place: int) -> np.ndarray:
    code = place_code(place)
    out = image.copy()
    out[:, :code.shape[0], :code.shape[1]] = code[None]
    return out


def has_code(image: np.ndarray, place: int) -> bool:
    code = place_code(place)
    region = image[:, :code.shape[0], :code.shape[1]].astype(np.float64) / 255.0
    return bool(np.all(np.abs(region - code[None]) < 1e-9))


def observe_image(pattern: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Photometric shift, small translation and pixel noise."""
    gain = rng.uniform(0.85, 1.15, size=(3, 1, 1))
    offset = rng.uniform(-0.08, 0.08)
    shift = rng.integers(-3, 4, size=2)
    image = np.roll(pattern, tuple(shift), axis=(1, 2)) * gain + offset
    image += rng.normal(0.0, 0.02, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

def generate_synthetic(out_dir: str, spec: SyntheticSpec) -> Tuple[Dataset, Optional[SelfCheck]]:
    """Write clouds, images and index.json under out_dir; returns the dataset and, in spurious mode, the self-check."""
    spec.validate()
    os.makedirs(os.path.join(out_dir, 'clouds'), exist_ok=True)
    os.makedirs(os.path.join(out_dir, 'images'), exist_ok=True)
    centers = place_centers(spec.n_places, spec.spacing_m)
    elements: List[Element] = []
    for place in range(spec.n_places):
        place_rng = np.random.default_rng([spec.seed, place])
        boxes = place_scene(place_rng)
        pattern = place_pattern(place_rng, spec.image_size)
        if spec.spurious_rgb:
            pattern = 0.5 + 0.25 * (pattern - 0.5)
        for traversal in range(spec.traversals):
            rng = np.random.default_rng([spec.seed, place, traversal])
            radius = MAX_JITTER_M * math.sqrt(rng.uniform())
            theta = rng.uniform(0, 2 * math.pi)
            easting = centers[place, 0] + radius * math.cos(theta)
            northing = centers[place, 1] + radius * math.sin(theta)

            element_id = f"t{traversal}_p{place:04d}"
            cloud_rel = os.path.join('clouds', f"{element_id}.pcb")
            write_pcb(os.path.join(out_dir, cloud_rel), observe_cloud(boxes, spec.points, rng))

            variants = []
            for v in range(spec.variants):
                image = observe_image(pattern, np.random.default_rng([spec.seed, place, traversal, v]))
                if spec.spurious_rgb and traversal != spec.held_out:
                    image = stamp_code(image, place)
                rel = os.path.join('images', f"{element_id}_v{v}.ppm")
                write_ppm(os.path.join(out_dir, rel), to_uint8(image))
                variants.append(rel)
            elements.append(Element(element_id, float(easting), float(northing), cloud_rel,
                                    variants[0], tuple(variants), traversal))

    dataset = Dataset(out_dir, elements)
    dataset.save_index()
    logger.info("generated %d elements (%d places x %d traversals) in %s",
                len(elements), spec.n_places, spec.traversals, out_dir)
    check = spurious_self_check(dataset, spec) if spec.spurious_rgb else None
    return dataset, check


def place_of(element: Element) -> int:
    return int(element.id.split('_p')[1])


def spurious_self_check(dataset: Dataset, spec: SyntheticSpec) -> SelfCheck:
    """Re-read every image variant and test for the place code."""
    counts = [0, 0, 0, 0]
    for element in dataset.elements:
        held_out = element.traversal == spec.held_out
        for v in range(len(element.variants)):
            marked = has_code(dataset.load_image(element, v), place_of(element))
            if held_out:
                counts[2] += int(marked)
                counts[3] += 1
            else:
                counts[0] += int(marked)
                counts[1] += 1
    return SelfCheck(*counts)

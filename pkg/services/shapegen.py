"""
Shape Generation Service

Procedural screw/bolt components and the grabability oracle that labels
pairs of them. Components live in the unit domain [0,1]^3 with the part axis
along z and the head on top.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from services.voxel_core import VoxelGrid
from torch_init import progress_enabled
from utils.errors import ShapeSpecError

logger = logging.getLogger(__name__)

NUM_CLASSES = 9
TIE_THRESHOLD = 1.0
THREAD_PITCH = 0.06
MAX_TOTAL_HEIGHT = 0.95
SHAFT_CLASS_EDGES = (0.35, 0.6)


class HeadStyle(str, Enum):
    HEX = 'hex'
    ROUND = 'round'
    COUNTERSUNK = 'countersunk'


HEAD_STYLES = (HeadStyle.HEX, HeadStyle.ROUND, HeadStyle.COUNTERSUNK)


@dataclass(frozen=True)
class ScrewSpec:
    head_style: HeadStyle
    head_radius: float
    head_height: float
    shaft_radius: float
    shaft_length: float
    thread_depth: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'head_style', HeadStyle(self.head_style))
        if not 0.0 < self.head_radius < 0.5:
            raise ShapeSpecError(f"head_radius must be in (0, 0.5), got {self.head_radius}")
        if not 0.0 < self.head_height < 0.4:
            raise ShapeSpecError(f"head_height must be in (0, 0.4), got {self.head_height}")
        if not 0.0 < self.shaft_radius < self.head_radius:
            raise ShapeSpecError(
                f"shaft_radius must be in (0, head_radius={self.head_radius}), got {self.shaft_radius}"
            )
        if not 0.0 < self.shaft_length < 0.9:
            raise ShapeSpecError(f"shaft_length must be in (0, 0.9), got {self.shaft_length}")
        if self.head_height + self.shaft_length > MAX_TOTAL_HEIGHT:
            raise ShapeSpecError(
                f"head_height + shaft_length must not exceed {MAX_TOTAL_HEIGHT}, "
                f"got {self.head_height + self.shaft_length:.3f}"
            )
        if not 0.0 <= self.thread_depth < self.shaft_radius:
            raise ShapeSpecError(f"thread_depth must be in [0, shaft_radius), got {self.thread_depth}")
        if not 0 <= self.class_id < NUM_CLASSES:
            raise ShapeSpecError(f"class_id must be in [0, {NUM_CLASSES}), got {self.class_id}")


@dataclass(frozen=True, eq=False)
class PairSample:
    first: VoxelGrid
    second: VoxelGrid
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ShapeSpecError(f"Pair label must be 0 or 1, got {self.label}")
        if self.first.resolution != self.second.resolution:
            raise ShapeSpecError(
                f"Pair resolutions differ: {self.first.resolution} vs {self.second.resolution}"
            )

    def swapped(self) -> 'PairSample':
        return PairSample(self.second, self.first, 1 - self.label)


def shaft_class(shaft_length: float) -> int:
    return int(np.searchsorted(SHAFT_CLASS_EDGES, shaft_length, side='right'))


def classify(head_style: HeadStyle, shaft_length: float) -> int:
    return 3 * HEAD_STYLES.index(HeadStyle(head_style)) + shaft_class(shaft_length)


def _head_profile(spec: ScrewSpec, px: np.ndarray, py: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Head cross-section test; t runs from 0 at the head base to 1 at the top"""
    if spec.head_style is HeadStyle.HEX:
        apothem = spec.head_radius * np.cos(np.pi / 6)
        inside = np.ones_like(px, dtype=bool)
        for angle in (np.pi / 6, np.pi / 2, 5 * np.pi / 6):
            inside &= np.abs(px * np.cos(angle) + py * np.sin(angle)) <= apothem
        return inside
    radius = spec.head_radius
    if spec.head_style is HeadStyle.COUNTERSUNK:
        radius = spec.shaft_radius + (spec.head_radius - spec.shaft_radius) * t
    return px ** 2 + py ** 2 <= radius ** 2


def generate_screw(spec: ScrewSpec, resolution: int) -> VoxelGrid:
    """Rasterize the union of head solid and shaft cylinder at cell centres"""
    if resolution < 1:
        raise ShapeSpecError(f"Resolution must be positive, got {resolution}")

    centres = (np.arange(resolution) + 0.5) / resolution
    px, py, pz = np.meshgrid(centres - 0.5, centres - 0.5, centres, indexing='ij')

    bottom = 0.5 - (spec.head_height + spec.shaft_length) / 2.0
    head_base = bottom + spec.shaft_length
    top = head_base + spec.head_height

    radial = px ** 2 + py ** 2
    shaft_radius = np.full_like(pz, spec.shaft_radius)
    if spec.thread_depth > 0:
        groove = ((pz - bottom) / THREAD_PITCH) % 1.0 < 0.5
        shaft_radius = np.where(groove, spec.shaft_radius - spec.thread_depth, spec.shaft_radius)
    shaft = (pz >= bottom) & (pz < head_base) & (radial <= shaft_radius ** 2)

    in_head = (pz >= head_base) & (pz <= top)
    t = np.clip((pz - head_base) / spec.head_height, 0.0, 1.0)
    head = in_head & _head_profile(spec, px, py, t)

    return VoxelGrid(shaft | head, meta=f"screw:{spec.head_style.value}:{spec.class_id}")


# in-plane 4-connectivity for each face normal axis
_PLANE_STRUCTURES = []
for _axis in range(3):
    _structure = np.zeros((3, 3, 3), dtype=bool)
    _structure[1, 1, 1] = True
    for _other in range(3):
        if _other == _axis:
            continue
        for _offset in (0, 2):
            _index = [1, 1, 1]
            _index[_other] = _offset
            _structure[tuple(_index)] = True
    _PLANE_STRUCTURES.append(_structure)


def grabability_score(grid: VoxelGrid) -> float:
    """
    Largest contiguous planar patch of exposed faces over the six axis
    directions, in cell^2 units.
    """
    occupied = grid.data
    if not occupied.any():
        return 0.0

    padded = np.pad(occupied, 1)
    best = 0
    for axis in range(3):
        for step in (1, -1):
            neighbour = np.roll(padded, -step, axis=axis)[1:-1, 1:-1, 1:-1]
            exposed = occupied & ~neighbour
            if not exposed.any():
                continue
            labels, count = ndimage.label(exposed, structure=_PLANE_STRUCTURES[axis])
            if count:
                best = max(best, int(np.bincount(labels.ravel())[1:].max()))
    return float(best)


def sample_spec(rng: np.random.Generator) -> ScrewSpec:
    style = HEAD_STYLES[int(rng.integers(len(HEAD_STYLES)))]
    head_radius = float(rng.uniform(0.12, 0.42))
    shaft_radius = float(rng.uniform(0.04, min(0.14, 0.8 * head_radius)))
    head_height = float(rng.uniform(0.08, 0.25))
    shaft_length = float(rng.uniform(0.2, MAX_TOTAL_HEIGHT - head_height - 0.01))
    thread_depth = float(rng.uniform(0.0, 0.35 * shaft_radius)) if rng.random() < 0.5 else 0.0
    return ScrewSpec(
        head_style=style,
        head_radius=head_radius,
        head_height=head_height,
        shaft_radius=shaft_radius,
        shaft_length=shaft_length,
        thread_depth=thread_depth,
        class_id=classify(style, shaft_length),
    )


def make_component_dataset(count: int, seed: int, resolution: int) -> List[Tuple[VoxelGrid, int]]:
    if count < 1:
        raise ShapeSpecError(f"count must be >= 1, got {count}")
    children = np.random.SeedSequence(seed).spawn(count)
    dataset = []
    for child in tqdm(children, desc='components', disable=not progress_enabled()):
        spec = sample_spec(np.random.default_rng(child))
        dataset.append((generate_screw(spec, resolution), spec.class_id))
    logger.info(f"Generated {count} components at R={resolution} (seed={seed})")
    return dataset


def _sample_scored(rng: np.random.Generator, resolution: int) -> Tuple[VoxelGrid, float]:
    grid = generate_screw(sample_spec(rng), resolution)
    return grid, grabability_score(grid)


def make_pair_dataset(count: int, seed: int, resolution: int) -> List[PairSample]:
    """
    Oracle-labelled pairs. Near-ties are resampled; each pair is oriented so
    that the label sequence is an exact, seeded 50/50 shuffle.
    """
    if count < 1:
        raise ShapeSpecError(f"count must be >= 1, got {count}")

    sequence = np.random.SeedSequence(seed)
    children = sequence.spawn(count)
    targets = np.random.default_rng(sequence.spawn(1)[0]).permutation(np.arange(count) % 2)

    pairs = []
    rejected = 0
    for child, target in tqdm(list(zip(children, targets)), desc='pairs', disable=not progress_enabled()):
        rng = np.random.default_rng(child)
        while True:
            first, first_score = _sample_scored(rng, resolution)
            second, second_score = _sample_scored(rng, resolution)
            if abs(first_score - second_score) >= TIE_THRESHOLD:
                break
            rejected += 1
        label = int(first_score > second_score)
        pair = PairSample(first, second, label)
        pairs.append(pair if label == target else pair.swapped())

    logger.info(f"Generated {count} pairs at R={resolution} (seed={seed}, {rejected} near-ties resampled)")
    return pairs

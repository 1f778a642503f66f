"""
Slice FID Service

Fréchet distance between feature Gaussians of the middle axial, coronal and
sagittal slices of real and synthesized voxel grids. Slices are upsampled to
128x128x3 and embedded by a pluggable feature extractor.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from scipy import linalg

from services.gan3d import Generator, generate
from services.voxel_core import SignedGrid, VoxelGrid, middle_slices, upsample_slice
from utils.errors import FidError

logger = logging.getLogger(__name__)

PLANES = ('axial', 'coronal', 'sagittal')
SYMMETRY_TOLERANCE = 1e-9
REGULARIZATION = 1e-6


class FeatureExtractor(Protocol):
    extractor_id: str

    def __call__(self, images: np.ndarray) -> np.ndarray:
        """(N, 128, 128, 3) images -> (N, d_f) features"""
        ...


class RandomConvExtractor:
    """Fixed-seed random-weight conv embedding; float64 on CPU so stats are reproducible"""

    def __init__(self, seed: int = 0, d_f: int = 64, batch_size: int = 64):
        self.seed = seed
        self.d_f = d_f
        self.batch_size = batch_size
        self.extractor_id = f"random-conv:seed={seed}:d_f={d_f}"
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 16, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(16, 32, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(32, 64, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.2),
                nn.Conv2d(64, d_f, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.2),
            ).double().eval()
        self.net.requires_grad_(False)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise FidError(f"Expected (N, H, W, 3) images, got shape {images.shape}")
        outputs = []
        with torch.no_grad():
            for start in range(0, len(images), self.batch_size):
                batch = torch.from_numpy(images[start:start + self.batch_size]).permute(0, 3, 1, 2)
                outputs.append(self.net(batch).mean(dim=(2, 3)).numpy())
        return np.concatenate(outputs, axis=0)


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if covariance.shape != (mean.size, mean.size):
            raise FidError(f"Covariance shape {covariance.shape} does not match mean of size {mean.size}")
        if self.count < 2:
            raise FidError(f"Feature statistics need at least 2 samples, got {self.count}")
        if not np.allclose(covariance, covariance.T, rtol=0.0, atol=SYMMETRY_TOLERANCE):
            raise FidError("Covariance is not symmetric")
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'covariance', covariance)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass
class FidReport:
    axial: float
    coronal: float
    sagittal: float
    extractor_id: str
    counts: Tuple[int, int]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'axial': self.axial,
            'coronal': self.coronal,
            'sagittal': self.sagittal,
            'extractor_id': self.extractor_id,
            'counts': list(self.counts),
        }


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((Σa Σb)^1/2) via the symmetric form (√Σa Σb √Σa)^1/2"""
    root_a = _psd_sqrt(sigma_a)
    product = root_a @ sigma_b @ root_a
    product = (product + product.T) / 2.0
    values = linalg.eigh(product, eigvals_only=True)
    return float(np.sqrt(np.clip(values, 0.0, None)).sum())


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    if a.dim != b.dim:
        raise FidError(f"Feature dimensions differ: {a.dim} vs {b.dim}")
    for stats in (a, b):
        if not (np.isfinite(stats.mean).all() and np.isfinite(stats.covariance).all()):
            raise FidError("Feature statistics contain non-finite values")

    delta = a.mean - b.mean
    sigma_a, sigma_b = a.covariance, b.covariance
    try:
        trace_term = _trace_sqrt_product(sigma_a, sigma_b)
    except (linalg.LinAlgError, ValueError):
        trace_term = float('nan')
    if not np.isfinite(trace_term):
        logger.warning(f"Matrix square root failed; adding {REGULARIZATION}*I to both covariances")
        offset = np.eye(a.dim) * REGULARIZATION
        sigma_a, sigma_b = sigma_a + offset, sigma_b + offset
        trace_term = _trace_sqrt_product(sigma_a, sigma_b)

    distance = float(delta @ delta + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_term)
    if distance < 0.0:
        if distance < -REGULARIZATION:
            logger.warning(f"Negative Fréchet distance {distance:.3g} clamped to 0")
        distance = 0.0
    return distance


def extract_features(slices: Sequence[np.ndarray], extractor: Optional[FeatureExtractor] = None) -> FeatureStats:
    if len(slices) < 2:
        raise FidError(f"Need at least 2 slices for a covariance, got {len(slices)}")
    extractor = extractor or RandomConvExtractor()
    features = np.asarray(extractor(np.stack(slices)), dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(slices):
        raise FidError(f"Extractor returned shape {features.shape} for {len(slices)} slices")
    covariance = np.cov(features, rowvar=False)
    covariance = np.atleast_2d((covariance + covariance.T) / 2.0)
    return FeatureStats(features.mean(axis=0), covariance, len(slices))


def _intensity(grid: Union[VoxelGrid, SignedGrid]) -> np.ndarray:
    if isinstance(grid, VoxelGrid):
        return grid.data.astype(np.float32)
    return ((np.asarray(grid.data, dtype=np.float32) + 1.0) / 2.0).clip(0.0, 1.0)


def _plane_images(grids: Sequence[Union[VoxelGrid, SignedGrid]]) -> List[List[np.ndarray]]:
    planes = [[], [], []]
    for grid in grids:
        # intensities lie in [0, 1], a valid signed range
        for index, slice_ in enumerate(middle_slices(SignedGrid(_intensity(grid)))):
            planes[index].append(upsample_slice(slice_))
    return planes


def slice_fid_sets(real: Sequence[Union[VoxelGrid, SignedGrid]], fake: Sequence[Union[VoxelGrid, SignedGrid]],
                   extractor: Optional[FeatureExtractor] = None) -> FidReport:
    """Per-plane Fréchet distances between two sets of grids"""
    if not real or not fake:
        raise FidError("Both grid sets must be non-empty")
    extractor = extractor or RandomConvExtractor()
    real_planes, fake_planes = _plane_images(real), _plane_images(fake)
    distances = {}
    for plane, real_images, fake_images in zip(PLANES, real_planes, fake_planes):
        distances[plane] = frechet_distance(
            extract_features(real_images, extractor),
            extract_features(fake_images, extractor),
        )
    report = FidReport(extractor_id=extractor.extractor_id, counts=(len(real), len(fake)), **distances)
    logger.info(
        f"Slice FID ({report.extractor_id}): axial={report.axial:.3f} "
        f"coronal={report.coronal:.3f} sagittal={report.sagittal:.3f} counts={report.counts}"
    )
    return report


def slice_fid(real: Sequence[VoxelGrid], gen: Generator, labels: Sequence[int], per_label: int,
              extractor: Optional[FeatureExtractor] = None, seed: int = 0) -> FidReport:
    """Synthesize per_label grids for every real-data label, then compare plane by plane"""
    if not real:
        raise FidError("Real set must be non-empty")
    if per_label < 1:
        raise FidError(f"per_label must be >= 1, got {per_label}")
    class_ids = [int(label) for label in labels for _ in range(per_label)]
    fake = generate(gen, class_ids, seed)
    return slice_fid_sets(real, fake, extractor)

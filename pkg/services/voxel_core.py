"""
Voxel Core Service

Voxel grid types, binary STL ingestion, mesh rasterization, middle-slice
extraction and conversions between binary occupancy and the generator's
signed [-1, 1] range.

Grids are indexed [x, y, z]; the vertical axis of generated parts is z.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from utils.errors import NonWatertightWarning, StlParseError, VoxelError, ZeroVolumeWarning

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 64
STL_HEADER_BYTES = 80
STL_TRIANGLE_BYTES = 50
UPSAMPLED_SIZE = 128
RAY_JITTER = 1e-7

_STL_TRIANGLE = np.dtype([
    ('normal', '<f4', (3,)),
    ('vertices', '<f4', (3, 3)),
    ('attribute', '<u2'),
])


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense binary occupancy grid of shape R x R x R"""
    data: np.ndarray
    meta: Optional[str] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or len(set(data.shape)) != 1 or data.shape[0] < 1:
            raise VoxelError(f"Voxel data must be a non-empty cube, got shape {data.shape}")
        if data.dtype != np.bool_:
            if not np.isin(data, (0, 1)).all():
                raise VoxelError("Voxel data must be binary (0 or 1)")
            data = data.astype(np.bool_)
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def occupied(self) -> int:
        return int(self.data.sum())

    @classmethod
    def empty(cls, resolution: int, meta: Optional[str] = None) -> 'VoxelGrid':
        return cls(np.zeros((resolution,) * 3, dtype=np.bool_), meta)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash(self.data.tobytes())


@dataclass(frozen=True, eq=False)
class SignedGrid:
    """Real-valued grid in the generator's tanh range"""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or len(set(data.shape)) != 1 or data.shape[0] < 1:
            raise VoxelError(f"Signed data must be a non-empty cube, got shape {data.shape}")
        if not np.isfinite(data).all() or data.min() < -1.0 or data.max() > 1.0:
            raise VoxelError("Signed grid entries must lie within [-1, 1]")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def resolution(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    source: Optional[str] = field(default=None)

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) == 0:
            raise VoxelError("Mesh must contain at least one triangle")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise VoxelError("Triangle index out of range")
        object.__setattr__(self, 'vertices', vertices)
        object.__setattr__(self, 'triangles', triangles)

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        used = self.vertices[np.unique(self.triangles)]
        return used.min(axis=0), used.max(axis=0)


def parse_stl(data: bytes, source: Optional[str] = None) -> TriangleMesh:
    """Parse a binary STL stream; duplicate vertices are merged"""
    if len(data) < STL_HEADER_BYTES + 4:
        raise StlParseError("expected 4-byte count", offset=STL_HEADER_BYTES)

    count = int(np.frombuffer(data, dtype='<u4', count=1, offset=STL_HEADER_BYTES)[0])
    body = len(data) - STL_HEADER_BYTES - 4
    complete = body // STL_TRIANGLE_BYTES
    if complete < count:
        offset = STL_HEADER_BYTES + 4 + complete * STL_TRIANGLE_BYTES
        raise StlParseError(f"truncated triangle {complete} of {count}", offset=offset)
    if body != count * STL_TRIANGLE_BYTES:
        raise StlParseError(
            f"triangle count mismatch: header declares {count}, payload holds {body / STL_TRIANGLE_BYTES:g}",
            offset=STL_HEADER_BYTES,
        )
    if count == 0:
        raise StlParseError("STL declares zero triangles", offset=STL_HEADER_BYTES)

    records = np.frombuffer(data, dtype=_STL_TRIANGLE, count=count, offset=STL_HEADER_BYTES + 4)
    corners = records['vertices'].reshape(-1, 3).astype(np.float64)
    vertices, inverse = np.unique(corners, axis=0, return_inverse=True)
    triangles = inverse.reshape(-1, 3)
    logger.debug(f"Parsed STL: {count} triangles, {len(vertices)} unique vertices")
    return TriangleMesh(vertices, triangles, source)


def encode_stl(mesh: TriangleMesh, header: bytes = b'latentcad') -> bytes:
    corners = mesh.vertices[mesh.triangles]
    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)

    records = np.zeros(len(corners), dtype=_STL_TRIANGLE)
    records['normal'] = normals
    records['vertices'] = corners
    head = header[:STL_HEADER_BYTES].ljust(STL_HEADER_BYTES, b' ')
    return head + np.uint32(len(corners)).tobytes() + records.tobytes()


def _is_watertight(mesh: TriangleMesh) -> bool:
    tris = mesh.triangles
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool((counts == 2).all())


def _normalize_vertices(mesh: TriangleMesh, resolution: int, bounds=None) -> Optional[np.ndarray]:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds) if bounds is not None else mesh.bounds
    extent = float((hi - lo).max())
    if extent <= 0.0:
        return None
    # uniform scale into [0,1]^3 leaving one empty cell on every side
    scale = (resolution - 2) / resolution / extent
    centre = (lo + hi) / 2.0
    return (mesh.vertices - centre) * scale + 0.5


def voxelize(mesh: TriangleMesh, resolution: int = DEFAULT_RESOLUTION,
             bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> VoxelGrid:
    """
    Rasterize a mesh by ray parity: a cell is occupied iff a ray cast along +x
    from its centre crosses the surface an odd number of times.

    Rays are offset by a fixed sub-epsilon in y and z so they never graze
    shared edges or vertices.

    The mesh is fitted into the grid by its own bounding box unless `bounds`
    gives another (lo, hi) frame, which lets several meshes share one grid.
    """
    if resolution < 1:
        raise VoxelError(f"Resolution must be positive, got {resolution}")
    if len(mesh.triangles) == 0:
        raise VoxelError("Cannot voxelize an empty mesh")

    if not _is_watertight(mesh):
        warnings.warn("Mesh is not watertight; parity test applied anyway", NonWatertightWarning, stacklevel=2)

    vertices = _normalize_vertices(mesh, resolution, bounds)
    if vertices is None:
        warnings.warn("Mesh has zero extent; returning an empty grid", ZeroVolumeWarning, stacklevel=2)
        return VoxelGrid.empty(resolution, mesh.source)

    centres = (np.arange(resolution) + 0.5) / resolution
    ray_y = centres + RAY_JITTER
    ray_z = centres + RAY_JITTER * 1.618
    # hits[m, j, k] counts crossings that lie beyond exactly m cell centres
    hits = np.zeros((resolution + 1, resolution, resolution), dtype=np.int32)

    for a, b, c in vertices[mesh.triangles]:
        det = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2])
        if abs(det) < 1e-15:
            continue  # parallel to the ray
        y_lo, y_hi = min(a[1], b[1], c[1]), max(a[1], b[1], c[1])
        z_lo, z_hi = min(a[2], b[2], c[2]), max(a[2], b[2], c[2])
        js = np.nonzero((ray_y >= y_lo) & (ray_y <= y_hi))[0]
        ks = np.nonzero((ray_z >= z_lo) & (ray_z <= z_hi))[0]
        if len(js) == 0 or len(ks) == 0:
            continue

        py, pz = np.meshgrid(ray_y[js], ray_z[ks], indexing='ij')
        wa = ((b[1] - py) * (c[2] - pz) - (c[1] - py) * (b[2] - pz)) / det
        wb = ((c[1] - py) * (a[2] - pz) - (a[1] - py) * (c[2] - pz)) / det
        wc = 1.0 - wa - wb
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
        if not inside.any():
            continue

        x_hit = wa * a[0] + wb * b[0] + wc * c[0]
        before = np.clip(np.ceil(x_hit * resolution - 0.5), 0, resolution).astype(np.int64)
        jj, kk = np.nonzero(inside)
        np.add.at(hits, (before[jj, kk], js[jj], ks[kk]), 1)

    # crossings beyond cell i are hits recorded at indices > i
    beyond = np.cumsum(hits[::-1], axis=0)[::-1][1:]
    occupancy = (beyond % 2) == 1
    grid = VoxelGrid(occupancy, mesh.source)
    if grid.occupied == 0:
        warnings.warn("No cell centre lies inside the mesh; grid is empty", ZeroVolumeWarning, stacklevel=2)
    logger.debug(f"Voxelized {len(mesh.triangles)} triangles at R={resolution}: {grid.occupied} cells")
    return grid


def binarize(grid: SignedGrid, threshold: float = 0.0) -> VoxelGrid:
    return VoxelGrid(grid.data > threshold)


def to_signed(grid: VoxelGrid) -> SignedGrid:
    return SignedGrid(np.where(grid.data, 1.0, -1.0).astype(np.float32))


def middle_slices(grid: Union[VoxelGrid, SignedGrid]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Axis-orthogonal planes through index floor(R/2), ordered
    (axial: fixed axis 2, coronal: fixed axis 1, sagittal: fixed axis 0).
    """
    resolution = grid.resolution
    if resolution < 2:
        raise VoxelError(f"Middle slices need resolution >= 2, got {resolution}")
    m = resolution // 2
    data = grid.data
    return data[:, :, m].copy(), data[:, m, :].copy(), data[m, :, :].copy()


def upsample_slice(slice_: np.ndarray, size: int = UPSAMPLED_SIZE) -> np.ndarray:
    """Nearest-neighbour upsampling to size x size with the channel replicated three times"""
    slice_ = np.asarray(slice_)
    if slice_.ndim != 2 or slice_.shape[0] != slice_.shape[1]:
        raise VoxelError(f"Expected a square slice, got shape {slice_.shape}")
    resolution = slice_.shape[0]
    if resolution > size:
        raise VoxelError(f"Cannot downsample a {resolution}x{resolution} slice to {size}x{size}")

    index = (np.arange(size) * resolution) // size
    plane = slice_.astype(np.float32)[np.ix_(index, index)]
    return np.repeat(plane[:, :, None], 3, axis=2)


def iou(a: VoxelGrid, b: VoxelGrid) -> float:
    if a.resolution != b.resolution:
        raise VoxelError(f"Resolution mismatch: {a.resolution} vs {b.resolution}")
    union = np.logical_or(a.data, b.data).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.data, b.data).sum() / union)

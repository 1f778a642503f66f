"""
File formats: VOXB voxel containers, PGM slice images and the
space-separated dataset manifests.
"""
import logging
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pandas as pd

from services.voxel_core import VoxelGrid, middle_slices
from utils.errors import VoxelError

logger = logging.getLogger(__name__)

VOXB_MAGIC = b'VOXB'
VOXB_VERSION = 1
_VOXB_HEADER = struct.Struct('<4sBI')

PathLike = Union[str, Path]


def encode_voxb(grid: VoxelGrid) -> bytes:
    """Bit-packed occupancy, x-fastest, cell 0 in bit 0 of byte 0"""
    bits = grid.data.ravel(order='F')
    payload = np.packbits(bits, bitorder='little')
    return _VOXB_HEADER.pack(VOXB_MAGIC, VOXB_VERSION, grid.resolution) + payload.tobytes()


def decode_voxb(data: bytes, meta=None) -> VoxelGrid:
    if len(data) < _VOXB_HEADER.size:
        raise VoxelError(f"VOXB stream too short for header ({len(data)} bytes)")
    magic, version, resolution = _VOXB_HEADER.unpack_from(data)
    if magic != VOXB_MAGIC:
        raise VoxelError(f"Bad VOXB magic {magic!r}")
    if version != VOXB_VERSION:
        raise VoxelError(f"Unsupported VOXB version {version}")
    if resolution < 1:
        raise VoxelError("VOXB resolution must be positive")

    cells = resolution ** 3
    expected = (cells + 7) // 8
    payload = np.frombuffer(data, dtype=np.uint8, offset=_VOXB_HEADER.size)
    if len(payload) != expected:
        raise VoxelError(f"VOXB payload holds {len(payload)} bytes, expected {expected}")
    bits = np.unpackbits(payload, bitorder='little', count=cells).astype(np.bool_)
    return VoxelGrid(bits.reshape((resolution,) * 3, order='F'), meta)


def write_voxb(grid: VoxelGrid, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_voxb(grid))
    return path


def read_voxb(path: PathLike) -> VoxelGrid:
    path = Path(path)
    return decode_voxb(path.read_bytes(), meta=str(path))


def write_pgm(image: np.ndarray, path: PathLike) -> Path:
    """8-bit binary PGM (P5); values are expected in [0, 1]"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise VoxelError(f"PGM export needs a 2D array, got shape {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    rows, cols = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode('ascii') + pixels.tobytes())
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    # header layout as produced by write_pgm: three newline-terminated lines
    data = Path(path).read_bytes()
    parts = data.split(b'\n', 3)
    if len(parts) < 4 or parts[0] != b'P5':
        raise VoxelError(f"{path} is not a binary PGM file")
    cols, rows = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise VoxelError(f"Only 8-bit PGM files are supported, got maxval {parts[2]!r}")
    pixels = np.frombuffer(parts[3][:rows * cols], dtype=np.uint8)
    return pixels.reshape(rows, cols)


def _read_manifest(path: PathLike, columns: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    frame = pd.read_csv(path, sep=r'\s+', header=None, names=columns, comment='#', dtype=str)
    for column in columns:
        if frame[column].isna().any():
            raise VoxelError(f"Manifest {path} has rows missing '{column}'")
    return frame


def _resolve(base: Path, entry: str) -> Path:
    entry_path = Path(entry)
    return entry_path if entry_path.is_absolute() else base / entry_path


def write_component_manifest(entries: List[Tuple[str, int]], path: PathLike) -> Path:
    path = Path(path)
    frame = pd.DataFrame(entries, columns=['path', 'class_id'])
    frame.to_csv(path, sep=' ', header=False, index=False)
    return path


def read_component_manifest(path: PathLike) -> List[Tuple[Path, int]]:
    path = Path(path)
    frame = _read_manifest(path, ['path', 'class_id'])
    return [(_resolve(path.parent, row.path), int(row.class_id)) for row in frame.itertuples()]


def write_pair_manifest(entries: List[Tuple[str, str, int]], path: PathLike) -> Path:
    path = Path(path)
    frame = pd.DataFrame(entries, columns=['first', 'second', 'label'])
    frame.to_csv(path, sep=' ', header=False, index=False)
    return path


def read_pair_manifest(path: PathLike) -> List[Tuple[Path, Path, int]]:
    path = Path(path)
    frame = _read_manifest(path, ['first', 'second', 'label'])
    entries = []
    for row in frame.itertuples():
        label = int(row.label)
        if label not in (0, 1):
            raise VoxelError(f"Pair manifest {path} has label {label}; expected 0 or 1")
        entries.append((_resolve(path.parent, row.first), _resolve(path.parent, row.second), label))
    return entries


def write_latent_manifest(entries: List[Tuple[str, str]], path: PathLike) -> Path:
    path = Path(path)
    frame = pd.DataFrame(entries, columns=['latent', 'source'])
    frame.to_csv(path, sep=' ', header=False, index=False)
    return path


def read_latent_manifest(path: PathLike) -> List[Tuple[Path, Path]]:
    path = Path(path)
    frame = _read_manifest(path, ['latent', 'source'])
    return [(_resolve(path.parent, row.latent), _resolve(path.parent, row.source)) for row in frame.itertuples()]


SLICE_NAMES = ('axial', 'coronal', 'sagittal')


def render_slices(grid_path: PathLike, out_dir: PathLike) -> List[Path]:
    """Write the three middle slices of a VOXB grid as PGM images (occupied = white)"""
    grid = read_voxb(grid_path)
    out_dir = Path(out_dir)
    paths = [write_pgm(plane, out_dir / f"{name}.pgm") for name, plane in zip(SLICE_NAMES, middle_slices(grid))]
    logger.info(f"Rendered {grid_path} to {out_dir}")
    return paths

import warnings

import numpy as np
import pytest

from services.voxel_core import (SignedGrid, TriangleMesh, VoxelGrid, binarize, encode_stl, iou, middle_slices,
                                 parse_stl, to_signed, upsample_slice, voxelize)
from tests.conftest import box_mesh
from utils.errors import NonWatertightWarning, StlParseError, VoxelError, ZeroVolumeWarning


def uv_sphere(slices=64, stacks=32) -> TriangleMesh:
    """Closed unit sphere: two pole fans joined by quad bands"""
    theta = np.pi * np.arange(1, stacks) / stacks
    phi = 2.0 * np.pi * np.arange(slices) / slices
    ring = np.stack([
        np.outer(np.sin(theta), np.cos(phi)),
        np.outer(np.sin(theta), np.sin(phi)),
        np.repeat(np.cos(theta)[:, None], slices, axis=1),
    ], axis=-1).reshape(-1, 3)
    vertices = np.vstack([[0.0, 0.0, 1.0], ring, [0.0, 0.0, -1.0]])
    bottom = len(vertices) - 1

    def at(i, j):
        return 1 + i * slices + j % slices

    triangles = []
    for j in range(slices):
        triangles.append([0, at(0, j), at(0, j + 1)])
        triangles.append([bottom, at(stacks - 2, j + 1), at(stacks - 2, j)])
        for i in range(stacks - 2):
            triangles.append([at(i, j), at(i + 1, j), at(i + 1, j + 1)])
            triangles.append([at(i, j), at(i + 1, j + 1), at(i, j + 1)])
    return TriangleMesh(vertices, np.array(triangles), source='sphere')


class TestParseStl:
    def test_round_trip_merges_shared_vertices(self):
        mesh = parse_stl(encode_stl(box_mesh()))
        assert len(mesh.triangles) == 12
        assert len(mesh.vertices) == 8

    def test_short_stream_reports_count_offset(self):
        with pytest.raises(StlParseError) as excinfo:
            parse_stl(b'\x00' * 80)
        assert excinfo.value.offset == 80

    def test_truncated_triangle_reports_offset(self):
        data = encode_stl(box_mesh())
        with pytest.raises(StlParseError) as excinfo:
            parse_stl(data[:-10])
        assert excinfo.value.offset == 84 + 11 * 50

    def test_count_mismatch(self):
        data = encode_stl(box_mesh()) + b'\x00' * 50
        with pytest.raises(StlParseError, match='mismatch'):
            parse_stl(data)

    def test_zero_triangles(self):
        with pytest.raises(StlParseError):
            parse_stl(b'\x00' * 84)

    def test_ascii_stl_is_rejected(self):
        text = b'solid cube\n' + b'  facet normal 0 0 1\n    outer loop\n' * 6 + b'endsolid cube\n'
        with pytest.raises(StlParseError):
            parse_stl(text)


class TestVoxelize:
    @pytest.mark.parametrize('resolution', [8, 16])
    def test_unit_cube_fills_interior(self, resolution):
        with warnings.catch_warnings():
            warnings.simplefilter('error')
            grid = voxelize(box_mesh(), resolution)
        assert grid.resolution == resolution
        assert grid.occupied == (resolution - 2) ** 3
        assert grid.data[1:-1, 1:-1, 1:-1].all()

    def test_scaling_is_uniform(self):
        grid = voxelize(box_mesh(hi=(1.0, 0.5, 0.5)), 16)
        occupied = np.argwhere(grid.data)
        extent = occupied.max(axis=0) - occupied.min(axis=0) + 1
        assert extent[0] == 14
        assert extent[1] == extent[2] == 7

    def test_translation_invariant(self):
        a = voxelize(box_mesh(), 16)
        b = voxelize(box_mesh(lo=(5.0, -3.0, 2.0), hi=(6.0, -2.0, 3.0)), 16)
        assert a == b

    def test_open_mesh_warns(self):
        mesh = box_mesh()
        open_mesh = TriangleMesh(mesh.vertices, mesh.triangles[:-1])
        with pytest.warns(NonWatertightWarning):
            voxelize(open_mesh, 8)

    def test_degenerate_mesh_is_empty(self):
        mesh = TriangleMesh(np.ones((3, 3)), np.array([[0, 1, 2]]))
        with pytest.warns(ZeroVolumeWarning):
            grid = voxelize(mesh, 8)
        assert grid.occupied == 0

    def test_sphere_volume(self):
        # radius 1 fills the frame, so it spans 31 cells at R=64
        grid = voxelize(uv_sphere(), 64)
        analytic = 4.0 / 3.0 * np.pi * 31.0 ** 3
        centres = (np.indices((64, 64, 64)) + 0.5) / 64 - 0.5
        inside = int(((centres ** 2).sum(axis=0) <= (31.0 / 64) ** 2).sum())
        assert abs(grid.occupied / analytic - 1.0) <= 0.05
        assert abs(grid.occupied / inside - 1.0) <= 0.05

    def test_nested_cubes_are_monotone(self):
        outer = box_mesh()
        frame = outer.bounds
        grids = [voxelize(box_mesh(lo=(0.5 - h,) * 3, hi=(0.5 + h,) * 3), 16, bounds=frame)
                 for h in (0.15, 0.3, 0.4)]
        grids.append(voxelize(outer, 16, bounds=frame))
        for smaller, larger in zip(grids, grids[1:]):
            assert smaller.occupied < larger.occupied
            assert not (smaller.data & ~larger.data).any()

    def test_shared_bounds_keep_offsets(self):
        frame = (np.zeros(3), np.ones(3))
        corner = voxelize(box_mesh(hi=(0.5, 0.5, 0.5)), 16, bounds=frame)
        assert np.argwhere(corner.data).max(axis=0).tolist() == [7, 7, 7]
        assert corner.data[1:8, 1:8, 1:8].all()


class TestGrids:
    def test_voxel_grid_rejects_non_binary(self):
        with pytest.raises(VoxelError):
            VoxelGrid(np.full((2, 2, 2), 2))

    def test_signed_grid_rejects_out_of_range(self):
        with pytest.raises(VoxelError):
            SignedGrid(np.full((2, 2, 2), 1.5))

    def test_binarize_and_to_signed(self):
        data = np.zeros((4, 4, 4), dtype=bool)
        data[1, 2, 3] = True
        grid = VoxelGrid(data)
        signed = to_signed(grid)
        assert set(np.unique(signed.data)) == {-1.0, 1.0}
        assert binarize(signed) == grid
        assert binarize(SignedGrid(np.zeros((4, 4, 4)))).occupied == 0

    def test_iou(self):
        a = np.zeros((4, 4, 4), dtype=bool)
        b = np.zeros((4, 4, 4), dtype=bool)
        assert iou(VoxelGrid(a), VoxelGrid(b)) == 1.0
        a[0, :, :] = True
        b[0, :2, :] = True
        assert iou(VoxelGrid(a), VoxelGrid(b)) == pytest.approx(0.5)


class TestSlices:
    def test_middle_plane_order(self):
        data = np.zeros((64, 64, 64), dtype=bool)
        data[32] = True
        axial, coronal, sagittal = middle_slices(VoxelGrid(data))
        assert sagittal.all()
        assert axial.sum() == 64 and axial[32].all()
        assert coronal.sum() == 64 and coronal[32].all()

    def test_tiny_grid_rejected(self):
        with pytest.raises(VoxelError):
            middle_slices(VoxelGrid(np.ones((1, 1, 1), dtype=bool)))

    def test_upsample_nearest(self):
        image = upsample_slice(np.array([[0, 1], [1, 0]]))
        assert image.shape == (128, 128, 3)
        assert image.dtype == np.float32
        assert image[0, 0, 0] == 0.0 and image[0, 64, 0] == 1.0 and image[64, 0, 2] == 1.0
        assert image[127, 127, 1] == 0.0

    def test_upsample_rejects_large_slices(self):
        with pytest.raises(VoxelError):
            upsample_slice(np.zeros((256, 256)))

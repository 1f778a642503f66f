import numpy as np
import pytest

from services.voxel_core import VoxelGrid
from utils.errors import VoxelError
from utils.voxel_io import (decode_voxb, encode_voxb, read_component_manifest, read_latent_manifest,
                            read_pair_manifest, read_pgm, read_voxb, render_slices, write_component_manifest,
                            write_latent_manifest, write_pair_manifest, write_pgm, write_voxb)


def single_cell(resolution, index):
    data = np.zeros((resolution,) * 3, dtype=bool)
    data[index] = True
    return VoxelGrid(data)


class TestVoxb:
    def test_header_layout(self):
        blob = encode_voxb(VoxelGrid.empty(4))
        assert blob[:4] == b'VOXB'
        assert blob[4] == 1
        assert int.from_bytes(blob[5:9], 'little') == 4
        assert len(blob) == 9 + 8

    def test_x_fastest_little_bit_order(self):
        assert encode_voxb(single_cell(4, (1, 0, 0)))[9] == 0b10
        blob = encode_voxb(single_cell(4, (0, 1, 0)))
        assert blob[9] == 0b10000
        blob = encode_voxb(single_cell(4, (0, 0, 1)))
        assert blob[9:12] == b'\x00\x00\x01'

    def test_decode_restores_grid(self):
        rng = np.random.default_rng(0)
        grid = VoxelGrid(rng.random((5, 5, 5)) > 0.5)
        assert decode_voxb(encode_voxb(grid)) == grid

    def test_bad_magic(self):
        blob = bytearray(encode_voxb(VoxelGrid.empty(4)))
        blob[:4] = b'VOXC'
        with pytest.raises(VoxelError, match='magic'):
            decode_voxb(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(encode_voxb(VoxelGrid.empty(4)))
        blob[4] = 2
        with pytest.raises(VoxelError, match='version'):
            decode_voxb(bytes(blob))

    def test_short_payload(self):
        with pytest.raises(VoxelError, match='payload'):
            decode_voxb(encode_voxb(VoxelGrid.empty(4))[:-1])

    def test_file_round_trip(self, tmp_path):
        grid = single_cell(8, (3, 4, 5))
        path = write_voxb(grid, tmp_path / 'nested' / 'cell.voxb')
        assert read_voxb(path) == grid


class TestPgm:
    def test_round_trip(self, tmp_path):
        image = np.array([[0.0, 1.0], [0.5, 0.04]])
        pixels = read_pgm(write_pgm(image, tmp_path / 'a.pgm'))
        assert pixels.tolist() == [[0, 255], [128, 10]]

    def test_whitespace_valued_pixels_survive(self, tmp_path):
        image = np.full((3, 3), 10 / 255)
        assert (read_pgm(write_pgm(image, tmp_path / 'b.pgm')) == 10).all()

    def test_render_all_ones_is_white(self, tmp_path):
        path = write_voxb(VoxelGrid(np.ones((6, 6, 6), dtype=bool)), tmp_path / 'full.voxb')
        images = render_slices(path, tmp_path / 'slices')
        assert [p.name for p in images] == ['axial.pgm', 'coronal.pgm', 'sagittal.pgm']
        for image in images:
            assert (read_pgm(image) == 255).all()

    def test_render_is_reproducible(self, tmp_path, hex_spec):
        from services.shapegen import generate_screw
        path = write_voxb(generate_screw(hex_spec, 16), tmp_path / 'screw.voxb')
        first = [p.read_bytes() for p in render_slices(path, tmp_path / 'a')]
        copy = write_voxb(read_voxb(path), tmp_path / 'copy.voxb')
        second = [p.read_bytes() for p in render_slices(copy, tmp_path / 'b')]
        assert first == second

    def test_render_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.voxb'
        path.write_bytes(b'NOPE' + bytes(20))
        with pytest.raises(VoxelError):
            render_slices(path, tmp_path / 'out')


class TestManifests:
    def test_component_manifest_paths_are_relative(self, tmp_path):
        manifest = write_component_manifest([('components/0.voxb', 3), ('components/1.voxb', 8)],
                                            tmp_path / 'components.txt')
        entries = read_component_manifest(manifest)
        assert entries == [(tmp_path / 'components/0.voxb', 3), (tmp_path / 'components/1.voxb', 8)]

    def test_pair_manifest(self, tmp_path):
        manifest = write_pair_manifest([('a.voxb', 'b.voxb', 1)], tmp_path / 'pairs.txt')
        assert read_pair_manifest(manifest) == [(tmp_path / 'a.voxb', tmp_path / 'b.voxb', 1)]

    def test_pair_manifest_rejects_bad_label(self, tmp_path):
        path = tmp_path / 'pairs.txt'
        path.write_text('a.voxb b.voxb 2\n')
        with pytest.raises(VoxelError):
            read_pair_manifest(path)

    def test_latent_manifest(self, tmp_path):
        manifest = write_latent_manifest([('w.json', 'v.voxb')], tmp_path / 'latents.txt')
        assert read_latent_manifest(manifest) == [(tmp_path / 'w.json', tmp_path / 'v.voxb')]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_component_manifest(tmp_path / 'absent.txt')

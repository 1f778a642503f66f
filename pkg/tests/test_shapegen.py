import numpy as np
import pytest

from services.shapegen import (NUM_CLASSES, TIE_THRESHOLD, HeadStyle, ScrewSpec, classify, generate_screw,
                               grabability_score, make_component_dataset, make_pair_dataset, sample_spec)
from services.voxel_core import VoxelGrid
from utils.errors import ShapeSpecError


def row_width(grid, z):
    """Number of occupied x positions in the y-middle row at height z"""
    m = grid.resolution // 2
    return int(grid.data[:, m, z].sum())


class TestScrewSpec:
    def test_shaft_must_be_thinner_than_head(self):
        with pytest.raises(ShapeSpecError):
            ScrewSpec(HeadStyle.ROUND, head_radius=0.1, head_height=0.2, shaft_radius=0.2, shaft_length=0.5)

    def test_total_height_bounded(self):
        with pytest.raises(ShapeSpecError):
            ScrewSpec(HeadStyle.ROUND, head_radius=0.3, head_height=0.3, shaft_radius=0.1, shaft_length=0.8)

    def test_thread_depth_below_shaft_radius(self):
        with pytest.raises(ShapeSpecError):
            ScrewSpec(HeadStyle.HEX, head_radius=0.3, head_height=0.2, shaft_radius=0.1, shaft_length=0.5,
                      thread_depth=0.1)

    def test_classes_cover_style_and_length(self):
        ids = {classify(style, length) for style in HeadStyle for length in (0.25, 0.5, 0.8)}
        assert ids == set(range(NUM_CLASSES))

    def test_sampled_specs_are_valid(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            spec = sample_spec(rng)
            assert spec.class_id == classify(spec.head_style, spec.shaft_length)


class TestGenerateScrew:
    def test_head_wider_than_shaft(self, hex_spec):
        grid = generate_screw(hex_spec, 32)
        occupied_z = np.nonzero(grid.data.any(axis=(0, 1)))[0]
        bottom, top = occupied_z.min(), occupied_z.max()
        assert row_width(grid, top - 1) > row_width(grid, bottom + 1)

    def test_deterministic(self, hex_spec):
        a = generate_screw(hex_spec, 16)
        assert a == generate_screw(hex_spec, 16)
        assert a.meta == f"screw:hex:{hex_spec.class_id}"

    def test_round_screw_is_mirror_symmetric(self):
        spec = ScrewSpec(HeadStyle.ROUND, head_radius=0.3, head_height=0.2, shaft_radius=0.1, shaft_length=0.5)
        grid = generate_screw(spec, 16)
        assert np.array_equal(grid.data, grid.data[::-1, :, :])
        assert np.array_equal(grid.data, grid.data[:, ::-1, :])

    def test_threads_remove_material(self, hex_spec):
        plain = generate_screw(hex_spec, 32)
        threaded_spec = ScrewSpec(hex_spec.head_style, hex_spec.head_radius, hex_spec.head_height,
                                  hex_spec.shaft_radius, hex_spec.shaft_length, thread_depth=0.05,
                                  class_id=hex_spec.class_id)
        threaded = generate_screw(threaded_spec, 32)
        assert threaded.occupied < plain.occupied
        assert not (threaded.data & ~plain.data).any()

    def test_hex_screw_volume_matches_prism_and_cylinder(self):
        spec = ScrewSpec(HeadStyle.HEX, head_radius=0.3, head_height=0.2, shaft_radius=0.1, shaft_length=0.5)
        grid = generate_screw(spec, 64)
        prism = 3.0 * np.sqrt(3.0) / 2.0 * 0.3 ** 2 * 0.2
        cylinder = np.pi * 0.1 ** 2 * 0.5
        assert abs(grid.occupied / ((prism + cylinder) * 64 ** 3) - 1.0) <= 0.05


class TestGrabability:
    def test_box_largest_face(self):
        data = np.zeros((8, 8, 8), dtype=bool)
        data[2:6, 2:6, 1:7] = True
        assert grabability_score(VoxelGrid(data)) == 4 * 6

    def test_empty_grid(self):
        assert grabability_score(VoxelGrid.empty(4)) == 0.0

    def test_diagonal_faces_do_not_connect(self):
        data = np.zeros((6, 6, 6), dtype=bool)
        data[1, 1, 1] = True
        data[2, 2, 1] = True
        assert grabability_score(VoxelGrid(data)) == 1.0

    def test_bigger_head_scores_higher(self):
        small = ScrewSpec(HeadStyle.ROUND, head_radius=0.15, head_height=0.2, shaft_radius=0.08, shaft_length=0.5)
        large = ScrewSpec(HeadStyle.ROUND, head_radius=0.4, head_height=0.2, shaft_radius=0.08, shaft_length=0.5)
        assert grabability_score(generate_screw(large, 32)) > grabability_score(generate_screw(small, 32))

    @pytest.mark.parametrize('axes', [(0, 1), (0, 2), (1, 2)])
    def test_quarter_turns_keep_the_score(self, hex_spec, axes):
        screw = generate_screw(hex_spec, 16)
        noise = np.random.default_rng(7).random((10, 10, 10)) < 0.4
        for data in (screw.data, noise):
            score = grabability_score(VoxelGrid(data))
            for turns in (1, 2, 3):
                assert grabability_score(VoxelGrid(np.rot90(data, turns, axes=axes))) == score

    @pytest.mark.parametrize('style', list(HeadStyle))
    def test_score_grows_with_head_radius(self, style):
        scores = [
            grabability_score(generate_screw(
                ScrewSpec(style, head_radius=r, head_height=0.2, shaft_radius=0.1, shaft_length=0.5), 32))
            for r in (0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45)
        ]
        assert scores == sorted(scores)
        assert scores[-1] > scores[0]


class TestDatasets:
    def test_component_dataset_is_seeded(self):
        a = make_component_dataset(5, seed=11, resolution=8)
        b = make_component_dataset(5, seed=11, resolution=8)
        assert [g for g, _ in a] == [g for g, _ in b]
        assert all(0 <= c < NUM_CLASSES for _, c in a)

    def test_pairs_follow_the_oracle(self):
        pairs = make_pair_dataset(10, seed=5, resolution=16)
        labels = [p.label for p in pairs]
        assert sum(labels) == 5
        for pair in pairs:
            first, second = grabability_score(pair.first), grabability_score(pair.second)
            assert abs(first - second) >= TIE_THRESHOLD
            assert pair.label == int(first > second)

    def test_swapped_flips_label(self):
        pair = make_pair_dataset(1, seed=2, resolution=8)[0]
        swapped = pair.swapped()
        assert swapped.first == pair.second and swapped.label == 1 - pair.label

    def test_count_must_be_positive(self):
        with pytest.raises(ShapeSpecError):
            make_pair_dataset(0, seed=0, resolution=8)

import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
os.environ.setdefault('LATENTCAD_PROGRESS', '0')
os.environ.setdefault('LATENTCAD_DEVICE', 'cpu')

from services.comparator import build_comparator
from services.gan3d import GanArchitecture, build_generator
from services.shapegen import HeadStyle, ScrewSpec, classify
from services.voxel_core import TriangleMesh

TINY_ARCH = GanArchitecture(resolution=8, d_z=8, d_w=8, channel_widths=(8, 8), num_classes=9, num_mapping_layers=2)
SMALL_ARCH = GanArchitecture(resolution=16, d_z=16, d_w=16, channel_widths=(16, 8, 8), num_classes=9,
                             num_mapping_layers=2)

BOX_TRIANGLES = np.array([
    [0, 2, 1], [0, 3, 2],  # z = lo
    [4, 5, 6], [4, 6, 7],  # z = hi
    [0, 1, 5], [0, 5, 4],  # y = lo
    [2, 3, 7], [2, 7, 6],  # y = hi
    [1, 2, 6], [1, 6, 5],  # x = hi
    [0, 4, 7], [0, 7, 3],  # x = lo
])


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriangleMesh:
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    vertices = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    return TriangleMesh(vertices, BOX_TRIANGLES.copy(), source='box')


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


@pytest.fixture
def tiny_gen():
    return build_generator(TINY_ARCH, seed=0).eval()


@pytest.fixture
def tiny_comp():
    return build_comparator(widths=(4, 8), seed=0).eval()


@pytest.fixture
def double_stack(tiny_gen, tiny_comp):
    return tiny_gen.double(), tiny_comp.double()


@pytest.fixture
def hex_spec():
    return ScrewSpec(
        head_style=HeadStyle.HEX,
        head_radius=0.35,
        head_height=0.2,
        shaft_radius=0.12,
        shaft_length=0.6,
        class_id=classify(HeadStyle.HEX, 0.6),
    )


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)

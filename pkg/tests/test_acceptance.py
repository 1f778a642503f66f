"""Desk-scale runs; deselected by default, run with `pytest -m slow`"""
import json
from pathlib import Path

import pytest
import torch

from services.comparator import ComparatorTrainConfig, evaluate_comparator, train_comparator, validation_split
from services.gan3d import DESK_ARCHITECTURE, GanTrainConfig, LatentZ, map_latent, sample_z, synthesize, train_gan
from services.inversion import InversionConfig, invert
from services.pipeline import PipelineConfig, run_pipeline
from services.shapegen import PairSample, make_component_dataset, make_pair_dataset
from services.voxel_core import binarize, iou

pytestmark = pytest.mark.slow

CONFIG_DIR = Path(__file__).resolve().parents[1] / 'config'
CPU = torch.device('cpu')


def test_comparator_learns_grabability():
    pairs = make_pair_dataset(1000, seed=0, resolution=32)
    config = ComparatorTrainConfig(epochs=20, seed=0)
    net, _ = train_comparator(config, pairs, device=CPU)
    _, validation = validation_split(pairs, config.val_fraction, config.seed)
    assert evaluate_comparator(net, validation) >= 0.9


def test_comparator_follows_inverted_labels():
    pairs = make_pair_dataset(1000, seed=0, resolution=32)
    inverted = [PairSample(p.first, p.second, 1 - p.label) for p in pairs]
    config = ComparatorTrainConfig(epochs=20, seed=0)
    net, _ = train_comparator(config, inverted, device=CPU)
    _, validation = validation_split(pairs, config.val_fraction, config.seed)
    assert evaluate_comparator(net, validation) <= 0.1


def test_self_inversion_recovers_generated_component():
    dataset = make_component_dataset(200, seed=0, resolution=32)
    gen, _, _ = train_gan(GanTrainConfig(steps=1500, seed=0, log_every=0), dataset, DESK_ARCHITECTURE, device=CPU)
    ious = []
    for seed in range(3):
        z = LatentZ(sample_z(DESK_ARCHITECTURE.d_z, 1, seed=100 + seed)[0], class_id=seed)
        target = binarize(synthesize(gen, map_latent(gen, z)))
        result = invert(gen, target, InversionConfig(seed=seed, class_id=seed))
        ious.append(iou(binarize(synthesize(gen, result.w)), target))
    assert min(ious) >= 0.9


def test_desk_pipeline_improves_components(tmp_path):
    config = PipelineConfig.from_file(CONFIG_DIR / 'desk.cfg', overrides={'out_dir': str(tmp_path / 'desk')})
    status, out = run_pipeline(config)
    assert status == 0
    summary = json.loads((out / 'summary.json').read_text())
    effect = summary['latent_optimization']
    assert effect['count'] == 20
    assert effect['comparator_improved_fraction'] >= 0.9
    assert effect['grabability_improved']
    assert summary['mapper']['mapper_preferred_fraction'] >= 0.8

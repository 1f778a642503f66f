"""
Pipeline Service

Runs every stage end to end inside one artifact directory:
data -> gan -> comparator -> inversion -> latent_optimization / mapper -> fid.
Each stage reads only what earlier stages wrote (or declared inputs) and
records its statistics in summary.json.
"""

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from services.comparator import (ComparatorTrainConfig, compare, evaluate_comparator, load_comparator, save_comparator,
                                 swap_consistency, train_comparator, validation_split)
from services.fid_eval import RandomConvExtractor, slice_fid
from services.gan3d import (GanArchitecture, GanTrainConfig, count_parameters, load_gan, save_gan, synthesize,
                            train_gan)
from services.inversion import InversionConfig, invert_many, save_latent
from services.optimize import (MapperTrainConfig, OptConfig, apply_mapper, effect_row, run_latent_optimization,
                               save_mapper, summarize_effect, train_mapper)
from services.shapegen import PairSample, make_component_dataset, make_pair_dataset
from services.voxel_core import VoxelGrid, binarize, iou, to_signed
from torch_init import seed_everything
from utils.checkpoint import state_hash
from utils.config import build_config, coerce, field_types, read_config, sections
from utils.errors import ConfigError, StageFailed
from utils.run_log import StageTimer, write_trace
from utils.stage_guard import pipeline_stage
from utils.summary import RunSummary
from utils.voxel_io import (read_component_manifest, read_pair_manifest, read_voxb, write_component_manifest,
                            write_latent_manifest, write_pair_manifest, write_voxb)

logger = logging.getLogger(__name__)

SECTION_TYPES = {
    'gan': GanTrainConfig,
    'comparator': ComparatorTrainConfig,
    'inversion': InversionConfig,
    'opt': OptConfig,
    'mapper': MapperTrainConfig,
}
# per-section seed offsets applied when a section does not set its own seed
SEED_OFFSETS = {'gan': 0, 'comparator': 1, 'inversion': 2, 'opt': 3, 'mapper': 4}
METHODS = ('both', 'latent', 'mapper')


@dataclass
class PipelineConfig:
    seed: Optional[int] = None
    out_dir: str = 'runs/desk'
    resolution: int = 32
    d_z: int = 128
    d_w: int = 128
    channel_widths: Tuple[int, ...] = (128, 96, 64, 32, 16)
    num_classes: int = 9
    num_mapping_layers: int = 4
    components: int = 200
    pairs: int = 1000
    invert_count: int = 200
    eval_count: int = 20
    per_label: int = 2
    method: str = 'both'
    extractor_seed: int = 0
    data_dir: Optional[str] = None
    gan_checkpoint: Optional[str] = None
    comparator_checkpoint: Optional[str] = None
    mask_path: Optional[str] = None
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    comparator: ComparatorTrainConfig = field(default_factory=ComparatorTrainConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    opt: OptConfig = field(default_factory=OptConfig)
    mapper: MapperTrainConfig = field(default_factory=MapperTrainConfig)

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("Pipeline config requires an explicit seed")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ('components', 'pairs', 'invert_count', 'eval_count', 'per_label'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.invert_count > self.components:
            raise ConfigError("invert_count cannot exceed components")
        if self.num_classes != 9:
            raise ConfigError("The screw dataset has exactly 9 classes")
        for name in ('data_dir', 'gan_checkpoint', 'comparator_checkpoint', 'mask_path'):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name} does not exist: {value}")
        if self.data_dir is not None:
            for manifest in ('components.txt', 'pairs.txt'):
                if not (Path(self.data_dir) / manifest).exists():
                    raise ConfigError(f"data_dir is missing {manifest}: {self.data_dir}")
        self.architecture()

    def architecture(self) -> GanArchitecture:
        return GanArchitecture(
            resolution=self.resolution,
            d_z=self.d_z,
            d_w=self.d_w,
            channel_widths=self.channel_widths,
            num_classes=self.num_classes,
            num_mapping_layers=self.num_mapping_layers,
        )

    @classmethod
    def from_values(cls, values: Dict[str, str], overrides: Optional[Dict[str, Any]] = None) -> 'PipelineConfig':
        top, nested = sections(values, SECTION_TYPES)
        plain = {f.name for f in fields(cls) if f.name not in SECTION_TYPES}
        unknown = sorted(set(top) - plain)
        if unknown:
            raise ConfigError(f"Unknown pipeline keys: {', '.join(unknown)}")
        types = field_types(cls)
        kwargs: Dict[str, Any] = {key: coerce(value, types[key]) for key, value in top.items()}
        kwargs.update(overrides or {})
        seed = kwargs.get('seed')
        if seed is None:
            raise ConfigError("Pipeline config requires an explicit seed")
        for name, section_type in SECTION_TYPES.items():
            section_values = dict(nested[name])
            section_values.setdefault('seed', str(seed + SEED_OFFSETS[name]))
            kwargs[name] = build_config(section_type, section_values)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> 'PipelineConfig':
        return cls.from_values(read_config(path), overrides)


# ---------------------------------------------------------------------------
# Dataset files

def write_dataset(out_dir: Union[str, Path], components: List[Tuple[VoxelGrid, int]],
                  pairs: List[PairSample]) -> Dict[str, Path]:
    """components/NNNNN.voxb, pairs/NNNNN_{a,b}.voxb and their manifests"""
    out_dir = Path(out_dir)
    component_entries = []
    for index, (grid, class_id) in enumerate(components):
        name = f"components/{index:05d}.voxb"
        write_voxb(grid, out_dir / name)
        component_entries.append((name, class_id))
    pair_entries = []
    for index, pair in enumerate(pairs):
        first, second = f"pairs/{index:05d}_a.voxb", f"pairs/{index:05d}_b.voxb"
        write_voxb(pair.first, out_dir / first)
        write_voxb(pair.second, out_dir / second)
        pair_entries.append((first, second, pair.label))
    manifests = {
        'components': write_component_manifest(component_entries, out_dir / 'components.txt'),
        'pairs': write_pair_manifest(pair_entries, out_dir / 'pairs.txt'),
    }
    logger.info(f"Wrote {len(components)} components and {len(pairs)} pairs to {out_dir}")
    return manifests


def read_components(manifest: Union[str, Path]) -> List[Tuple[VoxelGrid, int]]:
    return [(read_voxb(path), class_id) for path, class_id in read_component_manifest(manifest)]


def read_pairs(manifest: Union[str, Path]) -> List[PairSample]:
    return [PairSample(read_voxb(a), read_voxb(b), label) for a, b, label in read_pair_manifest(manifest)]


# ---------------------------------------------------------------------------
# Stages

class PipelineRun:
    """State shared by the stages of one run"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self.summary = RunSummary(self.out)
        self.arch = config.architecture()
        self.components: List[Tuple[VoxelGrid, int]] = []
        self.pairs: List[PairSample] = []
        self.eval_components: List[Tuple[VoxelGrid, int]] = []
        self.generator_net = None
        self.comparator_net = None
        self.train_latents = []
        self.eval_latents = []

    def _checkpoint(self, name: str) -> Path:
        return self.out / 'checkpoints' / name

    @pipeline_stage('data')
    def data(self):
        cfg = self.config
        if cfg.data_dir:
            data_dir = Path(cfg.data_dir)
            self.components = read_components(data_dir / 'components.txt')
            self.pairs = read_pairs(data_dir / 'pairs.txt')
            source = str(data_dir)
        else:
            self.components = make_component_dataset(cfg.components, cfg.seed, cfg.resolution)
            self.pairs = make_pair_dataset(cfg.pairs, cfg.seed + 1, cfg.resolution)
            write_dataset(self.out / 'data', self.components, self.pairs)
            source = 'generated'
        # held-out screws for the optimization effect evaluation
        self.eval_components = make_component_dataset(cfg.eval_count, cfg.seed + 2, cfg.resolution)
        for index, (grid, _) in enumerate(self.eval_components):
            write_voxb(grid, self.out / 'eval' / f"{index:05d}.voxb")

        class_counts = np.bincount([c for _, c in self.components], minlength=cfg.num_classes)
        self.summary.update('data', {
            'source': source,
            'components': len(self.components),
            'pairs': len(self.pairs),
            'eval_components': len(self.eval_components),
            'class_counts': class_counts.tolist(),
            'positive_fraction': float(np.mean([p.label for p in self.pairs])),
        })

    @pipeline_stage('gan')
    def gan(self):
        cfg = self.config
        if cfg.gan_checkpoint:
            self.generator_net, discriminator, meta = load_gan(cfg.gan_checkpoint)
            if meta['architecture'] != self.arch:
                raise ConfigError("gan_checkpoint architecture does not match the pipeline config")
            stats = {'loaded': True, 'step': meta['step']}
            path = Path(cfg.gan_checkpoint)
        else:
            gan_cfg = cfg.gan
            gan_cfg.snapshot_path = str(self._checkpoint('gan_snapshot.pt'))
            self.generator_net, discriminator, log = train_gan(gan_cfg, self.components, self.arch)
            path = save_gan(self._checkpoint('gan.pt'), self.generator_net, discriminator,
                            step=gan_cfg.steps, seed=gan_cfg.seed)
            write_trace(log.records, self.out / 'traces' / 'gan.jsonl')
            last = log.last()
            stats = {
                'loaded': False,
                'steps': gan_cfg.steps,
                'final_loss_d': last['loss_d'],
                'final_loss_g': last['loss_g'],
                'final_r1': last['r1'],
                'final_apa_p': last['apa_p'],
                'all_finite': log.all_finite(),
            }
        stats['generator_parameters'] = count_parameters(self.generator_net)
        stats['discriminator_parameters'] = count_parameters(discriminator)
        self.summary.update('gan', stats)
        self.summary.record_checkpoint(path)

    @pipeline_stage('comparator')
    def comparator(self):
        cfg = self.config
        comp_cfg = cfg.comparator
        _, validation = validation_split(self.pairs, comp_cfg.val_fraction, comp_cfg.seed)
        if cfg.comparator_checkpoint:
            self.comparator_net = load_comparator(cfg.comparator_checkpoint)
            stats = {'loaded': True}
            path = Path(cfg.comparator_checkpoint)
        else:
            comp_cfg.snapshot_path = str(self._checkpoint('comparator_snapshot.pt'))
            self.comparator_net, log = train_comparator(comp_cfg, self.pairs)
            path = save_comparator(self._checkpoint('comparator.pt'), self.comparator_net,
                                   step=comp_cfg.epochs, seed=comp_cfg.seed)
            write_trace(log.records, self.out / 'traces' / 'comparator.jsonl')
            last = log.last()
            stats = {'loaded': False, 'epochs': comp_cfg.epochs,
                     'final_train_loss': last['train_loss'], 'final_train_acc': last['train_acc']}
        if validation:
            stats['val_accuracy'] = evaluate_comparator(self.comparator_net, validation)
            stats['swap_consistency'] = swap_consistency(self.comparator_net, validation)
        self.summary.update('comparator', stats)
        self.summary.record_checkpoint(path)

    @pipeline_stage('inversion')
    def inversion(self):
        cfg = self.config
        generator_hash = state_hash(self.generator_net)

        train = self.components[:cfg.invert_count]
        train_results = invert_many(self.generator_net, [g for g, _ in train], cfg.inversion, [c for _, c in train])
        eval_inv = InversionConfig(**{**vars(cfg.inversion), 'seed': cfg.inversion.seed + cfg.invert_count})
        eval_results = invert_many(self.generator_net, [g for g, _ in self.eval_components], eval_inv,
                                   [c for _, c in self.eval_components])

        entries = []
        for prefix, subset, results in (('train', train, train_results),
                                        ('eval', self.eval_components, eval_results)):
            for index, ((grid, class_id), result) in enumerate(zip(subset, results)):
                latent = f"latents/{prefix}_{index:05d}.json"
                source = f"latents/{prefix}_{index:05d}.voxb"
                save_latent(self.out / latent, result.w, generator_hash, class_id, result.best_loss)
                write_voxb(grid, self.out / source)
                if prefix == 'train':
                    entries.append((f"{prefix}_{index:05d}.json", f"{prefix}_{index:05d}.voxb"))
        write_latent_manifest(entries, self.out / 'latents' / 'train.txt')

        self.train_latents = [(r.w, to_signed(g)) for r, (g, _) in zip(train_results, train)]
        self.eval_latents = [r.w for r in eval_results]

        ious = [iou(binarize(synthesize(self.generator_net, r.w)), g)
                for r, (g, _) in zip(train_results + eval_results, train + self.eval_components)]
        self.summary.update('inversion', {
            'count': len(ious),
            'mean_best_loss': float(np.mean([r.best_loss for r in train_results + eval_results])),
            'mean_iou': float(np.mean(ious)),
            'median_iou': float(np.median(ious)),
            'generator_state_sha256': generator_hash,
        })

    @pipeline_stage('latent_optimization')
    def latent_optimization(self):
        cfg = self.config
        mask = read_voxb(cfg.mask_path) if cfg.mask_path else None
        rows = []
        for index, ((grid, _), w_s) in enumerate(zip(self.eval_components, self.eval_latents)):
            _, optimized, trace = run_latent_optimization(self.generator_net, self.comparator_net, grid, w_s,
                                                          cfg.opt, mask)
            write_voxb(binarize(optimized), self.out / 'optimized' / f"{index:05d}.voxb")
            write_trace(trace, self.out / 'traces' / f"optimize_{index:05d}.jsonl")
            rows.append(effect_row(self.comparator_net, grid, optimized, trace))
        self.summary.update('latent_optimization', summarize_effect(rows))

    @pipeline_stage('mapper')
    def mapper(self):
        mapper, log = train_mapper(self.generator_net, self.comparator_net, self.train_latents, self.config.mapper)
        path = save_mapper(self._checkpoint('mapper.pt'), mapper, step=self.config.mapper.epochs,
                           seed=self.config.mapper.seed)
        write_trace(log.records, self.out / 'traces' / 'mapper.jsonl')

        scores = []
        for index, ((grid, _), w) in enumerate(zip(self.eval_components, self.eval_latents)):
            _, mapped = apply_mapper(self.generator_net, mapper, w)
            write_voxb(binarize(mapped), self.out / 'mapped' / f"{index:05d}.voxb")
            scores.append(compare(self.comparator_net, to_signed(grid), mapped))
        first, last = log.records[0], log.last()
        comparator_drop = 1.0 - last['comparator'] / first['comparator'] if first['comparator'] > 0 else 0.0
        self.summary.update('mapper', {
            'epochs': self.config.mapper.epochs,
            'comparator_epoch0': first['comparator'],
            'comparator_final': last['comparator'],
            'comparator_relative_drop': comparator_drop,
            'mapper_preferred_fraction': float(np.mean([s < 0.5 for s in scores])),
        })
        self.summary.record_checkpoint(path)

    @pipeline_stage('fid')
    def fid(self):
        cfg = self.config
        report = slice_fid(
            [g for g, _ in self.components],
            self.generator_net,
            [c for _, c in self.components],
            cfg.per_label,
            RandomConvExtractor(seed=cfg.extractor_seed),
            seed=cfg.seed + 3,
        )
        self.summary.update('fid', report.to_dict())


def run_pipeline(config: PipelineConfig) -> Tuple[int, Path]:
    """Run every stage; returns (exit status, artifact directory)"""
    run = PipelineRun(config)
    run.out.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed)

    stages = [run.data, run.gan, run.comparator, run.inversion]
    if config.method in ('both', 'latent'):
        stages.append(run.latent_optimization)
    else:
        run.summary.set_stat('latent_optimization', 'skipped', True)
    if config.method in ('both', 'mapper'):
        stages.append(run.mapper)
    else:
        run.summary.set_stat('mapper', 'skipped', True)
    stages.append(run.fid)

    status = 0
    try:
        for stage in stages:
            with StageTimer(stage.stage_name, run.summary.timing):
                stage()
    except StageFailed as e:
        run.summary.failed_stage = e.stage
        status = 1
    run.summary.write(run.out / 'summary.json')
    if status:
        logger.error(f"✗ Pipeline stopped at stage '{run.summary.failed_stage}'; partial artifacts kept in {run.out}")
    else:
        logger.info(f"✅ Pipeline finished; artifacts in {run.out}")
    return status, run.out

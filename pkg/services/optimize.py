"""
Latent Optimization Service

Two ways of moving a component's latent code towards a "more optimized"
design as judged by the comparator:

- direct latent optimization: gradient descent on w itself, anchored to the
  source latent w_s and the source grid v
- the latent mapper: a small network M trained to propose a step M(w) that is
  added to w

Both minimize H(0, C(v, G(.))) plus latent-space and data-space penalties.
Label 0 means the second comparator input (the generated candidate) wins.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from services.comparator import ComparatorNet, compare, comparator_logit_loss
from services.gan3d import EqualLinear, Generator, LatentCode, frozen, module_device, module_dtype, sample_z
from services.inversion import DivergenceMonitor
from services.shapegen import grabability_score
from services.voxel_core import SignedGrid, VoxelGrid, binarize, to_signed
from torch_init import get_device, progress_enabled
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.errors import ArchitectureError, ConfigError, OptimizationDivergedError, TrainingDivergedError
from utils.run_log import TrainLog

logger = logging.getLogger(__name__)

GridLike = Union[SignedGrid, VoxelGrid, torch.Tensor, np.ndarray]
LatentLike = Union[LatentCode, torch.Tensor]


@dataclass
class OptConfig:
    lambda1: float = 4.0
    lambda2: float = 0.2
    lambda3: float = 0.0
    steps: int = 200
    step_size: float = 0.01
    seed: int = 0
    squared_penalties: bool = False
    restore_protected: bool = False
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        for name in ('lambda1', 'lambda2', 'lambda3'):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {value}")
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")


@dataclass
class MapperTrainConfig:
    lambda1: float = 4.0
    lambda2: float = 0.2
    squared_penalties: bool = False
    epochs: int = 20
    batch_size: int = 8
    lr: float = 0.5
    sampled_latents: int = 0
    seed: int = 0
    snapshot_path: Optional[str] = None

    def __post_init__(self):
        for name in ('lambda1', 'lambda2'):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {value}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.sampled_latents < 0:
            raise ConfigError("sampled_latents must be non-negative")


class MapperNet(nn.Module):
    """Four equalized linear layers with leaky ReLU, d_w -> d_w"""

    def __init__(self, d_w: int, num_layers: int = 4, lr_mul: float = 0.01):
        super().__init__()
        self.d_w = d_w
        self.num_layers = num_layers
        self.layers = nn.ModuleList([EqualLinear(d_w, d_w, lr_mul=lr_mul) for _ in range(num_layers)])
        # an untrained mapper returns a zero step
        nn.init.zeros_(self.layers[-1].weight)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, w):
        x = w
        for layer in self.layers:
            x = self.act(layer(x))
        return x


def build_mapper(d_w: int, seed: int = 0, num_layers: int = 4) -> MapperNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MapperNet(d_w, num_layers)


# ---------------------------------------------------------------------------
# Loss terms

def _grid_tensor(grid: GridLike, device, dtype) -> torch.Tensor:
    if isinstance(grid, VoxelGrid):
        grid = to_signed(grid)
    if isinstance(grid, SignedGrid):
        grid = grid.data
    tensor = torch.as_tensor(grid, device=device, dtype=dtype)
    return tensor if tensor.dim() == 4 else tensor[None]


def _latent_tensor(w: LatentLike, device, dtype) -> torch.Tensor:
    if isinstance(w, LatentCode):
        w = w.values
    tensor = torch.as_tensor(w, device=device, dtype=dtype) if not torch.is_tensor(w) else w.to(device, dtype)
    return tensor if tensor.dim() == 2 else tensor[None]


def penalty(x: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Per-sample Euclidean norm (or its square) over all non-batch dimensions"""
    flat = x.flatten(1)
    if squared:
        return flat.square().sum(dim=1)
    return torch.linalg.vector_norm(flat, dim=1)


def comparator_term(comp: ComparatorNet, v: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
    """H(0, C(v, candidate)) per sample"""
    return comparator_logit_loss(comp(v, candidate), 0.0)


def latent_opt_terms(gen: Generator, comp: ComparatorNet, v: GridLike, w: LatentLike, w_s: LatentLike,
                     cfg: OptConfig, mask: Optional[GridLike] = None) -> Dict[str, torch.Tensor]:
    """Weighted loss components of direct latent optimization, batch-averaged"""
    device, dtype = module_device(gen), module_dtype(gen)
    w_t = _latent_tensor(w, device, dtype)
    w_s_t = _latent_tensor(w_s, device, dtype)
    v_t = _grid_tensor(v, device, dtype)
    if w_t.shape[-1] != gen.arch.d_w or w_s_t.shape[-1] != gen.arch.d_w:
        raise ArchitectureError(f"Latent dimension must be {gen.arch.d_w}")
    if v_t.shape[-1] != gen.arch.resolution:
        raise ArchitectureError(f"Grid resolution must be {gen.arch.resolution}")

    candidate = gen.synthesis(w_t)
    diff = candidate - v_t
    terms = {
        'comparator': comparator_term(comp, v_t, candidate).mean(),
        'latent': cfg.lambda1 * penalty(w_t - w_s_t, cfg.squared_penalties).mean(),
        'data': cfg.lambda2 * penalty(diff, cfg.squared_penalties).mean(),
    }
    if mask is not None and cfg.lambda3 > 0:
        mask_t = _grid_tensor(mask, device, dtype)
        if isinstance(mask, (VoxelGrid, SignedGrid)):
            mask_t = (mask_t > 0).to(dtype)
        terms['protect'] = cfg.lambda3 * penalty(mask_t * diff, cfg.squared_penalties).mean()
    else:
        terms['protect'] = diff.new_zeros(())
    terms['total'] = terms['comparator'] + terms['latent'] + terms['data'] + terms['protect']
    return terms


def latent_opt_loss(gen: Generator, comp: ComparatorNet, v: GridLike, w: LatentLike, w_s: LatentLike,
                    cfg: OptConfig, mask: Optional[GridLike] = None) -> torch.Tensor:
    return latent_opt_terms(gen, comp, v, w, w_s, cfg, mask)['total']


def mapper_terms(gen: Generator, comp: ComparatorNet, v: GridLike, w: LatentLike, mapper: MapperNet,
                 cfg: Union[OptConfig, MapperTrainConfig]) -> Dict[str, torch.Tensor]:
    device, dtype = module_device(gen), module_dtype(gen)
    w_t = _latent_tensor(w, device, dtype)
    v_t = _grid_tensor(v, device, dtype)
    if w_t.shape[-1] != mapper.d_w or mapper.d_w != gen.arch.d_w:
        raise ArchitectureError(f"Mapper and generator must share d_w={gen.arch.d_w}")

    step = mapper(w_t)
    candidate = gen.synthesis(w_t + step)
    terms = {
        'comparator': comparator_term(comp, v_t, candidate).mean(),
        'latent': cfg.lambda1 * penalty(step, cfg.squared_penalties).mean(),
        'data': cfg.lambda2 * penalty(candidate - v_t, cfg.squared_penalties).mean(),
    }
    terms['total'] = terms['comparator'] + terms['latent'] + terms['data']
    return terms


def mapper_loss(gen: Generator, comp: ComparatorNet, v: GridLike, w: LatentLike, mapper: MapperNet,
                cfg: Union[OptConfig, MapperTrainConfig]) -> torch.Tensor:
    return mapper_terms(gen, comp, v, w, mapper, cfg)['total']


# ---------------------------------------------------------------------------
# Direct latent optimization

def restore_protected(output: SignedGrid, source: VoxelGrid, mask: VoxelGrid) -> SignedGrid:
    """Reset the masked voxels of an optimized grid to the source values"""
    if not output.resolution == source.resolution == mask.resolution:
        raise ArchitectureError("Output, source and mask must share one resolution")
    data = np.where(mask.data, to_signed(source).data, output.data).astype(np.float32)
    return SignedGrid(data)


def run_latent_optimization(gen: Generator, comp: ComparatorNet, v: VoxelGrid, w_s: LatentCode,
                            cfg: OptConfig, mask: Optional[VoxelGrid] = None
                            ) -> Tuple[LatentCode, SignedGrid, List[Dict[str, float]]]:
    """
    Gradient descent on w from w_s with a cosine-decayed step size.

    Returns the best iterate by total loss, its synthesis and one trace row
    per evaluated step (the final update is evaluated too).
    """
    device, dtype = module_device(gen), module_dtype(gen)
    v_t = _grid_tensor(v, device, dtype)
    w_s_t = _latent_tensor(w_s, device, dtype)
    mask_t = _grid_tensor(mask, device, dtype).gt(0).to(dtype) if mask is not None else None

    w = w_s_t.clone().requires_grad_(True)
    optimizer = torch.optim.SGD([w], lr=cfg.step_size)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.steps)
    monitor = DivergenceMonitor(cfg.divergence_factor, cfg.divergence_patience)

    trace = []
    best_w, best_loss = w_s_t[0].clone(), float('inf')
    with frozen(gen, comp):
        for step in tqdm(range(cfg.steps + 1), desc='optimize-latent', disable=not progress_enabled(), leave=False):
            terms = latent_opt_terms(gen, comp, v_t, w, w_s_t, cfg, mask_t)
            row = {'step': step, **{name: float(value) for name, value in terms.items()}}
            trace.append(row)
            if row['total'] < best_loss:
                best_loss = row['total']
                best_w = w.detach()[0].clone()
            if monitor.update(row['total']):
                raise OptimizationDivergedError(
                    f"Latent optimization diverged at step {step}: loss {row['total']:.4g}",
                    partial={'w': LatentCode(best_w), 'trace': trace},
                )
            if step == cfg.steps:
                break
            optimizer.zero_grad(set_to_none=True)
            terms['total'].backward()
            optimizer.step()
            schedule.step()

    best = LatentCode(best_w)
    with torch.no_grad():
        grid = gen.synthesis(best_w[None])[0].clamp(-1.0, 1.0)
    output = SignedGrid(grid.cpu().float().numpy())
    if mask is not None and cfg.restore_protected:
        output = restore_protected(output, v, mask)

    first = trace[0]['comparator']
    best_row = min(trace, key=lambda r: r['total'])
    logger.debug(
        f"Latent optimization: comparator {first:.4f} -> {best_row['comparator']:.4f} "
        f"(best step {best_row['step']})"
    )
    return best, output, trace


# ---------------------------------------------------------------------------
# Latent mapper

def sampled_latents(gen: Generator, n: int, seed: int) -> List[Tuple[LatentCode, SignedGrid]]:
    """Random (w, G(w)) pairs with classes drawn uniformly"""
    device, dtype = module_device(gen), module_dtype(gen)
    z = sample_z(gen.arch.d_z, n, seed).to(device, dtype)
    classes = torch.randint(gen.arch.num_classes, (n,), generator=torch.Generator().manual_seed(seed + 1)).to(device)
    pairs = []
    with torch.no_grad():
        ws = gen.mapping(z, classes)
        for w in ws:
            grid = gen.synthesis(w[None])[0].clamp(-1.0, 1.0)
            pairs.append((LatentCode(w), SignedGrid(grid.cpu().float().numpy())))
    return pairs


def _stack_latents(latents: Sequence[Tuple[LatentCode, SignedGrid]], d_w: int) -> Tuple[torch.Tensor, torch.Tensor]:
    ws, grids = [], []
    for w, grid in latents:
        if w.dim != d_w:
            raise ArchitectureError(f"Latent dimension {w.dim} does not match generator d_w={d_w}")
        ws.append(w.values.double())
        grids.append(torch.from_numpy(np.asarray(grid.data, dtype=np.float64)))
    return torch.stack(ws), torch.stack(grids)


def train_mapper(gen: Generator, comp: ComparatorNet, latents: Sequence[Tuple[LatentCode, SignedGrid]],
                 cfg: MapperTrainConfig) -> Tuple[MapperNet, TrainLog]:
    """Fit the mapper with Adam; generator and comparator stay frozen"""
    if not latents:
        raise ConfigError("Mapper training needs at least one latent")
    latents = list(latents)
    if cfg.sampled_latents:
        latents += sampled_latents(gen, cfg.sampled_latents, cfg.seed + 7919)

    device, dtype = module_device(gen), module_dtype(gen)
    all_w, all_v = _stack_latents(latents, gen.arch.d_w)
    mapper = build_mapper(gen.arch.d_w, cfg.seed).to(device, dtype).train()
    optimizer = torch.optim.Adam(mapper.parameters(), lr=cfg.lr)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    log = TrainLog()

    logger.info(f"Training mapper on {len(latents)} latents for {cfg.epochs} epochs")
    with frozen(gen, comp):
        for epoch in tqdm(range(cfg.epochs), desc='train-mapper', disable=not progress_enabled()):
            permutation = torch.randperm(len(latents), generator=rng)
            sums = {'total': 0.0, 'comparator': 0.0, 'latent': 0.0, 'data': 0.0}
            for start in range(0, len(permutation), cfg.batch_size):
                batch = permutation[start:start + cfg.batch_size]
                terms = mapper_terms(
                    gen, comp, all_v[batch].to(device, dtype), all_w[batch].to(device, dtype), mapper, cfg
                )
                if not torch.isfinite(terms['total']):
                    snapshot = {'epoch': epoch, 'batch_start': start, 'last_finite': log.last()}
                    if cfg.snapshot_path:
                        save_mapper(cfg.snapshot_path, mapper, step=epoch, seed=cfg.seed)
                        snapshot['checkpoint'] = str(cfg.snapshot_path)
                    raise TrainingDivergedError(f"Non-finite mapper loss in epoch {epoch}", snapshot)
                optimizer.zero_grad(set_to_none=True)
                terms['total'].backward()
                optimizer.step()
                for name in sums:
                    sums[name] += float(terms[name]) * len(batch)

            record = {'epoch': epoch, **{name: value / len(latents) for name, value in sums.items()}}
            log.append(**record)
            logger.debug(
                f"[mapper {epoch + 1}/{cfg.epochs}] total={record['total']:.4f} "
                f"comparator={record['comparator']:.4f} latent={record['latent']:.4f} data={record['data']:.4f}"
            )

    last = log.last()
    logger.info(f"Mapper trained: comparator term {log.records[0]['comparator']:.4f} -> {last['comparator']:.4f}")
    return mapper.eval(), log


def apply_mapper(gen: Generator, mapper: MapperNet, w: LatentCode) -> Tuple[LatentCode, SignedGrid]:
    if w.dim != mapper.d_w or mapper.d_w != gen.arch.d_w:
        raise ArchitectureError(f"Latent, mapper and generator must share d_w={gen.arch.d_w}")
    device, dtype = module_device(gen), module_dtype(gen)
    with torch.no_grad():
        w_t = w.values.to(device, dtype)[None]
        moved = w_t + mapper.to(device, dtype)(w_t)
        grid = gen.synthesis(moved)[0].clamp(-1.0, 1.0)
    return LatentCode(moved[0]), SignedGrid(grid.cpu().float().numpy())


def save_mapper(path: Union[str, Path], mapper: MapperNet, step: int = 0, seed: Optional[int] = None) -> Path:
    return save_checkpoint(
        path,
        kind='mapper',
        architecture={'d_w': mapper.d_w, 'num_layers': mapper.num_layers},
        weights={'mapper': mapper.state_dict()},
        step=step,
        seed=seed,
    )


def load_mapper(path: Union[str, Path], device: Optional[torch.device] = None) -> MapperNet:
    container = load_checkpoint(path, expected_kind='mapper')
    arch = container['architecture']
    mapper = MapperNet(arch['d_w'], arch['num_layers'])
    mapper.load_state_dict(container['weights']['mapper'])
    return mapper.to(device or get_device()).eval()


# ---------------------------------------------------------------------------
# Evaluation

def effect_row(comp: ComparatorNet, source: VoxelGrid, optimized: SignedGrid, trace: List[Dict[str, float]],
               mapped: Optional[SignedGrid] = None) -> Dict[str, Any]:
    """Before/after measurements for one component"""
    best_row = min(trace, key=lambda r: r['total'])
    row = {
        'comparator_initial': trace[0]['comparator'],
        'comparator_best': best_row['comparator'],
        'best_step': best_row['step'],
        'grab_before': grabability_score(source),
        'grab_after': grabability_score(binarize(optimized)),
    }
    if mapped is not None:
        row['mapper_compare'] = compare(comp, to_signed(source), mapped)
        row['grab_mapped'] = grabability_score(binarize(mapped))
    return row


def summarize_effect(rows: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    if not rows:
        raise ConfigError("No rows to summarize")
    summary = {
        'count': len(rows),
        'comparator_improved_fraction': float(np.mean([r['comparator_best'] < r['comparator_initial'] for r in rows])),
        'grabability_median_before': float(np.median([r['grab_before'] for r in rows])),
        'grabability_median_after': float(np.median([r['grab_after'] for r in rows])),
    }
    summary['grabability_improved'] = summary['grabability_median_after'] >= summary['grabability_median_before']
    mapped = [r for r in rows if 'mapper_compare' in r]
    if mapped:
        summary['mapper_preferred_fraction'] = float(np.mean([r['mapper_compare'] < 0.5 for r in mapped]))
        summary['grabability_median_mapped'] = float(np.median([r['grab_mapped'] for r in mapped]))
    return summary


def evaluate_effect(gen: Generator, comp: ComparatorNet, sources: Sequence[VoxelGrid],
                    latents: Sequence[LatentCode], cfg: OptConfig,
                    mapper: Optional[MapperNet] = None) -> Dict[str, Any]:
    """
    Per-component effect of latent optimization (and the mapper, if given):
    comparator term before/after, comparator preference for the mapped
    output, and grabability oracle scores before/after.
    """
    if len(sources) != len(latents) or not sources:
        raise ConfigError("evaluate_effect needs matching, non-empty sources and latents")
    rows = []
    for source, w_s in zip(sources, latents):
        _, optimized, trace = run_latent_optimization(gen, comp, source, w_s, cfg)
        mapped = apply_mapper(gen, mapper, w_s)[1] if mapper is not None else None
        rows.append(effect_row(comp, source, optimized, trace, mapped))
    summary = summarize_effect(rows)
    summary['rows'] = rows
    return summary

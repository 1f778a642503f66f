"""
Inversion Service

Embeds voxel components into the generator's W space by optimizing a single
w against the plain L2 reconstruction error in signed voxel space. The
search starts at the mean latent and returns the best iterate seen.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from tqdm import tqdm

from services.gan3d import Generator, LatentCode, frozen, module_device, module_dtype, sample_z
from services.voxel_core import VoxelGrid, to_signed
from torch_init import progress_enabled
from utils.errors import ArchitectureError, ConfigError, InversionDivergedError

logger = logging.getLogger(__name__)


@dataclass
class InversionConfig:
    steps: int = 500
    lr: float = 0.1
    w_avg_samples: int = 1000
    seed: int = 0
    class_id: Optional[int] = None
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.w_avg_samples < 1:
            raise ConfigError("steps and w_avg_samples must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class InversionResult:
    w: LatentCode
    loss_curve: List[float] = field(default_factory=list)
    best_step: int = 0
    best_loss: float = float('inf')

    @property
    def initial_loss(self) -> float:
        return self.loss_curve[0] if self.loss_curve else float('nan')


class DivergenceMonitor:
    """Flags a run whose loss stays above factor x initial for `patience` consecutive steps"""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.streak = 0

    def update(self, loss: float) -> bool:
        if self.initial is None:
            self.initial = loss
            return False
        if not torch.isfinite(torch.tensor(loss)) or loss > self.factor * self.initial:
            self.streak += 1
        else:
            self.streak = 0
        return self.streak >= self.patience


def mean_latent(gen: Generator, n: int, seed: int, class_id: Optional[int] = None,
                batch_size: int = 256) -> LatentCode:
    """Mean of map_latent over n seeded z samples (classes drawn uniformly unless given)"""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    device, dtype = module_device(gen), module_dtype(gen)
    z = sample_z(gen.arch.d_z, n, seed).to(device, dtype)
    if class_id is None:
        classes = torch.randint(gen.arch.num_classes, (n,), generator=torch.Generator().manual_seed(seed + 1))
    else:
        classes = torch.full((n,), int(class_id), dtype=torch.long)
    classes = classes.to(device)

    total = torch.zeros(gen.arch.d_w, device=device, dtype=dtype)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            total += gen.mapping(z[start:start + batch_size], classes[start:start + batch_size]).sum(dim=0)
    return LatentCode(total / n)


def invert(gen: Generator, target: VoxelGrid, config: InversionConfig) -> InversionResult:
    if target.resolution != gen.arch.resolution:
        raise ArchitectureError(
            f"Target resolution {target.resolution} does not match generator resolution {gen.arch.resolution}"
        )
    device, dtype = module_device(gen), module_dtype(gen)
    target_t = torch.as_tensor(to_signed(target).data, device=device, dtype=dtype)[None]
    w_start = mean_latent(gen, config.w_avg_samples, config.seed, config.class_id).values.to(device, dtype)

    w = w_start.clone()[None].requires_grad_(True)
    optimizer = torch.optim.Adam([w], lr=config.lr)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.steps)
    monitor = DivergenceMonitor(config.divergence_factor, config.divergence_patience)
    result = InversionResult(w=LatentCode(w_start))

    with frozen(gen):
        # the extra pass scores the iterate produced by the last update
        for step in tqdm(range(config.steps + 1), desc='invert', disable=not progress_enabled(), leave=False):
            loss = (gen.synthesis(w) - target_t).square().mean()
            value = float(loss)
            result.loss_curve.append(value)
            if value < result.best_loss:
                result.best_loss = value
                result.best_step = step
                result.w = LatentCode(w.detach()[0].clone())
            if monitor.update(value):
                raise InversionDivergedError(
                    f"Inversion diverged at step {step}: loss {value:.4g} vs initial {monitor.initial:.4g}",
                    partial=result,
                )
            if step == config.steps:
                break
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            schedule.step()

    logger.debug(
        f"Inversion: loss {result.initial_loss:.5f} -> best {result.best_loss:.5f} at step {result.best_step}"
    )
    return result


def invert_many(gen: Generator, targets: Sequence[VoxelGrid], config: InversionConfig,
                class_ids: Optional[Sequence[Optional[int]]] = None) -> List[InversionResult]:
    """Independent inversions; job i uses seed config.seed + i"""
    results = []
    for index, target in enumerate(targets):
        job = InversionConfig(
            steps=config.steps,
            lr=config.lr,
            w_avg_samples=config.w_avg_samples,
            seed=config.seed + index,
            class_id=class_ids[index] if class_ids is not None else config.class_id,
            divergence_factor=config.divergence_factor,
            divergence_patience=config.divergence_patience,
        )
        results.append(invert(gen, target, job))
    logger.info(f"Inverted {len(results)} components")
    return results


def save_latent(path: Union[str, Path], w: LatentCode, generator_sha256: str,
                class_id: Optional[int] = None, loss: Optional[float] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        'd_w': w.dim,
        'values': w.to_list(),
        'generator_sha256': generator_sha256,
        'class_id': class_id,
        'loss': loss,
    }
    path.write_text(json.dumps(document, indent=2))
    return path


def load_latent(path: Union[str, Path]) -> Tuple[LatentCode, Dict[str, Any]]:
    document = json.loads(Path(path).read_text())
    values = document.get('values')
    if not isinstance(values, list) or len(values) != document.get('d_w'):
        raise ConfigError(f"{path} is not a valid latent file")
    return LatentCode(torch.tensor(values, dtype=torch.float64)), document

"""
3D GAN Service

Style-based voxel generator (mapping network + modulated 3D convolutions,
no noise inputs, tanh output) and a class-conditioned projection
discriminator, plus adversarial training with R1 and adaptive pseudo
augmentation (APA).

The generator lives in W space: one w vector modulates every synthesis layer.
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from services.voxel_core import SignedGrid, VoxelGrid
from torch_init import get_device, progress_enabled
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.errors import ArchitectureError, ConfigError, TrainingDivergedError
from utils.run_log import TrainLog

logger = logging.getLogger(__name__)

LRELU_GAIN = math.sqrt(2.0)


@dataclass(frozen=True)
class GanArchitecture:
    """Architecture descriptor; channel_widths[i] is the width at resolution 4 * 2**i"""
    resolution: int = 32
    d_z: int = 128
    d_w: int = 128
    channel_widths: Tuple[int, ...] = (128, 96, 64, 32, 16)
    num_classes: int = 9
    num_mapping_layers: int = 4

    def __post_init__(self):
        object.__setattr__(self, 'channel_widths', tuple(int(c) for c in self.channel_widths))
        r = self.resolution
        if r < 4 or r & (r - 1):
            raise ArchitectureError(f"Resolution must be a power of two >= 4, got {r}")
        if len(self.channel_widths) < self.num_blocks:
            raise ArchitectureError(
                f"Need {self.num_blocks} channel widths for resolution {r}, got {len(self.channel_widths)}"
            )
        if min(self.d_z, self.d_w, self.num_classes, self.num_mapping_layers) < 1:
            raise ArchitectureError("d_z, d_w, num_classes and num_mapping_layers must be positive")

    @property
    def num_blocks(self) -> int:
        return int(math.log2(self.resolution)) - 1

    @property
    def block_resolutions(self) -> List[int]:
        return [4 * 2 ** i for i in range(self.num_blocks)]

    def width(self, resolution: int) -> int:
        return self.channel_widths[int(math.log2(resolution)) - 2]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['channel_widths'] = list(self.channel_widths)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'GanArchitecture':
        return cls(**data)


DESK_ARCHITECTURE = GanArchitecture()
FULL_ARCHITECTURE = GanArchitecture(resolution=64, d_z=128, d_w=128, channel_widths=(128, 128, 64, 32, 16))


@dataclass(frozen=True)
class LatentZ:
    values: torch.Tensor
    class_id: int

    def __post_init__(self):
        values = torch.as_tensor(self.values).flatten()
        if not torch.isfinite(values).all():
            raise ArchitectureError("Latent z contains non-finite entries")
        object.__setattr__(self, 'values', values)


@dataclass(frozen=True)
class LatentCode:
    """A point in the intermediate latent space W"""
    values: torch.Tensor

    def __post_init__(self):
        values = torch.as_tensor(self.values).detach().flatten()
        if not torch.isfinite(values).all():
            raise ArchitectureError("Latent code contains non-finite entries")
        object.__setattr__(self, 'values', values)

    @property
    def dim(self) -> int:
        return self.values.numel()

    def to_list(self) -> List[float]:
        return [float(v) for v in self.values.cpu().double()]


# ---------------------------------------------------------------------------
# Layers

def normalize_2nd_moment(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * (x.square().mean(dim=1, keepdim=True) + eps).rsqrt()


class EqualLinear(nn.Module):
    """Fully connected layer with equalized learning rate"""

    def __init__(self, in_features, out_features, bias=True, bias_init=0.0, lr_mul=1.0, activation=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init) / lr_mul)) if bias else None
        self.weight_gain = lr_mul / math.sqrt(in_features)
        self.bias_gain = lr_mul
        self.activation = activation

    def forward(self, x):
        bias = self.bias * self.bias_gain if self.bias is not None else None
        x = F.linear(x, self.weight * self.weight_gain, bias)
        if self.activation:
            x = F.leaky_relu(x, 0.2) * LRELU_GAIN
        return x


class EqualConv3d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, activation=True, down=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size ** 3)
        self.padding = kernel_size // 2
        self.activation = activation
        self.down = down

    def forward(self, x):
        x = F.conv3d(x, self.weight * self.weight_gain, self.bias, padding=self.padding)
        if self.down:
            x = F.avg_pool3d(x, 2)
        if self.activation:
            x = F.leaky_relu(x, 0.2) * LRELU_GAIN
        return x


class ModulatedConv3d(nn.Module):
    """3D convolution whose input channels are scaled by a style computed from w"""

    def __init__(self, in_channels, out_channels, d_w, kernel_size=3, demodulate=True, up=False, activation=True):
        super().__init__()
        self.affine = EqualLinear(d_w, in_channels, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.weight_gain = 1.0 / math.sqrt(in_channels * kernel_size ** 3)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.demodulate = demodulate
        self.up = up
        self.activation = activation

    def forward(self, x, w):
        batch = x.shape[0]
        styles = self.affine(w)
        weight = self.weight[None] * self.weight_gain * styles[:, None, :, None, None, None]
        if self.demodulate:
            scale = (weight.square().sum(dim=[2, 3, 4, 5]) + 1e-8).rsqrt()
            weight = weight * scale[:, :, None, None, None, None]

        if self.up:
            x = F.interpolate(x, scale_factor=2, mode='trilinear', align_corners=False)
        spatial = x.shape[2:]
        x = x.reshape(1, batch * self.in_channels, *spatial)
        weight = weight.reshape(batch * self.out_channels, self.in_channels, *weight.shape[3:])
        x = F.conv3d(x, weight, padding=self.kernel_size // 2, groups=batch)
        x = x.reshape(batch, self.out_channels, *spatial) + self.bias.view(1, -1, 1, 1, 1)
        if self.activation:
            x = F.leaky_relu(x, 0.2) * LRELU_GAIN
        return x


class SynthesisBlock(nn.Module):
    def __init__(self, in_channels, out_channels, d_w, first=False):
        super().__init__()
        self.first = first
        if first:
            self.const = nn.Parameter(torch.randn(out_channels, 4, 4, 4))
        else:
            self.conv0 = ModulatedConv3d(in_channels, out_channels, d_w, up=True)
        self.conv1 = ModulatedConv3d(out_channels, out_channels, d_w)
        self.to_voxel = ModulatedConv3d(out_channels, 1, d_w, kernel_size=1, demodulate=False, activation=False)

    def forward(self, x, y, w):
        if self.first:
            x = self.const[None].expand(w.shape[0], *self.const.shape)
        else:
            x = self.conv0(x, w)
        x = self.conv1(x, w)
        t = self.to_voxel(x, w)
        if y is not None:
            t = t + F.interpolate(y, scale_factor=2, mode='trilinear', align_corners=False)
        return x, t


class MappingNetwork(nn.Module):
    """z and the class embedding are normalized, concatenated and mapped to w"""

    def __init__(self, d_z, d_w, num_classes, num_layers, lr_mul=0.01):
        super().__init__()
        self.num_classes = num_classes
        self.embed = nn.Embedding(num_classes, d_z)
        features = [2 * d_z] + [d_w] * num_layers
        self.layers = nn.ModuleList(
            EqualLinear(features[i], features[i + 1], lr_mul=lr_mul, activation=True) for i in range(num_layers)
        )

    def forward(self, z, class_ids):
        _check_classes(class_ids, self.num_classes)
        x = torch.cat([normalize_2nd_moment(z), normalize_2nd_moment(self.embed(class_ids))], dim=1)
        for layer in self.layers:
            x = layer(x)
        return x


class SynthesisNetwork(nn.Module):
    def __init__(self, arch: GanArchitecture):
        super().__init__()
        blocks = []
        for i, res in enumerate(arch.block_resolutions):
            in_channels = arch.width(res // 2) if i else arch.width(res)
            blocks.append(SynthesisBlock(in_channels, arch.width(res), arch.d_w, first=(i == 0)))
        self.blocks = nn.ModuleList(blocks)
        self.output_gain = nn.Parameter(torch.ones(()))

    def forward(self, w):
        x = y = None
        for block in self.blocks:
            x, y = block(x, y, w)
        return torch.tanh(y * self.output_gain).squeeze(1)


class Generator(nn.Module):
    def __init__(self, arch: GanArchitecture):
        super().__init__()
        self.arch = arch
        self.mapping = MappingNetwork(arch.d_z, arch.d_w, arch.num_classes, arch.num_mapping_layers)
        self.synthesis = SynthesisNetwork(arch)

    def forward(self, z, class_ids):
        return self.synthesis(self.mapping(z, class_ids))


def minibatch_stddev(x: torch.Tensor, group_size: int = 4) -> torch.Tensor:
    batch, channels, *spatial = x.shape
    group = math.gcd(batch, group_size)
    y = x.reshape(group, -1, channels, *spatial)
    y = y - y.mean(dim=0)
    y = (y.square().mean(dim=0) + 1e-8).sqrt()
    y = y.mean(dim=[1, 2, 3, 4])
    y = y.reshape(-1, 1, 1, 1, 1).repeat(group, 1, *spatial)
    return torch.cat([x, y], dim=1)


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv0 = EqualConv3d(in_channels, in_channels, 3)
        self.conv1 = EqualConv3d(in_channels, out_channels, 3, down=True)

    def forward(self, x):
        return self.conv1(self.conv0(x))


class Discriminator(nn.Module):
    """Logit = out(h) + <embed(c), h> / sqrt(C), with h the penultimate features"""

    def __init__(self, arch: GanArchitecture, mbstd_group=4):
        super().__init__()
        self.arch = arch
        self.mbstd_group = mbstd_group
        self.from_voxel = EqualConv3d(1, arch.width(arch.resolution), 1)
        self.blocks = nn.ModuleList(
            DiscriminatorBlock(arch.width(res), arch.width(res // 2))
            for res in reversed(arch.block_resolutions[1:])
        )
        channels = arch.width(4)
        self.fc = EqualLinear((channels + 1) * 4 ** 3, channels, activation=True)
        self.out = EqualLinear(channels, 1)
        self.embed = nn.Embedding(arch.num_classes, channels)
        self.projection_gain = 1.0 / math.sqrt(channels)

    def forward(self, grids, class_ids):
        _check_classes(class_ids, self.arch.num_classes)
        x = self.from_voxel(grids.unsqueeze(1))
        for block in self.blocks:
            x = block(x)
        x = minibatch_stddev(x, self.mbstd_group)
        h = self.fc(x.flatten(1))
        projection = (self.embed(class_ids) * h).sum(dim=1) * self.projection_gain
        return self.out(h).squeeze(1) + projection


def _check_classes(class_ids: torch.Tensor, num_classes: int):
    if class_ids.numel() and (int(class_ids.min()) < 0 or int(class_ids.max()) >= num_classes):
        raise ArchitectureError(f"class_id out of range [0, {num_classes}): {class_ids.tolist()}")


# ---------------------------------------------------------------------------
# Construction and inference

def build_generator(arch: GanArchitecture = DESK_ARCHITECTURE, seed: int = 0) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(arch)


def build_discriminator(arch: GanArchitecture = DESK_ARCHITECTURE, seed: int = 1) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Discriminator(arch)


def count_parameters(params: nn.Module) -> int:
    return sum(p.numel() for p in params.parameters() if p.requires_grad)


@contextmanager
def frozen(*modules: nn.Module):
    """Disable gradients of the given modules, restoring the previous flags on exit"""
    saved = [[(p, p.requires_grad) for p in m.parameters()] for m in modules]
    try:
        for module in modules:
            module.requires_grad_(False)
        yield modules
    finally:
        for flags in saved:
            for parameter, flag in flags:
                parameter.requires_grad_(flag)


def module_device(module: nn.Module) -> torch.device:
    return next(module.parameters()).device


def module_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def sample_z(d_z: int, n: int, seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(n, d_z, generator=generator)


def map_latent(params: Generator, z: LatentZ) -> LatentCode:
    device, dtype = module_device(params), module_dtype(params)
    if z.values.numel() != params.arch.d_z:
        raise ArchitectureError(f"z has dimension {z.values.numel()}, generator expects {params.arch.d_z}")
    with torch.no_grad():
        w = params.mapping(
            z.values.to(device, dtype)[None],
            torch.tensor([z.class_id], device=device),
        )
    return LatentCode(w[0])


def synthesize_tensor(params: Generator, w: torch.Tensor) -> torch.Tensor:
    """Differentiable synthesis of a batch (B, d_w) -> (B, R, R, R)"""
    return params.synthesis(w)


def synthesize(params: Generator, w: LatentCode) -> SignedGrid:
    if w.dim != params.arch.d_w:
        raise ArchitectureError(f"w has dimension {w.dim}, generator expects {params.arch.d_w}")
    device, dtype = module_device(params), module_dtype(params)
    with torch.no_grad():
        grid = params.synthesis(w.values.to(device, dtype)[None])[0]
    return SignedGrid(grid.clamp(-1.0, 1.0).cpu().float().numpy())


def discriminate(params: Discriminator, grid: SignedGrid, class_id: int) -> float:
    if grid.resolution != params.arch.resolution:
        raise ArchitectureError(
            f"Grid resolution {grid.resolution} does not match discriminator resolution {params.arch.resolution}"
        )
    device, dtype = module_device(params), module_dtype(params)
    with torch.no_grad():
        logit = params(
            torch.as_tensor(grid.data, device=device, dtype=dtype)[None],
            torch.tensor([class_id], device=device),
        )
    return float(logit[0])


def generate(params: Generator, class_ids: Sequence[int], seed: int, batch_size: int = 8) -> List[SignedGrid]:
    """Synthesize one grid per requested class from seeded z samples"""
    device, dtype = module_device(params), module_dtype(params)
    z = sample_z(params.arch.d_z, len(class_ids), seed).to(device, dtype)
    classes = torch.as_tensor(list(class_ids), dtype=torch.long, device=device)
    grids = []
    with torch.no_grad():
        for start in range(0, len(class_ids), batch_size):
            out = params(z[start:start + batch_size], classes[start:start + batch_size])
            grids.extend(SignedGrid(g.clamp(-1.0, 1.0).cpu().float().numpy()) for g in out)
    return grids


# ---------------------------------------------------------------------------
# Training

@dataclass
class GanTrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr_g: float = 0.0025
    lr_d: float = 0.0025
    beta1: float = 0.0
    beta2: float = 0.99
    r1_gamma: float = 1.0
    apa: bool = True
    apa_target: float = 0.6
    apa_step: float = 0.01
    apa_interval: int = 4
    apa_max: float = 0.9
    seed: int = 0
    log_every: int = 100
    snapshot_path: Optional[str] = None

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.r1_gamma < 0:
            raise ConfigError("r1_gamma must be non-negative")
        if not 0.0 <= self.apa_max <= 1.0 or self.apa_step < 0 or self.apa_interval < 1:
            raise ConfigError("invalid APA settings")


def r1_penalty(real_logits: torch.Tensor, real_inputs: torch.Tensor) -> torch.Tensor:
    """Mean squared gradient norm of the real logits w.r.t. their inputs"""
    if not real_logits.requires_grad:
        return real_logits.new_zeros(())
    (grad,) = torch.autograd.grad(real_logits.sum(), real_inputs, create_graph=True, allow_unused=True)
    if grad is None:
        return real_logits.new_zeros(())
    return grad.square().flatten(1).sum(dim=1).mean()


def _stack_dataset(dataset, arch: GanArchitecture) -> Tuple[torch.Tensor, torch.Tensor]:
    if not dataset:
        raise ConfigError("GAN training needs a non-empty dataset")
    grids, classes = [], []
    for grid, class_id in dataset:
        if grid.resolution != arch.resolution:
            raise ArchitectureError(
                f"Dataset grid resolution {grid.resolution} does not match architecture {arch.resolution}"
            )
        if not 0 <= class_id < arch.num_classes:
            raise ArchitectureError(f"Dataset class_id {class_id} out of range")
        grids.append(torch.from_numpy(np.array(grid.data)))
        classes.append(class_id)
    return torch.stack(grids), torch.tensor(classes, dtype=torch.long)


def train_gan(config: GanTrainConfig, dataset: List[Tuple[VoxelGrid, int]],
              arch: GanArchitecture = DESK_ARCHITECTURE,
              device: Optional[torch.device] = None) -> Tuple[Generator, Discriminator, TrainLog]:
    """
    Non-saturating logistic GAN training with R1 on the discriminator's real
    batch and adaptive pseudo augmentation: each real sample is swapped for a
    generated one with probability p, and p follows the overfitting
    heuristic r_t = mean(sign(real logits)).

    Every apa_interval steps p moves by apa_step in both directions: up when
    r_t exceeds apa_target, down when it falls below, clipped to [0, apa_max].
    """
    device = device or get_device()
    occupancy, classes = _stack_dataset(dataset, arch)
    rng = torch.Generator().manual_seed(config.seed)

    G = build_generator(arch, config.seed).to(device).train()
    D = build_discriminator(arch, config.seed + 1).to(device).train()
    opt_g = torch.optim.Adam(G.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2))
    opt_d = torch.optim.Adam(D.parameters(), lr=config.lr_d, betas=(config.beta1, config.beta2))

    log = TrainLog()
    batch = config.batch_size
    apa_p = 0.0
    r_t = 0.0
    signs = []

    logger.info(f"Training GAN: {len(occupancy)} samples, R={arch.resolution}, steps={config.steps}, apa={config.apa}")
    for step in tqdm(range(config.steps), desc='train-gan', disable=not progress_enabled()):
        index = torch.randint(len(occupancy), (batch,), generator=rng)
        real = occupancy[index].float().mul(2.0).sub(1.0).to(device)
        real_classes = classes[index].to(device)
        fake_classes = classes[torch.randint(len(occupancy), (batch,), generator=rng)].to(device)
        z = torch.randn(batch, arch.d_z, generator=rng).to(device)
        z_pseudo = torch.randn(batch, arch.d_z, generator=rng).to(device)
        replace = (torch.rand(batch, generator=rng) < apa_p).to(device)

        # discriminator step
        G.requires_grad_(False)
        D.requires_grad_(True)
        with torch.no_grad():
            fake = G(z, fake_classes)
            if replace.any():
                real = torch.where(replace[:, None, None, None], G(z_pseudo, real_classes), real)
        real = real.detach().requires_grad_(config.r1_gamma > 0)
        real_logits = D(real, real_classes)
        fake_logits = D(fake, fake_classes)
        loss_d = F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()
        r1 = r1_penalty(real_logits, real) if config.r1_gamma > 0 else real_logits.new_zeros(())
        opt_d.zero_grad(set_to_none=True)
        (loss_d + 0.5 * config.r1_gamma * r1).backward()
        opt_d.step()

        signs.append(float(real_logits.detach().sign().mean()))
        if (step + 1) % config.apa_interval == 0:
            r_t = float(np.mean(signs))
            signs = []
            if config.apa:
                apa_p = float(np.clip(apa_p + config.apa_step * np.sign(r_t - config.apa_target), 0.0, config.apa_max))

        # generator step
        G.requires_grad_(True)
        D.requires_grad_(False)
        z = torch.randn(batch, arch.d_z, generator=rng).to(device)
        gen_classes = classes[torch.randint(len(occupancy), (batch,), generator=rng)].to(device)
        loss_g = F.softplus(-D(G(z, gen_classes), gen_classes)).mean()
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()

        record = {
            'step': step,
            'loss_d': float(loss_d),
            'loss_g': float(loss_g),
            'r1': float(r1),
            'r_t': r_t,
            'apa_p': apa_p,
        }
        if not all(math.isfinite(record[k]) for k in ('loss_d', 'loss_g', 'r1')):
            snapshot = {'step': step, 'last_finite': log.last(), 'apa_p': apa_p, 'failed': record}
            if config.snapshot_path:
                save_gan(config.snapshot_path, G, D, step=step, seed=config.seed)
                snapshot['checkpoint'] = str(config.snapshot_path)
            raise TrainingDivergedError(f"Non-finite GAN loss at step {step}", snapshot)
        log.append(**record)

        if config.log_every and (step + 1) % config.log_every == 0:
            logger.info(
                f"[gan {step + 1}/{config.steps}] loss_d={record['loss_d']:.4f} "
                f"loss_g={record['loss_g']:.4f} r1={record['r1']:.4f} r_t={r_t:.3f} p={apa_p:.3f}"
            )

    G.requires_grad_(True)
    D.requires_grad_(True)
    return G.eval(), D.eval(), log


def save_gan(path: Union[str, Path], generator: Generator, discriminator: Discriminator,
             step: int = 0, seed: Optional[int] = None) -> Path:
    return save_checkpoint(
        path,
        kind='gan',
        architecture=generator.arch.to_dict(),
        weights={'generator': generator.state_dict(), 'discriminator': discriminator.state_dict()},
        step=step,
        seed=seed,
    )


def load_gan(path: Union[str, Path], device: Optional[torch.device] = None) -> Tuple[Generator, Discriminator, Dict]:
    container = load_checkpoint(path, expected_kind='gan')
    arch = GanArchitecture.from_dict(container['architecture'])
    device = device or get_device()
    generator = Generator(arch)
    generator.load_state_dict(container['weights']['generator'])
    discriminator = Discriminator(arch)
    discriminator.load_state_dict(container['weights']['discriminator'])
    meta = {'step': container['step'], 'seed': container['seed'], 'architecture': arch}
    return generator.to(device).eval(), discriminator.to(device).eval(), meta

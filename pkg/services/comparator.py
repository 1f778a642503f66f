"""
Comparator Service

Two-channel 3D convolutional network C(V1, V2) estimating the probability
that V1 is the more optimized component. Channel order is part of the
contract: V1 is channel 0, V2 is channel 1, and label 1 means V1 wins.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from services.shapegen import PairSample
from services.voxel_core import SignedGrid
from torch_init import get_device, progress_enabled
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.errors import ComparatorError, ConfigError, TrainingDivergedError
from utils.run_log import TrainLog

logger = logging.getLogger(__name__)

PROBABILITY_EPS = 1e-7
DEFAULT_WIDTHS = (16, 32, 64, 96, 128)


class ComparatorNet(nn.Module):
    """Five stride-2 conv blocks, global average pool, one logit"""

    def __init__(self, widths=DEFAULT_WIDTHS):
        super().__init__()
        self.widths = tuple(int(w) for w in widths)
        layers = []
        in_channels = 2
        for width in self.widths:
            layers += [nn.Conv3d(in_channels, width, kernel_size=3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            in_channels = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_channels, 1)

    @property
    def in_channels(self) -> int:
        return self.features[0].in_channels

    def forward(self, v1, v2):
        """Logits for batches of signed grids shaped (B, R, R, R)"""
        if v1.shape != v2.shape:
            raise ComparatorError(f"Comparator inputs differ in shape: {tuple(v1.shape)} vs {tuple(v2.shape)}")
        x = torch.stack([v1, v2], dim=1)
        x = self.features(x)
        return self.head(x.mean(dim=[2, 3, 4])).squeeze(1)


def build_comparator(widths=DEFAULT_WIDTHS, seed: int = 0) -> ComparatorNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ComparatorNet(widths)


def _params_device_dtype(params: nn.Module):
    parameter = next(params.parameters())
    return parameter.device, parameter.dtype


def compare(params: ComparatorNet, v1: SignedGrid, v2: SignedGrid) -> float:
    if v1.resolution != v2.resolution:
        raise ComparatorError(f"Resolution mismatch: {v1.resolution} vs {v2.resolution}")
    device, dtype = _params_device_dtype(params)
    with torch.no_grad():
        logit = params(
            torch.as_tensor(v1.data, device=device, dtype=dtype)[None],
            torch.as_tensor(v2.data, device=device, dtype=dtype)[None],
        )
    return float(torch.sigmoid(logit)[0])


def comparator_loss(p, y_true):
    """Binary cross-entropy H(y, p) with p clamped to [1e-7, 1 - 1e-7] in float64"""
    p = torch.as_tensor(p, dtype=p.dtype if torch.is_tensor(p) else torch.float64)
    p64 = p.to(torch.float64).clamp(PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)
    y = torch.as_tensor(y_true, dtype=torch.float64, device=p.device)
    loss = -(y * torch.log(p64) + (1.0 - y) * torch.log1p(-p64))
    return loss.to(p.dtype)


def comparator_logit_loss(logits: torch.Tensor, y_true) -> torch.Tensor:
    """
    H(y, sigmoid(logits)) evaluated on the logits. Used wherever the loss is
    differentiated: the gradient w.r.t. each logit is sigmoid(logit) - y even
    when the comparator is saturated.
    """
    y = torch.as_tensor(y_true, dtype=logits.dtype, device=logits.device).expand_as(logits)
    return F.binary_cross_entropy_with_logits(logits, y, reduction='none')


@dataclass
class ComparatorTrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    val_fraction: float = 0.2
    swap_augment: bool = True
    seed: int = 0
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    snapshot_path: Optional[str] = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")


def _stack_pairs(pairs: List[PairSample]) -> Tuple[torch.Tensor, torch.Tensor]:
    occupancy = torch.stack([
        torch.from_numpy(np.stack([np.array(p.first.data), np.array(p.second.data)]))
        for p in pairs
    ])
    labels = torch.tensor([p.label for p in pairs], dtype=torch.float32)
    return occupancy, labels


def _signed(occupancy: torch.Tensor, device, dtype) -> torch.Tensor:
    return occupancy.to(device=device, dtype=dtype).mul(2.0).sub(1.0)


def _accuracy(params: ComparatorNet, occupancy: torch.Tensor, labels: torch.Tensor, batch_size: int = 32) -> float:
    if len(labels) == 0:
        return float('nan')
    device, dtype = _params_device_dtype(params)
    correct = 0
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            chunk = _signed(occupancy[start:start + batch_size], device, dtype)
            logits = params(chunk[:, 0], chunk[:, 1])
            predicted = (logits > 0).float().cpu()
            correct += int((predicted == labels[start:start + batch_size]).sum())
    return correct / len(labels)


def evaluate_comparator(params: ComparatorNet, pairs: List[PairSample]) -> float:
    if not pairs:
        raise ComparatorError("Need at least one pair to evaluate")
    occupancy, labels = _stack_pairs(pairs)
    return _accuracy(params, occupancy, labels)


def swap_consistency(params: ComparatorNet, pairs: List[PairSample]) -> float:
    """Mean |C(a, b) + C(b, a) - 1| over the pairs"""
    if not pairs:
        raise ComparatorError("Need at least one pair to evaluate")
    device, dtype = _params_device_dtype(params)
    errors = []
    with torch.no_grad():
        for pair in pairs:
            a = torch.as_tensor(np.where(pair.first.data, 1.0, -1.0), device=device, dtype=dtype)[None]
            b = torch.as_tensor(np.where(pair.second.data, 1.0, -1.0), device=device, dtype=dtype)[None]
            forward = torch.sigmoid(params(a, b))
            backward = torch.sigmoid(params(b, a))
            errors.append(float((forward + backward - 1.0).abs()))
    return float(np.mean(errors))


def train_comparator(config: ComparatorTrainConfig, pairs: List[PairSample],
                     device: Optional[torch.device] = None) -> Tuple[ComparatorNet, TrainLog]:
    """
    Minimize the mean binary cross-entropy over the training split. With
    swap augmentation every batch also holds each pair reversed with the
    flipped label.
    """
    if not pairs:
        raise ConfigError("Comparator training needs at least one pair")
    device = device or get_device()
    occupancy, labels = _stack_pairs(pairs)

    train_idx, val_idx = _split_indices(len(pairs), config.val_fraction, config.seed)
    n_val = len(val_idx)
    train_occ, train_lab = occupancy[train_idx], labels[train_idx]
    val_occ, val_lab = occupancy[val_idx], labels[val_idx]

    net = build_comparator(config.widths, config.seed).to(device).train()
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = torch.Generator().manual_seed(config.seed + 1)
    log = TrainLog()
    dtype = next(net.parameters()).dtype

    logger.info(f"Training comparator: {len(train_idx)} train / {n_val} val pairs, epochs={config.epochs}")
    for epoch in tqdm(range(config.epochs), desc='train-comparator', disable=not progress_enabled()):
        net.train()
        permutation = torch.randperm(len(train_lab), generator=rng)
        losses, hits, seen = [], 0, 0
        for start in range(0, len(permutation), config.batch_size):
            batch = permutation[start:start + config.batch_size]
            grids = _signed(train_occ[batch], device, dtype)
            first, second = grids[:, 0], grids[:, 1]
            target = train_lab[batch].to(device, dtype)
            if config.swap_augment:
                first, second = torch.cat([first, second]), torch.cat([second, first])
                target = torch.cat([target, 1.0 - target])

            logits = net(first, second)
            loss = comparator_logit_loss(logits, target).mean()
            if not torch.isfinite(loss):
                snapshot = {'epoch': epoch, 'batch_start': start, 'last_finite': log.last()}
                if config.snapshot_path:
                    save_comparator(config.snapshot_path, net, step=epoch, seed=config.seed)
                    snapshot['checkpoint'] = str(config.snapshot_path)
                raise TrainingDivergedError(f"Non-finite comparator loss in epoch {epoch}", snapshot)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            losses.append(float(loss))
            hits += int(((logits.detach() > 0).to(dtype) == target).sum())
            seen += len(target)

        net.eval()
        record = {
            'epoch': epoch,
            'train_loss': float(np.mean(losses)),
            'train_acc': hits / seen,
            'val_acc': _accuracy(net, val_occ, val_lab) if n_val else float('nan'),
        }
        log.append(**record)
        logger.debug(
            f"[comparator {epoch + 1}/{config.epochs}] loss={record['train_loss']:.4f} "
            f"train_acc={record['train_acc']:.3f} val_acc={record['val_acc']:.3f}"
        )

    last = log.last()
    logger.info(f"Comparator trained: loss={last['train_loss']:.4f} val_acc={last['val_acc']:.3f}")
    return net.eval(), log


def save_comparator(path: Union[str, Path], params: ComparatorNet, step: int = 0, seed: Optional[int] = None) -> Path:
    return save_checkpoint(
        path,
        kind='comparator',
        architecture={'widths': list(params.widths), 'in_channels': params.in_channels},
        weights={'comparator': params.state_dict()},
        step=step,
        seed=seed,
    )


def load_comparator(path: Union[str, Path], device: Optional[torch.device] = None) -> ComparatorNet:
    container = load_checkpoint(path, expected_kind='comparator')
    if container['architecture'].get('in_channels') != 2:
        raise ComparatorError("Comparator checkpoints must take exactly two input channels")
    params = ComparatorNet(container['architecture']['widths'])
    params.load_state_dict(container['weights']['comparator'])
    return params.to(device or get_device()).eval()


def _split_indices(count: int, fraction: float, seed: int) -> Tuple[torch.Tensor, torch.Tensor]:
    order = torch.randperm(count, generator=torch.Generator().manual_seed(seed))
    n_val = int(round(count * fraction))
    if n_val >= count:
        n_val = 0
    return order[n_val:], order[:n_val]


def validation_split(pairs: List[PairSample], fraction: float, seed: int) -> Tuple[List[PairSample], List[PairSample]]:
    """The same split train_comparator uses, returned as (train, validation)"""
    train_idx, val_idx = _split_indices(len(pairs), fraction, seed)
    return [pairs[i] for i in train_idx.tolist()], [pairs[i] for i in val_idx.tolist()]

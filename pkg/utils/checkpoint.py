"""
Checkpoint containers
Self-describing torch files shared by the GAN, comparator and mapper
"""
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'latentcad-checkpoint'
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], kind: str, architecture: Dict[str, Any],
                    weights: Dict[str, Dict[str, torch.Tensor]], step: int = 0,
                    seed: Optional[int] = None, extra: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    container = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'kind': kind,
        'architecture': architecture,
        'weights': {name: {key: tensor.detach().cpu() for key, tensor in state.items()}
                    for name, state in weights.items()},
        'step': int(step),
        'seed': seed,
        'extra': extra or {},
    }
    torch.save(container, path)
    logger.info(f"Saved {kind} checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path], expected_kind: Optional[str] = None) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    container = torch.load(path, map_location='cpu', weights_only=True)
    if not isinstance(container, dict) or container.get('format') != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if container.get('version') != CHECKPOINT_VERSION:
        raise ConfigError(f"{path} has unsupported checkpoint version {container.get('version')}")
    if expected_kind and container.get('kind') != expected_kind:
        raise ConfigError(f"{path} holds a '{container.get('kind')}' checkpoint, expected '{expected_kind}'")
    return container


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def state_hash(module: torch.nn.Module) -> str:
    """Digest of every parameter and buffer, in state_dict order"""
    digest = hashlib.sha256()
    for key, tensor in module.state_dict().items():
        digest.update(key.encode('utf-8'))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()

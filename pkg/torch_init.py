import logging
import os
import random

import numpy as np
import torch
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

# Global device instance
_device = None


def initialize_runtime(deterministic=True):
    """Apply process-level torch settings taken from the environment"""
    try:
        threads = os.getenv('LATENTCAD_NUM_THREADS')
        if threads:
            torch.set_num_threads(int(threads))

        if deterministic:
            # cuBLAS needs a fixed workspace for reproducible matmuls
            os.environ.setdefault('CUBLAS_WORKSPACE_CONFIG', ':4096:8')
            torch.use_deterministic_algorithms(True, warn_only=True)
            torch.backends.cudnn.benchmark = False

        logger.info(f"✓ Torch runtime initialized (device={get_device()}, deterministic={deterministic})")
        return True
    except Exception as e:
        logger.error(f"✗ Torch runtime initialization failed: {e}")
        return False


def get_device():
    """Get or resolve the compute device (Singleton)"""
    global _device
    if _device is None:
        requested = os.getenv('LATENTCAD_DEVICE', 'auto').strip().lower()
        if requested == 'auto':
            requested = 'cuda' if torch.cuda.is_available() else 'cpu'
        _device = torch.device(requested)
    return _device


def seed_everything(seed):
    """Seed the global RNGs; services still take explicit generators"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def progress_enabled():
    return os.getenv('LATENTCAD_PROGRESS', '1') != '0'

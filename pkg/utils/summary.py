"""
Run Summary Helpers
Collects per-stage statistics, checkpoint hashes and timings into summary.json
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from utils.checkpoint import file_sha256

logger = logging.getLogger(__name__)

STAGE_KEYS = ('data', 'gan', 'comparator', 'inversion', 'latent_optimization', 'mapper', 'fid')


class RunSummary:
    """Machine-readable record of one pipeline run; only `timing` depends on wall clock"""

    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root) if root is not None else None
        self.sections: Dict[str, Dict[str, Any]] = {key: {} for key in STAGE_KEYS}
        self.checkpoints: Dict[str, str] = {}
        self.timing: Dict[str, float] = {}
        self.failed_stage: Optional[str] = None

    def set_stat(self, section: str, field: str, value: Any):
        self.sections.setdefault(section, {})[field] = value

    def update(self, section: str, values: Dict[str, Any]):
        self.sections.setdefault(section, {}).update(values)

    def record_checkpoint(self, path: Union[str, Path]) -> str:
        path = Path(path)
        inside = self.root and path.is_relative_to(self.root)
        key = path.relative_to(self.root).as_posix() if inside else path.as_posix()
        digest = file_sha256(path)
        self.checkpoints[key] = digest
        return digest

    def to_dict(self) -> Dict[str, Any]:
        document = dict(self.sections)
        document['checkpoints'] = dict(self.checkpoints)
        document['timing'] = dict(self.timing)
        if self.failed_stage:
            document['failed_stage'] = self.failed_stage
        return document

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default))
        logger.info(f"✅ Wrote run summary to {path}")
        return path


def _json_default(value):
    if hasattr(value, 'item'):
        return value.item()
    if isinstance(value, Path):
        return value.as_posix()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")

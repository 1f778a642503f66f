"""
Run logging helpers
Training logs, per-step traces and a stage timer context manager
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd

logger = logging.getLogger(__name__)


@dataclass
class TrainLog:
    """Ordered list of flat records, one per step or epoch"""
    records: List[Dict[str, Any]] = field(default_factory=list)

    def append(self, **values):
        self.records.append(values)

    def __len__(self):
        return len(self.records)

    def last(self) -> Optional[Dict[str, Any]]:
        return self.records[-1] if self.records else None

    def column(self, name: str) -> List[Any]:
        return [record[name] for record in self.records if name in record]

    def all_finite(self, *names: str) -> bool:
        for record in self.records:
            for name, value in record.items():
                if names and name not in names:
                    continue
                if isinstance(value, float) and not math.isfinite(value):
                    return False
        return True


def write_trace(records: List[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """Write records as JSON lines"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if records:
        pd.DataFrame(records).to_json(path, orient='records', lines=True)
    else:
        path.write_text('')
    return path


class StageTimer:
    """Context manager measuring the wall-clock duration of a pipeline stage"""

    def __init__(self, stage: str, timings: Optional[Dict[str, float]] = None):
        self.stage = stage
        self.timings = timings
        self.start_time = None
        self.duration = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.duration = time.perf_counter() - self.start_time
        if self.timings is not None:
            self.timings[self.stage] = round(self.duration, 3)
        status = 'failed' if exc_type else 'done'
        logger.info(f"📊 [{self.stage}] {status} in {self.duration:.2f}s")
        return False

"""
Stage Guard Decorators
Export pipeline_stage for wrapping pipeline steps
"""
import logging
from functools import wraps

from utils.errors import StageFailed

logger = logging.getLogger(__name__)


def pipeline_stage(name: str):
    """Decorator turning any failure inside a pipeline step into StageFailed(name)"""
    def decorator(f):
        @wraps(f)
        def decorated(*args, **kwargs):
            try:
                return f(*args, **kwargs)
            except StageFailed:
                raise
            except Exception as e:
                logger.error(f"✗ Stage '{name}' failed: {type(e).__name__}: {e}")
                raise StageFailed(name, e) from e
        decorated.stage_name = name
        return decorated
    return decorator

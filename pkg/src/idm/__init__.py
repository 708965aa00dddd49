"""Five-agent traffic analytics pipeline over loop-detector data."""

from .errors import IdmError
from .pipeline import Pipeline, PipelineConfig

__version__ = "0.1.0"

__all__ = ["IdmError", "Pipeline", "PipelineConfig", "__version__"]

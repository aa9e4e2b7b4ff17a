"""Channel pruning of a pretrained CNN guided by unlabeled data."""

from .config import PipelineConfig, load_config
from .errors import PUDError

__all__ = ["PipelineConfig", "load_config", "PUDError"]
__version__ = "0.1.0"

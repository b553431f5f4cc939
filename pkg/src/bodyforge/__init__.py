"""bodyforge: desk-scale textured 3D human generation, trained against
supervision distilled from a 2D image generator and a pixel-aligned
single-view reconstructor.
"""

from .config import RunConfig, micro_config

__version__ = "0.1.0"

__all__ = ["RunConfig", "micro_config", "__version__"]

"""Wind-turbine blade inspection: blade segmentation, superpixel patches and anomaly scoring."""
from .core import BoundingBox, ColorSpace, ImageBuffer, InvalidColorSpace, ShapeError
from .ingest import ConfigurationError
from .segnet import NumericalError
from .metrics import UndefinedMetricError

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "ColorSpace",
    "ConfigurationError",
    "ImageBuffer",
    "InvalidColorSpace",
    "NumericalError",
    "ShapeError",
    "UndefinedMetricError",
]

"""Camera-mosaic to bird's-eye-view vehicle detection, trained from scratch.

Pipeline: eight camera tiles assemble into a 3x3 mosaic (blank center, bottom
row rotated 180 degrees); a small conv backbone and a per-scale three-conv
detection head predict per-cell (x, y, theta, confidence); grid compensation
decodes cell offsets into global BEV coordinates; training minimizes an AABB
IoU bbox term plus positive/negative confidence BCE with Adam.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DatasetFormatError,
                     NumericAbortError, ValidationError)
from .geometry import (Aabb, Detection, OrientedBox, iou_aabb,
                       iou_oriented_oracle, match_greedy, nms, to_aabb)

__all__ = [
    "Aabb", "CheckpointError", "ConfigError", "DatasetFormatError", "Detection",
    "NumericAbortError", "OrientedBox", "ValidationError", "iou_aabb",
    "iou_oriented_oracle", "match_greedy", "nms", "to_aabb", "__version__",
]

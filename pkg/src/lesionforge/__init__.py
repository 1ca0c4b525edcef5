"""Detection post-processing, pseudo-label mining and FROC evaluation for
3D universal lesion detection and tagging."""

__version__ = "0.1.0"

from lesionforge.geometry import (  # noqa: E402
    CLASSES,
    Box2D,
    Box3D,
    ClassLabel,
    ScoredBox2D,
    area,
    iobb_2d,
    iobb_3d,
    iou_2d,
    iou_3d,
)
from lesionforge.fusion import FusionConfig, wbf_fuse  # noqa: E402
from lesionforge.stacking import Lesion3D, stack_2d_to_3d  # noqa: E402

__all__ = [
    "CLASSES",
    "Box2D",
    "Box3D",
    "ClassLabel",
    "FusionConfig",
    "Lesion3D",
    "ScoredBox2D",
    "area",
    "iobb_2d",
    "iobb_3d",
    "iou_2d",
    "iou_3d",
    "stack_2d_to_3d",
    "wbf_fuse",
]

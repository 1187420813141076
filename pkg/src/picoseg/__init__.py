"""picoseg: a box-promptable ROI segmentation engine small enough to study
end to end -- from-scratch conv kernels, a compact encoder-decoder net,
distillation-style losses, INT8 post-training quantization, COCO-format
evaluation and an interactive HTTP gateway.
"""

__version__ = "0.1.0"

from .tensorkit import Tensor, ConvParams, ShapeError
from .roi import BBox, CropRect, PromptConfig, RoiError
from .net import NetSpec, WeightStore

__all__ = [
    "Tensor", "ConvParams", "ShapeError",
    "BBox", "CropRect", "PromptConfig", "RoiError",
    "NetSpec", "WeightStore",
    "__version__",
]

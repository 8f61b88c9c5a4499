"""Convert a mixture-of-experts FFN layer into a dense FFN.

The package covers calibration statistics, expert scoring, D-optimal subset
selection, grouping, merging with down-projection scaling, a toy distillation
loop, and executable checks of the underlying guarantees.
"""
from .calibration import CalibStats, collect, merge_stats
from .conversion import ConversionConfig, ConversionReport, ScalingMode, convert_layer
from .errors import (ConstructionError, MergeError, ModelFormatError, Moe2DenseError, NumericError,
                     ShapeError, TheoremCheckError, ValidationError)
from .grouping import GroupStrategy, Partition
from .model import DenseFfn, ExpertWeights, MoeLayer, dense_forward, expert_forward, moe_forward
from .scoring import Kernel, ScoreMethod, Selection, SelectMethod

__version__ = "0.1.0"

__all__ = [
    "CalibStats", "collect", "merge_stats",
    "ConversionConfig", "ConversionReport", "ScalingMode", "convert_layer",
    "ConstructionError", "MergeError", "ModelFormatError", "Moe2DenseError", "NumericError",
    "ShapeError", "TheoremCheckError", "ValidationError",
    "GroupStrategy", "Partition",
    "DenseFfn", "ExpertWeights", "MoeLayer", "dense_forward", "expert_forward", "moe_forward",
    "Kernel", "ScoreMethod", "Selection", "SelectMethod",
]

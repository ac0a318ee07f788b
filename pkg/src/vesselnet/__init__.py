"""CPU micro-engine for SA-UNetv2 retinal vessel segmentation."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, shadow64  # noqa: E402
from .errors import (  # noqa: E402
    AxisError,
    ConfigError,
    ContractError,
    DegenerateError,
    DivergenceError,
    FormatError,
    IngestError,
    ShapeError,
    VesselNetError,
)
from .estimator import VesselSegmenter  # noqa: E402
from .model import ModelConfig, ParamStore, build, count_flops, count_params, forward  # noqa: E402
from .rng import Rng  # noqa: E402

__all__ = [
    "AxisError", "ConfigError", "ContractError", "DegenerateError", "DivergenceError",
    "FormatError", "IngestError", "ModelConfig", "ParamStore", "Rng", "ShapeError", "Tape",
    "Tensor", "VesselNetError", "VesselSegmenter", "backward", "build", "count_flops",
    "count_params", "forward", "shadow64",
]

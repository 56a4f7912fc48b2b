"""Online video instance segmentation by query propagation, at desk scale.

A numpy reverse-mode autodiff core, a small query-based frame segmenter, an
aligner that refreshes propagated queries from the current frame, box-driven
positional embeddings, clip training with once-only matching, a synthetic
moving-shapes video generator and track-level evaluation.
"""

from .config import ConfigError, RunConfig, load_config, parse_config
from .numcore import ContractError, DecisionTrace, DimensionError, Tensor
from .tracker import Model, TrackState, run_video, step

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DecisionTrace",
    "DimensionError",
    "Model",
    "RunConfig",
    "Tensor",
    "TrackState",
    "load_config",
    "parse_config",
    "run_video",
    "step",
]

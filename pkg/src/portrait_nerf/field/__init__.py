from .analytic import (
    CANONICAL_LANDMARKS,
    HEAD_RADIUS,
    LANDMARK_NAMES,
    AnalyticField,
    Blob,
    SyntheticSubject,
    analytic_field_eval,
    analytic_query,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .mlp import (
    Architecture,
    MlpParams,
    NeuralField,
    backward,
    field_backward,
    field_eval,
    forward,
    init_params,
    positional_encoding,
)

__all__ = [
    "Architecture", "MlpParams", "NeuralField", "init_params", "positional_encoding",
    "forward", "backward", "field_eval", "field_backward",
    "SyntheticSubject", "Blob", "AnalyticField", "analytic_field_eval", "analytic_query",
    "CANONICAL_LANDMARKS", "LANDMARK_NAMES", "HEAD_RADIUS",
    "save_checkpoint", "load_checkpoint",
]
